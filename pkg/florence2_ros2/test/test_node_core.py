import random
import threading
import time

import pytest

from conftest import make_image
from florence2_ros2.clock import MonotonicClock, VirtualClock
from florence2_ros2.contract import (
    ExecuteTaskRequest,
    FeedbackStage,
    RasterImage,
    Stamp,
    parse_result,
)
from florence2_ros2.errors import ConfigError
from florence2_ros2.inference_backend import MockBackend
from florence2_ros2.node_core import (
    CancellationToken,
    FeedbackEmitter,
    InteractionMode,
    Job,
    LatestImageCache,
    NodeConfig,
    priority_schedule,
)


def _collect(engine):
    outputs = []
    engine.add_output_listener(outputs.append)
    return outputs


def _wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            raise AssertionError("condition not reached")
        time.sleep(0.005)


# -------------------------
# Building blocks
# -------------------------

def test_cache_snapshot_sequence():
    cache = LatestImageCache()
    assert not cache.populated
    assert cache.snapshot().seq == 0
    first = make_image(seed=1, stamp=Stamp(1, 0))
    second = make_image(seed=2, stamp=Stamp(2, 0))
    assert cache.store(first) == 1
    assert cache.store(second) == 2
    snap = cache.snapshot()
    assert snap.image is second
    assert snap.stamp == Stamp(2, 0)


def test_feedback_emitter_orders_stages(clock):
    seen = []
    emitter = FeedbackEmitter(seen.append, clock)
    emitter.emit(FeedbackStage.RECEIVED)
    clock.advance_to(0.5)
    emitter.emit(FeedbackStage.INFERENCE_RUNNING)
    with pytest.raises(ValueError):
        emitter.emit(FeedbackStage.PREPROCESSING)
    assert [fb.stage for fb in seen] == [FeedbackStage.RECEIVED, FeedbackStage.INFERENCE_RUNNING]
    assert [fb.elapsed for fb in seen] == [0.0, 0.5]


def test_feedback_sink_errors_are_contained(clock):
    def broken(_):
        raise RuntimeError("sink down")

    emitter = FeedbackEmitter(broken, clock)
    emitter.emit(FeedbackStage.RECEIVED)
    assert len(emitter.emitted) == 1


def test_priority_schedule(registry):
    spec = registry.lookup("<OD>")
    image = make_image()

    def job(mode):
        return Job(mode, spec, "<OD>", image, Stamp())

    service, action, tick = job(InteractionMode.SERVICE), job(InteractionMode.ACTION), job(
        InteractionMode.CONTINUOUS)
    assert priority_schedule([service, action], tick) is service
    assert priority_schedule([], tick) is tick
    assert priority_schedule([], None) is None


def test_config_rejects_unknown_continuous_task(registry):
    with pytest.raises(ConfigError):
        NodeConfig(continuous_task="<NOPE>").validate(registry)


def test_config_rejects_text_task_without_text(registry):
    with pytest.raises(ConfigError):
        NodeConfig(continuous_task="<OPEN_VOCABULARY_DETECTION>").validate(registry)
    NodeConfig(continuous_task="<OPEN_VOCABULARY_DETECTION>",
               continuous_text_input="person").validate(registry)


def test_config_rejects_zero_queue(registry):
    with pytest.raises(ConfigError):
        NodeConfig(queue_depth=0).validate(registry)


# -------------------------
# Service mode
# -------------------------

def test_service_with_explicit_image(make_engine, image):
    engine = make_engine()
    response = engine.handle_service(ExecuteTaskRequest("<OD>", image=image))
    assert response.success, response.error_message
    doc = parse_result(response.results_json)
    assert doc.task == "<OD>"
    assert doc.model == "mock"
    assert doc.stamp == image.stamp
    assert response.inference_time == pytest.approx(0.1)
    assert len(response.detections) == 1
    assert response.detections.source_stamp == image.stamp


def test_service_text_task_has_no_detections(make_engine, image):
    response = make_engine().handle_service(ExecuteTaskRequest("<CAPTION>", image=image))
    assert response.success
    assert response.detections is None
    assert parse_result(response.results_json).output["text"].startswith("mock caption")


def test_service_uses_latest_image(make_engine, image):
    engine = make_engine()
    engine.on_image(image)
    response = engine.handle_service(ExecuteTaskRequest("<OD>", use_latest_image=True))
    assert response.success
    assert parse_result(response.results_json).stamp == image.stamp


def test_service_without_cached_image(make_engine):
    engine = make_engine()
    response = engine.handle_service(ExecuteTaskRequest("<OD>", use_latest_image=True))
    assert not response.success
    assert response.error_message.startswith("NO_IMAGE_AVAILABLE")
    assert response.results_json == ""
    assert engine.backend.calls == 0
    assert engine.stats().failures == 1


@pytest.mark.parametrize("req, code", [
    (ExecuteTaskRequest("<NOPE>", image=make_image()), "UNKNOWN_TASK"),
    (ExecuteTaskRequest("<OD>"), "AMBIGUOUS_IMAGE_SOURCE"),
    (ExecuteTaskRequest("<CAPTION_TO_PHRASE_GROUNDING>", image=make_image()), "MISSING_TEXT_INPUT"),
    (ExecuteTaskRequest("<OD>", image=RasterImage(4, 4, "rgb8", bytes(10))), "MALFORMED_IMAGE"),
])
def test_service_rejections(make_engine, req, code):
    response = make_engine().handle_service(req)
    assert not response.success
    assert response.error_message.startswith(code)


def test_service_image_without_stamp_uses_clock(make_engine):
    clock = VirtualClock(start=2.5, epoch=1_700_000_000.0)
    engine = make_engine(clock=clock)
    response = engine.handle_service(ExecuteTaskRequest("<OD>", image=make_image()))
    assert parse_result(response.results_json).stamp == Stamp(1_700_000_002, 500_000_000)


def test_unstamped_frame_outputs_share_one_stamp(make_engine):
    clock = VirtualClock(start=2.5, epoch=1_700_000_000.0)
    engine = make_engine(clock=clock)
    outputs = _collect(engine)
    engine.handle_service(ExecuteTaskRequest("<OD>", image=make_image()))
    stamp = Stamp(1_700_000_002, 500_000_000)
    assert outputs[0].detections.source_stamp == stamp
    assert outputs[0].annotated_image.stamp == stamp
    assert parse_result(outputs[0].results_json).stamp == stamp


def test_backend_failure_becomes_response(make_engine, image):
    engine = make_engine()

    def explode(prompt, img, spec):
        raise RuntimeError("device lost")

    engine.backend._infer = explode
    response = engine.handle_service(ExecuteTaskRequest("<OD>", image=image))
    assert not response.success
    assert response.error_message == "INFERENCE_FAILURE: device lost"
    assert engine.stats().failures == 1


# -------------------------
# Action mode
# -------------------------

def test_action_feedback_sequence(make_engine, image):
    engine = make_engine(latency=0.2)
    feedback = []
    response = engine.handle_action(ExecuteTaskRequest("<OD>", image=image), feedback.append)
    assert response.success
    assert [fb.stage for fb in feedback] == list(FeedbackStage)
    elapsed = [fb.elapsed for fb in feedback]
    assert elapsed == sorted(elapsed)
    assert elapsed[-1] == pytest.approx(0.2)


def test_action_rejection_stops_after_preprocessing(make_engine):
    feedback = []
    response = make_engine().handle_action(ExecuteTaskRequest("<OD>", use_latest_image=True),
                                           feedback.append)
    assert response.error_message.startswith("NO_IMAGE_AVAILABLE")
    assert [fb.stage for fb in feedback] == [FeedbackStage.RECEIVED, FeedbackStage.PREPROCESSING]


def test_cancel_before_start(make_engine, image):
    engine = make_engine()
    outputs = _collect(engine)
    token = CancellationToken()
    token.set()
    feedback = []
    response = engine.handle_action(ExecuteTaskRequest("<OD>", image=image), feedback.append, token)
    assert response.canceled and not response.success
    assert response.error_message == "CANCELED"
    assert [fb.stage for fb in feedback] == [FeedbackStage.RECEIVED]
    assert engine.backend.calls == 0
    assert outputs == []


def test_cancel_during_inference_waits_for_generation(make_engine, image):
    clock = VirtualClock()
    engine = make_engine(latency=0.5, clock=clock)
    outputs = _collect(engine)
    token = CancellationToken()
    feedback = []

    def sink(fb):
        feedback.append(fb)
        if fb.stage == FeedbackStage.INFERENCE_RUNNING:
            clock.call_at(clock.monotonic() + 0.1, token.set)

    response = engine.handle_action(ExecuteTaskRequest("<OD>", image=image), sink, token)
    assert response.canceled
    assert response.error_message == "CANCELED"
    assert response.inference_time == pytest.approx(0.5)
    assert clock.monotonic() == pytest.approx(0.5)
    assert FeedbackStage.POSTPROCESSING not in [fb.stage for fb in feedback]
    assert outputs == []
    stats = engine.stats()
    assert stats.canceled == 1
    assert stats.failures == 0
    assert stats.jobs_served == 0


def test_cancel_after_completion_is_ignored(make_engine, image):
    engine = make_engine()
    token = CancellationToken()
    response = engine.handle_action(ExecuteTaskRequest("<OD>", image=image), None, token)
    token.set()
    assert response.success and not response.canceled


@pytest.mark.parametrize("seed", range(40))
def test_feedback_stays_ordered_under_random_cancels(make_engine, seed):
    rng = random.Random(seed)
    clock = VirtualClock()
    latency = rng.choice([0.01, 0.05, 0.2, 0.5])
    engine = make_engine(latency=latency, clock=clock)
    if rng.random() < 0.8:
        engine.on_image(make_image(seed=seed))
    token = CancellationToken()
    cancel_stage = rng.choice([None, *FeedbackStage])
    cancel_delay = rng.uniform(0.0, latency * 1.5)
    feedback = []

    def sink(fb):
        feedback.append(fb)
        if fb.stage == cancel_stage:
            clock.call_at(clock.monotonic() + cancel_delay, token.set)

    req = ExecuteTaskRequest(rng.choice(["<OD>", "<CAPTION>", "<OCR_WITH_REGION>"]),
                             use_latest_image=True)
    response = engine.handle_action(req, sink, token)

    stages = [fb.stage for fb in feedback]
    assert stages == list(FeedbackStage)[:len(stages)]
    elapsed = [fb.elapsed for fb in feedback]
    assert all(a <= b for a, b in zip(elapsed, elapsed[1:]))
    if response.canceled:
        assert FeedbackStage.POSTPROCESSING not in stages
    elif response.success:
        assert stages == list(FeedbackStage)


# -------------------------
# Continuous mode
# -------------------------

def test_continuous_publishes_every_idle_frame(make_engine):
    engine = make_engine(continuous_task="<OD>", latency=0.1)
    outputs = _collect(engine)
    for i in range(5):
        engine.on_image(make_image(seed=i, stamp=Stamp(100 + i, 0)))
        assert engine.process_next()
    assert [parse_result(o.results_json).stamp.sec for o in outputs] == [100, 101, 102, 103, 104]
    assert all(o.mode == InteractionMode.CONTINUOUS for o in outputs)
    assert all(o.annotated_image is not None for o in outputs)
    assert engine.stats().continuous_jobs == 5


def test_continuous_drops_frames_while_busy(make_engine):
    engine = make_engine(continuous_task="<OD>")
    outputs = _collect(engine)
    first = make_image(seed=1, stamp=Stamp(1, 0))
    second = make_image(seed=2, stamp=Stamp(2, 0))
    engine.on_image(first)
    engine.on_image(second)
    assert engine.stats().frames_dropped == 1
    assert engine.cache.snapshot().image is second
    engine.process_next()
    assert not engine.process_next()
    assert len(outputs) == 1
    assert outputs[0].source_image is first


def test_continuous_disabled_only_caches(make_engine, image):
    engine = make_engine()
    engine.on_image(image)
    assert engine.cache.populated
    assert not engine.process_next()
    assert engine.stats().frames_dropped == 0


def test_malformed_frame_is_counted_not_cached(make_engine):
    engine = make_engine(continuous_task="<OD>")
    engine.on_image(RasterImage(4, 4, "rgb8", bytes(3)))
    stats = engine.stats()
    assert (stats.frames_received, stats.frames_malformed) == (1, 1)
    assert not engine.cache.populated
    assert not engine.process_next()


def test_annotated_image_can_be_disabled(make_engine, image):
    engine = make_engine(continuous_task="<OD>", publish_annotated=False)
    outputs = _collect(engine)
    engine.on_image(image)
    engine.process_next()
    assert outputs[0].detections is not None
    assert outputs[0].annotated_image is None


def test_continuous_text_task(make_engine, image):
    engine = make_engine(continuous_task="<OPEN_VOCABULARY_DETECTION>", text_input="person")
    outputs = _collect(engine)
    engine.on_image(image)
    engine.process_next()
    assert parse_result(outputs[0].results_json).task == "<OPEN_VOCABULARY_DETECTION>"


def test_on_demand_runs_before_pending_tick(make_engine, image):
    engine = make_engine(continuous_task="<OD>")
    outputs = _collect(engine)
    engine.on_image(image)
    response = engine.handle_service(ExecuteTaskRequest("<CAPTION>", image=image))
    assert response.success
    assert [o.mode for o in outputs] == [InteractionMode.SERVICE]
    engine.process_next()
    assert [o.mode for o in outputs] == [InteractionMode.SERVICE, InteractionMode.CONTINUOUS]


# -------------------------
# Cross-mode behaviour
# -------------------------

def test_modes_produce_identical_documents(make_engine, image):
    engine = make_engine(continuous_task="<OD>")
    outputs = _collect(engine)
    engine.on_image(image)
    engine.process_next()
    documents = [
        outputs[0].results_json,
        engine.handle_service(ExecuteTaskRequest("<OD>", image=image)).results_json,
        engine.handle_action(ExecuteTaskRequest("<OD>", image=image)).results_json,
        engine.handle_service(ExecuteTaskRequest("<OD>", use_latest_image=True)).results_json,
    ]
    parsed = [parse_result(s) for s in documents]
    assert {(d.task, d.model, d.stamp, repr(d.output)) for d in parsed} == {
        (parsed[0].task, parsed[0].model, parsed[0].stamp, repr(parsed[0].output))}
    assert all(d.inference_time_s == pytest.approx(0.1) for d in parsed)


def test_service_results_are_published(make_engine, image):
    engine = make_engine()
    outputs = _collect(engine)
    response = engine.handle_service(ExecuteTaskRequest("<OD>", image=image))
    assert len(outputs) == 1
    assert outputs[0].results_json == response.results_json
    assert outputs[0].mode == InteractionMode.SERVICE


def test_stats_counts(make_engine, image):
    engine = make_engine(continuous_task="<OD>")
    engine.on_image(image)
    engine.process_next()
    engine.handle_service(ExecuteTaskRequest("<OD>", image=image))
    engine.handle_action(ExecuteTaskRequest("<OD>", image=image))
    engine.handle_service(ExecuteTaskRequest("<NOPE>", image=image))
    stats = engine.stats()
    assert stats.jobs_served == 3
    assert (stats.continuous_jobs, stats.service_jobs, stats.action_jobs) == (1, 1, 1)
    assert stats.failures == 1
    assert stats.to_dict()["frames_received"] == 1


def test_stats_returns_a_copy(make_engine):
    engine = make_engine()
    snapshot = engine.stats()
    snapshot.failures = 99
    assert engine.stats().failures == 0


# -------------------------
# Worker thread
# -------------------------

def _threaded_engine(make_engine, latency, **kwargs):
    engine = make_engine(latency=latency, clock=MonotonicClock(), **kwargs)
    engine.start()
    return engine


def test_worker_serves_continuous_frames(make_engine):
    engine = _threaded_engine(make_engine, 0.01, continuous_task="<OD>")
    outputs = _collect(engine)
    try:
        for i in range(3):
            engine.on_image(make_image(seed=i))
            _wait_for(lambda: len(outputs) == i + 1)
    finally:
        engine.stop()
    assert not engine.is_running
    assert engine.stats().continuous_jobs == 3


def test_busy_when_queue_full(make_engine, image):
    engine = _threaded_engine(make_engine, 0.3, queue_depth=1)
    results = {}

    def call(name):
        results[name] = engine.handle_service(ExecuteTaskRequest("<OD>", image=image))

    running = threading.Thread(target=call, args=("running",))
    queued = threading.Thread(target=call, args=("queued",))
    try:
        running.start()
        _wait_for(lambda: engine.backend.calls == 1)
        queued.start()
        _wait_for(lambda: engine.queued == 1)
        rejected = engine.handle_service(ExecuteTaskRequest("<OD>", image=image))
        running.join()
        queued.join()
    finally:
        engine.stop()
    assert rejected.error_message.startswith("BUSY")
    assert results["running"].success and results["queued"].success
    assert engine.stats().rejected_busy == 1


def test_stop_fails_waiting_jobs(make_engine, image):
    engine = _threaded_engine(make_engine, 0.3)
    results = {}

    def call(name):
        results[name] = engine.handle_service(ExecuteTaskRequest("<OD>", image=image))

    running = threading.Thread(target=call, args=("running",))
    waiting = threading.Thread(target=call, args=("waiting",))
    running.start()
    _wait_for(lambda: engine.backend.calls == 1)
    waiting.start()
    _wait_for(lambda: engine.queued == 1)
    engine.stop()
    running.join()
    waiting.join()
    assert results["running"].success
    assert results["waiting"].error_message == "INFERENCE_FAILURE: engine stopped"


def test_inference_never_overlaps(make_engine, image):
    engine = _threaded_engine(make_engine, 0.02, continuous_task="<OD>")
    threads = [threading.Thread(target=engine.handle_service,
                                args=(ExecuteTaskRequest("<OD>", image=image),)) for _ in range(4)]
    try:
        for t in threads:
            t.start()
        for i in range(10):
            engine.on_image(make_image(seed=i))
            time.sleep(0.005)
        for t in threads:
            t.join()
    finally:
        engine.stop()
    assert isinstance(engine.backend, MockBackend)
    assert engine.backend.guard.max_concurrency == 1
    assert engine.stats().service_jobs == 4


def test_unstarted_engine_serves_concurrent_callers_in_turn(make_engine, image):
    engine = make_engine(latency=0.002, clock=MonotonicClock())
    responses = []
    lock = threading.Lock()

    def caller():
        for _ in range(25):
            response = engine.handle_service(ExecuteTaskRequest("<OD>", image=image))
            with lock:
                responses.append(response)

    threads = [threading.Thread(target=caller) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not engine.is_running
    assert [r.error_message for r in responses if not r.success] == []
    assert len(responses) == 100
    assert engine.backend.guard.max_concurrency == 1
    assert engine.stats().service_jobs == 100
