"""
Middleware-independent execution engine.

Implements the three interaction modes (continuous, service, action) on top
of a single inference lane: one worker thread pulls jobs, on-demand work
always goes before continuous ticks, and continuous frames that arrive while
the lane is busy are dropped rather than queued.
"""

import logging
import threading
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

from .clock import Clock, MonotonicClock
from .contract import (
    ActionFeedback,
    ExecuteTaskRequest,
    ExecuteTaskResponse,
    FeedbackStage,
    RasterImage,
    Stamp,
    serialize_result,
    validate_request,
)
from .errors import ConfigError, ErrorCode, Florence2Error, ValidationError, error_message
from .inference_backend import Backend, BackendConfig
from .result_mapping import (
    AnnotationStyle,
    DetectionSet,
    render_annotations,
    to_detections,
    to_result_document,
)
from .task_registry import OutputKind, TaskRegistry, TaskSpec, build_prompt

logger = logging.getLogger(__name__)


class InteractionMode(str, Enum):
    CONTINUOUS = "continuous"
    SERVICE = "service"
    ACTION = "action"


class DropPolicy(str, Enum):
    LATEST_WINS = "LATEST_WINS"


@dataclass(frozen=True)
class NodeConfig:
    image_topic: str = "/camera/image_raw"
    backend: BackendConfig = field(default_factory=BackendConfig)
    continuous_task: Optional[str] = None
    continuous_text_input: str = ""
    publish_annotated: bool = True
    continuous_drop_policy: DropPolicy = DropPolicy.LATEST_WINS
    queue_depth: int = 8
    annotation: AnnotationStyle = field(default_factory=AnnotationStyle)

    def validate(self, registry: TaskRegistry) -> None:
        if self.queue_depth < 1:
            raise ConfigError(f"queue_depth must be >= 1, got {self.queue_depth}")
        if not self.continuous_task:
            return
        spec = registry.lookup(self.continuous_task)
        if spec is None:
            raise ConfigError(f"continuous_task {self.continuous_task} is not a registered task")
        if spec.requires_text_input and not self.continuous_text_input:
            raise ConfigError(
                f"continuous_task {spec.token} needs text input; set continuous_text_input"
            )


# -------------------------
# Latest-image cache and cancellation
# -------------------------

@dataclass(frozen=True)
class CacheSnapshot:
    image: Optional[RasterImage]
    stamp: Optional[Stamp]
    seq: int


class LatestImageCache:
    """Single writer, many readers; reads return a consistent snapshot."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snapshot = CacheSnapshot(None, None, 0)

    def store(self, image: RasterImage) -> int:
        with self._lock:
            seq = self._snapshot.seq + 1
            self._snapshot = CacheSnapshot(image, image.stamp, seq)
            return seq

    def snapshot(self) -> CacheSnapshot:
        with self._lock:
            return self._snapshot

    @property
    def populated(self) -> bool:
        return self.snapshot().image is not None


class CancellationToken:
    """Set-once flag, observed only at stage boundaries."""

    def __init__(self):
        self._event = threading.Event()

    def set(self) -> None:
        self._event.set()

    @property
    def requested(self) -> bool:
        return self._event.is_set()


class FeedbackEmitter:
    """Emits each stage at most once, in order, with non-decreasing elapsed time."""

    def __init__(self, sink: Optional[Callable[[ActionFeedback], None]], clock: Clock):
        self._sink = sink
        self._clock = clock
        self._started = clock.monotonic()
        self._last_stage: Optional[FeedbackStage] = None
        self._last_elapsed = 0.0
        self.emitted: list[ActionFeedback] = []

    @property
    def elapsed(self) -> float:
        return max(self._last_elapsed, self._clock.monotonic() - self._started)

    def emit(self, stage: FeedbackStage) -> None:
        if self._last_stage is not None and stage <= self._last_stage:
            raise ValueError(f"feedback stage {stage.name} after {self._last_stage.name}")
        self._last_elapsed = self.elapsed
        self._last_stage = stage
        feedback = ActionFeedback(stage, self._last_elapsed)
        self.emitted.append(feedback)
        if self._sink is None:
            return
        try:
            self._sink(feedback)
        except Exception as e:
            logger.warning(f"Feedback sink failed at {stage.name}: {e}")


# -------------------------
# Jobs and scheduling
# -------------------------

@dataclass
class EngineStats:
    frames_received: int = 0
    frames_dropped: int = 0
    frames_malformed: int = 0
    jobs_served: int = 0
    continuous_jobs: int = 0
    service_jobs: int = 0
    action_jobs: int = 0
    failures: int = 0
    canceled: int = 0
    rejected_busy: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PublishedOutputs:
    """Everything one finished job hands to the output topics."""

    mode: InteractionMode
    results_json: str
    detections: Optional[DetectionSet]
    annotated_image: Optional[RasterImage]
    source_image: RasterImage
    finished_at: float


@dataclass
class Job:
    mode: InteractionMode
    spec: TaskSpec
    prompt: str
    image: RasterImage
    stamp: Stamp
    cancel: Optional[CancellationToken] = None
    feedback: Optional[FeedbackEmitter] = None
    future: Future = field(default_factory=Future)


def priority_schedule(pending: Sequence[Job], continuous: Optional[Job]) -> Optional[Job]:
    """On-demand jobs first, oldest first; the continuous tick only when none wait."""
    if pending:
        return pending[0]
    return continuous


class InferenceEngine:
    """
    Owns the cache, the on-demand queue, the continuous slot and the worker.

    start() runs jobs on a background worker. An engine that was never
    started runs jobs on the calling thread, which is how the virtual-clock
    tests and the deterministic bench drive it. Concurrent callers then take
    turns on the lane.
    """

    def __init__(self, config: NodeConfig, registry: TaskRegistry, backend: Backend,
                 clock: Optional[Clock] = None):
        config.validate(registry)
        self.config = config
        self.registry = registry
        self.backend = backend
        self.clock = clock or MonotonicClock()
        self.cache = LatestImageCache()

        self._continuous_spec = registry.lookup(config.continuous_task) if config.continuous_task else None
        self._cond = threading.Condition()
        # one job on the backend at a time, whichever thread drains the queue
        self._lane = threading.Lock()
        self._pending: deque = deque()
        self._continuous: Optional[Job] = None
        self._running_job: Optional[Job] = None
        self._stats = EngineStats()
        self._listeners: list = []
        self._worker: Optional[threading.Thread] = None
        self._running = False

    # ---- lifecycle ----

    def start(self) -> None:
        if self._running:
            return
        self._running = True
        self._worker = threading.Thread(target=self._serve, name="florence2-inference", daemon=True)
        self._worker.start()
        task = self._continuous_spec.token if self._continuous_spec else "none"
        logger.info(f"Inference engine started (model {self.backend.model_label}, continuous task {task})")

    def _serve(self) -> None:
        while self._running:
            self.process_next(timeout=0.1)

    def stop(self) -> None:
        if not self._running:
            return
        self._running = False
        with self._cond:
            self._cond.notify_all()
        if self._worker is not None:
            self._worker.join(timeout=5.0)
            self._worker = None
        with self._cond:
            leftovers = list(self._pending)
            if self._continuous is not None:
                leftovers.append(self._continuous)
            self._pending.clear()
            self._continuous = None
        for job in leftovers:
            job.future.set_result(ExecuteTaskResponse.failure(
                f"{ErrorCode.INFERENCE_FAILURE.value}: engine stopped"))
        logger.info("Inference engine stopped")

    @property
    def is_running(self) -> bool:
        return self._running

    def add_output_listener(self, listener: Callable[[PublishedOutputs], None]) -> None:
        self._listeners.append(listener)

    def stats(self) -> EngineStats:
        with self._cond:
            return replace(self._stats)

    @property
    def lane_busy(self) -> bool:
        with self._cond:
            return self._lane_busy_locked()

    @property
    def queued(self) -> int:
        """On-demand jobs waiting for the lane."""
        with self._cond:
            return len(self._pending)

    def _lane_busy_locked(self) -> bool:
        return self._running_job is not None or self._continuous is not None or bool(self._pending)

    # ---- continuous mode ----

    def on_image(self, image: RasterImage) -> None:
        with self._cond:
            self._stats.frames_received += 1
        try:
            image.validate()
        except Florence2Error as e:
            with self._cond:
                self._stats.frames_malformed += 1
            logger.warning(f"Dropping malformed frame: {e.describe()}")
            return

        self.cache.store(image)
        spec = self._continuous_spec
        if spec is None:
            return

        with self._cond:
            if self._lane_busy_locked():
                self._stats.frames_dropped += 1
                logger.debug("Lane busy, frame dropped")
                return
            self._continuous = Job(
                mode=InteractionMode.CONTINUOUS,
                spec=spec,
                prompt=build_prompt(spec, self.config.continuous_text_input),
                image=image,
                stamp=self._stamp_for(image),
            )
            self._cond.notify()

    # ---- on-demand modes ----

    def handle_service(self, req: ExecuteTaskRequest) -> ExecuteTaskResponse:
        """Synchronous request/response. Never raises."""
        try:
            job = self._prepare(req, InteractionMode.SERVICE)
            return self._run_on_demand(job)
        except Florence2Error as e:
            self._count_failure(InteractionMode.SERVICE)
            return ExecuteTaskResponse.failure(e.describe())
        except Exception as e:
            logger.exception("Service request failed")
            self._count_failure(InteractionMode.SERVICE)
            return ExecuteTaskResponse.failure(error_message(e))

    def handle_action(self, goal: ExecuteTaskRequest,
                      feedback_sink: Optional[Callable[[ActionFeedback], None]] = None,
                      cancel: Optional[CancellationToken] = None) -> ExecuteTaskResponse:
        """
        Asynchronous-style execution with staged feedback. Cancellation is
        honoured before PREPROCESSING, before INFERENCE_RUNNING and after
        generation returns; generation itself is never interrupted.
        """
        cancel = cancel or CancellationToken()
        feedback = FeedbackEmitter(feedback_sink, self.clock)
        feedback.emit(FeedbackStage.RECEIVED)
        try:
            if cancel.requested:
                return self._canceled(InteractionMode.ACTION, 0.0)
            feedback.emit(FeedbackStage.PREPROCESSING)
            job = self._prepare(goal, InteractionMode.ACTION, cancel=cancel, feedback=feedback)
            return self._run_on_demand(job)
        except Florence2Error as e:
            self._count_failure(InteractionMode.ACTION)
            return ExecuteTaskResponse.failure(e.describe())
        except Exception as e:
            logger.exception("Action goal failed")
            self._count_failure(InteractionMode.ACTION)
            return ExecuteTaskResponse.failure(error_message(e))

    def _prepare(self, req: ExecuteTaskRequest, mode: InteractionMode,
                 cancel: Optional[CancellationToken] = None,
                 feedback: Optional[FeedbackEmitter] = None) -> Job:
        snapshot = self.cache.snapshot()
        verdict = validate_request(req, self.registry, snapshot.image is not None)
        if not verdict.ok:
            raise ValidationError(ErrorCode(verdict.reason.value))

        spec = self.registry.lookup(req.task_token)
        image = req.image if req.image is not None else snapshot.image
        image.validate()
        return Job(
            mode=mode,
            spec=spec,
            prompt=build_prompt(spec, req.text_input),
            image=image,
            stamp=self._stamp_for(image),
            cancel=cancel,
            feedback=feedback,
        )

    def _run_on_demand(self, job: Job) -> ExecuteTaskResponse:
        with self._cond:
            if len(self._pending) >= self.config.queue_depth:
                self._stats.rejected_busy += 1
                raise Florence2Error(
                    ErrorCode.BUSY, f"{len(self._pending)} requests already queued"
                )
            self._pending.append(job)
            self._cond.notify()

        if self._worker is None:
            while not job.future.done():
                self.process_next()
        return job.future.result()

    # ---- the inference lane ----

    def process_next(self, timeout: float = 0.0) -> bool:
        """Run at most one job. Returns False if nothing was waiting."""
        with self._lane:
            return self._process_next_locked(timeout)

    def _process_next_locked(self, timeout: float) -> bool:
        with self._cond:
            job = priority_schedule(self._pending, self._continuous)
            if job is None and timeout > 0:
                self._cond.wait(timeout)
                job = priority_schedule(self._pending, self._continuous)
            if job is None:
                return False
            if self._pending and job is self._pending[0]:
                self._pending.popleft()
            else:
                self._continuous = None
            self._running_job = job

        try:
            response = self._execute(job)
        except Exception as e:
            logger.exception(f"Unexpected failure running {job.spec.token}")
            response = ExecuteTaskResponse.failure(error_message(e))
        finally:
            with self._cond:
                self._running_job = None

        if not response.success and not response.canceled:
            self._count_failure(job.mode)
        job.future.set_result(response)
        return True

    def _execute(self, job: Job) -> ExecuteTaskResponse:
        if job.cancel is not None and job.cancel.requested:
            return self._canceled(job.mode, 0.0)
        if job.feedback is not None:
            job.feedback.emit(FeedbackStage.INFERENCE_RUNNING)

        try:
            result = self.backend.infer(job.prompt, job.image, job.spec)
        except Florence2Error as e:
            logger.error(f"{job.mode.value} {job.spec.token} failed: {e.describe()}")
            return ExecuteTaskResponse.failure(e.describe())

        if job.cancel is not None and job.cancel.requested:
            return self._canceled(job.mode, result.inference_time)
        if job.feedback is not None:
            job.feedback.emit(FeedbackStage.POSTPROCESSING)

        try:
            doc = to_result_document(job.spec, result, job.stamp, self.backend.model_label)
            results_json = serialize_result(doc)
            detections = None
            annotated = None
            if job.spec.output_kind == OutputKind.BOXES_LABELS:
                detections = to_detections(doc)
                if self.config.publish_annotated:
                    annotated = render_annotations(job.image, detections, self.config.annotation)
        except Florence2Error as e:
            logger.error(f"Could not map {job.spec.token} output: {e.describe()}")
            return ExecuteTaskResponse.failure(e.describe(), inference_time=result.inference_time)

        self._count_served(job.mode)
        self._publish(PublishedOutputs(
            mode=job.mode,
            results_json=results_json,
            detections=detections,
            annotated_image=annotated,
            source_image=job.image,
            finished_at=self.clock.monotonic(),
        ))
        return ExecuteTaskResponse(
            success=True,
            results_json=results_json,
            detections=detections,
            inference_time=result.inference_time,
        )

    # ---- helpers ----

    def _stamp_for(self, image: RasterImage) -> Stamp:
        if image.stamp is not None:
            return image.stamp
        return Stamp.from_seconds(self.clock.wall_time())

    def _publish(self, outputs: PublishedOutputs) -> None:
        for listener in list(self._listeners):
            try:
                listener(outputs)
            except Exception as e:
                logger.error(f"Output listener failed: {e}")

    def _canceled(self, mode: InteractionMode, inference_time: float) -> ExecuteTaskResponse:
        with self._cond:
            self._stats.canceled += 1
        logger.info(f"{mode.value} job canceled")
        return ExecuteTaskResponse.failure(
            ErrorCode.CANCELED.value, inference_time=inference_time, canceled=True
        )

    def _count_served(self, mode: InteractionMode) -> None:
        with self._cond:
            self._stats.jobs_served += 1
            if mode == InteractionMode.CONTINUOUS:
                self._stats.continuous_jobs += 1
            elif mode == InteractionMode.SERVICE:
                self._stats.service_jobs += 1
            else:
                self._stats.action_jobs += 1

    def _count_failure(self, mode: InteractionMode) -> None:
        with self._cond:
            self._stats.failures += 1
