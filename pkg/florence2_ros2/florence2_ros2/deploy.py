"""
Deployment profiles and the mock-backend smoke test.

Every profile (native install, CPU container, GPU container) runs the same
checks: one service call, one action with feedback, 50 continuous frames, and
the six primary graph endpoints. GPU checks run only for the GPU profile and
are reported as skipped when no GPU is visible.

Usage:
    florence2_smoke --profile native
"""

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .clock import Clock, MonotonicClock, VirtualClock
from .contract import ExecuteTaskRequest, FeedbackStage, RasterImage, parse_result
from .inference_backend import (
    BackendConfig,
    DevicePolicy,
    HardwareProbe,
    StaticProbe,
    TorchProbe,
    load_backend,
)
from .node_core import InferenceEngine, NodeConfig
from .task_registry import TaskRegistry, default_registry
from .version import DEFAULT_MODEL_REVISION, __version__

logger = logging.getLogger(__name__)

PROFILE_ENV = "FLORENCE2_PROFILE"
SMOKE_FRAMES = 50
SMOKE_LATENCY_S = 0.05
DISCOVERY_TIMEOUT_S = 10.0


class Variant(str, Enum):
    NATIVE = "native"
    CONTAINER_CPU = "container_cpu"
    CONTAINER_GPU = "container_gpu"


# Kept in step with docker/Dockerfile.cpu and docker/Dockerfile.gpu
PINNED_RUNTIME = {
    "ubuntu": "24.04",
    "ros_distro": "jazzy",
    "python": "3.12",
    "torch": "2.5.1",
    "transformers": "4.46.3",
}
PINNED_CUDA = "12.4"


@dataclass(frozen=True)
class DeployProfile:
    variant: Variant
    model_revision: str = DEFAULT_MODEL_REVISION
    runtime: dict = field(default_factory=lambda: dict(PINNED_RUNTIME))

    @classmethod
    def for_variant(cls, variant: Variant) -> "DeployProfile":
        runtime = dict(PINNED_RUNTIME)
        if variant == Variant.CONTAINER_GPU:
            runtime["cuda"] = PINNED_CUDA
        return cls(variant=variant, runtime=runtime)

    @property
    def wants_gpu(self) -> bool:
        return self.variant == Variant.CONTAINER_GPU


class CheckStatus(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    SKIPPED = "SKIPPED"


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: CheckStatus
    detail: str = ""


@dataclass
class SmokeReport:
    profile: DeployProfile
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.status != CheckStatus.FAIL for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if c.status == CheckStatus.FAIL]

    def vector(self, include_gpu: bool = False) -> tuple:
        """(name, status) pairs, comparable across profiles."""
        return tuple((c.name, c.status.value) for c in self.checks
                     if include_gpu or not c.name.startswith("gpu_"))

    def lines(self) -> list[str]:
        out = [f"profile: {self.profile.variant.value} (florence2_ros2 {__version__}, "
               f"model revision {self.profile.model_revision})"]
        out += [f"{c.status.value:<7} {c.name}" + (f": {c.detail}" if c.detail else "")
                for c in self.checks]
        out.append("result: " + ("PASS" if self.passed else "FAIL"))
        return out


def _fixture_image(width: int = 64, height: int = 48) -> RasterImage:
    rng = np.random.default_rng(7)
    return RasterImage.from_array(rng.integers(0, 256, (height, width, 3), dtype=np.uint8),
                                  frame_id="smoke_camera")


def _mock_engine(registry: TaskRegistry, continuous_task: Optional[str] = None,
                 device: str = "cpu", probe: Optional[HardwareProbe] = None,
                 latency_s: float = SMOKE_LATENCY_S, clock: Optional[Clock] = None) -> InferenceEngine:
    clock = clock or VirtualClock()
    backend_config = BackendConfig(model_id="mock", device_policy=DevicePolicy.parse(device),
                                   mock_latency_s=latency_s)
    backend = load_backend(backend_config, probe or StaticProbe(), clock)
    config = NodeConfig(backend=backend_config, continuous_task=continuous_task)
    return InferenceEngine(config, registry, backend, clock)


class _Skip(Exception):
    pass


def _run_check(name: str, check: Callable[[], Optional[str]]) -> CheckResult:
    """check returns a detail string; AssertionError fails it, _Skip skips it."""
    try:
        detail = check() or ""
    except _Skip as e:
        return CheckResult(name, CheckStatus.SKIPPED, str(e))
    except AssertionError as e:
        return CheckResult(name, CheckStatus.FAIL, str(e) or "assertion failed")
    except Exception as e:
        logger.exception(f"Smoke check {name} crashed")
        return CheckResult(name, CheckStatus.FAIL, f"{type(e).__name__}: {e}")
    return CheckResult(name, CheckStatus.PASS, detail)


# -------------------------
# Checks
# -------------------------

def check_service_call(registry: TaskRegistry) -> str:
    engine = _mock_engine(registry)
    response = engine.handle_service(ExecuteTaskRequest("<CAPTION>", image=_fixture_image()))
    assert response.success, response.error_message
    doc = parse_result(response.results_json)
    assert "text" in doc.output, f"unexpected output {doc.output}"
    return f"{doc.task} -> {doc.output['text']!r}"


def check_action_feedback(registry: TaskRegistry) -> str:
    engine = _mock_engine(registry)
    stages = []
    response = engine.handle_action(ExecuteTaskRequest("<OD>", image=_fixture_image()),
                                    lambda fb: stages.append(fb.stage))
    assert response.success, response.error_message
    assert stages == list(FeedbackStage), f"feedback stages {[s.name for s in stages]}"
    assert response.detections is not None and len(response.detections) > 0, "no detections"
    return f"{len(stages)} feedback stages, {len(response.detections)} detections"


def check_continuous_frames(registry: TaskRegistry) -> str:
    engine = _mock_engine(registry, continuous_task="<OD>")
    outputs = []
    engine.add_output_listener(outputs.append)
    image = _fixture_image()
    clock = engine.clock
    for i in range(SMOKE_FRAMES):
        clock.advance_to(i * SMOKE_LATENCY_S)
        engine.on_image(image)
        while engine.process_next():
            pass
    stats = engine.stats()
    assert stats.frames_received == SMOKE_FRAMES, f"received {stats.frames_received}"
    assert len(outputs) == SMOKE_FRAMES - stats.frames_dropped, (
        f"{len(outputs)} outputs for {SMOKE_FRAMES} frames with {stats.frames_dropped} dropped")
    assert outputs, "no continuous outputs"
    return f"{len(outputs)} outputs, {stats.frames_dropped} dropped"


def check_endpoints(registry: TaskRegistry) -> str:
    try:
        import rclpy
        from rclpy.executors import MultiThreadedExecutor
    except ImportError:
        raise _Skip("rclpy not importable; graph endpoints not checked")

    from .ros2_adapter import bind, check_interfaces, executor_threads

    rclpy.init()
    try:
        engine = _mock_engine(registry, clock=MonotonicClock())
        node = bind(engine, engine.config, registry)
        probe_node = rclpy.create_node("florence2_smoke_probe")
        executor = MultiThreadedExecutor(num_threads=executor_threads(engine.config.queue_depth))
        executor.add_node(node)
        executor.add_node(probe_node)
        engine.start()
        try:
            deadline = time.monotonic() + DISCOVERY_TIMEOUT_S
            live = {}
            while time.monotonic() < deadline:
                executor.spin_once(timeout_sec=0.1)
                live = check_interfaces(probe_node, node.get_fully_qualified_name())
                if all(live.values()):
                    break
            missing = sorted(name for name, ok in live.items() if not ok)
            assert not missing, f"missing endpoints: {', '.join(missing)}"
        finally:
            engine.stop()
            node.destroy_node()
            probe_node.destroy_node()
        return f"{len(live)} endpoints live"
    finally:
        rclpy.try_shutdown()


def check_gpu_visible(probe: HardwareProbe) -> str:
    count = probe.gpu_count()
    if count == 0:
        raise _Skip("no GPU visible")
    return ", ".join(probe.device_name(i) for i in range(count))


def check_gpu_inference(registry: TaskRegistry, probe: HardwareProbe) -> str:
    if probe.gpu_count() == 0:
        raise _Skip("no GPU visible")
    engine = _mock_engine(registry, device="gpu", probe=probe)
    response = engine.handle_service(ExecuteTaskRequest("<OD>", image=_fixture_image()))
    assert response.success, response.error_message
    return engine.backend.device.describe()


def smoke_test(profile: DeployProfile, registry: Optional[TaskRegistry] = None,
               probe: Optional[HardwareProbe] = None, check_graph: bool = True) -> SmokeReport:
    """Run every check for the profile against the mock backend."""
    registry = registry or default_registry()
    report = SmokeReport(profile)
    report.checks.append(_run_check("service_call", lambda: check_service_call(registry)))
    report.checks.append(_run_check("action_feedback", lambda: check_action_feedback(registry)))
    report.checks.append(_run_check("continuous_frames", lambda: check_continuous_frames(registry)))
    if check_graph:
        report.checks.append(_run_check("graph_endpoints", lambda: check_endpoints(registry)))
    if profile.wants_gpu:
        probe = probe or TorchProbe()
        report.checks.append(_run_check("gpu_visible", lambda: check_gpu_visible(probe)))
        report.checks.append(_run_check("gpu_mock_inference", lambda: check_gpu_inference(registry, probe)))
    for check in report.failures:
        logger.error(f"Smoke check {check.name} failed: {check.detail}")
    return report


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO)
    parser = argparse.ArgumentParser(prog="florence2_smoke", description="Mock-backend smoke test.")
    parser.add_argument("--profile", choices=[v.value for v in Variant],
                        default=os.environ.get(PROFILE_ENV, Variant.NATIVE.value))
    parser.add_argument("--no-graph", action="store_true", help="skip the ROS graph endpoint check")
    args = parser.parse_args(argv)

    report = smoke_test(DeployProfile.for_variant(Variant(args.profile)), check_graph=not args.no_graph)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
