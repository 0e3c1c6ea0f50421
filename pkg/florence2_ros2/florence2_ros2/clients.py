"""
Example ExecuteTask clients.

Service mode prints the response; action mode prints every feedback stage as
it arrives, then the result. Output is line-oriented so runs against the mock
backend can be compared with golden files. Exit codes are distinct per
outcome (see ExitCode).

Usage:
    florence2_client service --task "<CAPTION>" --image photo.jpg
    florence2_client action --task "<OD>" --use-latest --cancel-after 0.2
    florence2_client service --task "<OD>" --image photo.jpg --in-process
"""

import argparse
import logging
import os
import sys
import threading
import time
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Optional, Protocol

from .contract import ActionFeedback, ExecuteTaskRequest, ExecuteTaskResponse, FeedbackStage, RasterImage
from .errors import ConfigError, ErrorCode, Florence2Error
from .node_core import CancellationToken, InferenceEngine

logger = logging.getLogger(__name__)

DEFAULT_NODE = "/florence2_node"


class ClientMode(str, Enum):
    SERVICE = "service"
    ACTION = "action"


class ExitCode(IntEnum):
    OK = 0
    ERROR = 1
    CANCELED = 2
    TIMEOUT = 3
    NODE_UNREACHABLE = 4


@dataclass(frozen=True)
class ClientInvocation:
    mode: ClientMode
    task_token: str
    text_input: str = ""
    image_path: Optional[str] = None
    timeout: float = 30.0
    cancel_after: Optional[float] = None
    use_latest_image: bool = False

    def __post_init__(self):
        if self.cancel_after is not None:
            if self.mode != ClientMode.ACTION:
                raise ConfigError("cancel_after is only valid in action mode")
            if self.cancel_after < 0:
                raise ConfigError("cancel_after must be >= 0")
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")


class Transport(Protocol):
    def call_service(self, req: ExecuteTaskRequest, timeout: float) -> ExecuteTaskResponse: ...

    def send_goal(self, req: ExecuteTaskRequest, on_feedback: Callable[[ActionFeedback], None],
                  cancel_after: Optional[float], timeout: float) -> ExecuteTaskResponse: ...


# -------------------------
# Transports
# -------------------------

class EngineTransport:
    """Talks to an InferenceEngine in the same process."""

    def __init__(self, engine: InferenceEngine):
        self.engine = engine

    def call_service(self, req: ExecuteTaskRequest, timeout: float) -> ExecuteTaskResponse:
        return self.engine.handle_service(req)

    def send_goal(self, req: ExecuteTaskRequest, on_feedback: Callable[[ActionFeedback], None],
                  cancel_after: Optional[float], timeout: float) -> ExecuteTaskResponse:
        token = CancellationToken()
        timer = None
        if cancel_after is not None:
            clock = self.engine.clock
            if cancel_after == 0:
                token.set()
            elif hasattr(clock, "call_at"):
                clock.call_at(clock.monotonic() + cancel_after, token.set)
            else:
                timer = threading.Timer(cancel_after, token.set)
                timer.start()
        try:
            return self.engine.handle_action(req, on_feedback, token)
        finally:
            if timer is not None:
                timer.cancel()


class RosTransport:
    """Talks to a running Florence-2 node over the ROS 2 graph."""

    def __init__(self, node_name: str = DEFAULT_NODE, discovery_timeout: float = 5.0):
        import rclpy
        from rclpy.action import ActionClient

        from florence2_interfaces.action import ExecuteTask as ExecuteTaskAction
        from florence2_interfaces.srv import ExecuteTask

        if not rclpy.ok():
            rclpy.init()
        self._rclpy = rclpy
        self._action_type = ExecuteTaskAction
        self._service_type = ExecuteTask
        self.node = rclpy.create_node("florence2_client")
        self.discovery_timeout = discovery_timeout
        base = node_name.rstrip("/")
        self._service = self.node.create_client(ExecuteTask, f"{base}/execute_task")
        self._action = ActionClient(self.node, ExecuteTaskAction, f"{base}/execute_task_action")

    def _fill(self, msg, req: ExecuteTaskRequest):
        from .ros2_adapter import convert_image_out

        msg.task_token = req.task_token
        msg.text_input = req.text_input
        msg.use_latest_image = req.use_latest_image
        if req.image is not None:
            msg.image = convert_image_out(req.image)
        return msg

    def _wait(self, future, timeout: float) -> None:
        self._rclpy.spin_until_future_complete(self.node, future, timeout_sec=timeout)
        if not future.done():
            raise Florence2Error(ErrorCode.TIMEOUT, f"no answer within {timeout:.1f}s")

    def call_service(self, req: ExecuteTaskRequest, timeout: float) -> ExecuteTaskResponse:
        from .ros2_adapter import response_from_msg

        if not self._service.wait_for_service(timeout_sec=min(timeout, self.discovery_timeout)):
            raise Florence2Error(ErrorCode.NODE_UNREACHABLE, self._service.srv_name)
        future = self._service.call_async(self._fill(self._service_type.Request(), req))
        self._wait(future, timeout)
        return response_from_msg(future.result())

    def send_goal(self, req: ExecuteTaskRequest, on_feedback: Callable[[ActionFeedback], None],
                  cancel_after: Optional[float], timeout: float) -> ExecuteTaskResponse:
        from action_msgs.msg import GoalStatus

        from .ros2_adapter import response_from_msg

        if not self._action.wait_for_server(timeout_sec=min(timeout, self.discovery_timeout)):
            raise Florence2Error(ErrorCode.NODE_UNREACHABLE, "execute_task_action")

        def feedback_callback(msg):
            on_feedback(ActionFeedback(FeedbackStage(msg.feedback.stage), msg.feedback.elapsed))

        started = time.monotonic()
        goal_future = self._action.send_goal_async(
            self._fill(self._action_type.Goal(), req), feedback_callback=feedback_callback)
        self._wait(goal_future, timeout)
        goal_handle = goal_future.result()
        if not goal_handle.accepted:
            return ExecuteTaskResponse.failure("goal rejected")

        result_future = goal_handle.get_result_async()
        cancel_sent = False
        while not result_future.done():
            elapsed = time.monotonic() - started
            if elapsed > timeout:
                raise Florence2Error(ErrorCode.TIMEOUT, f"no result within {timeout:.1f}s")
            if cancel_after is not None and not cancel_sent and elapsed >= cancel_after:
                goal_handle.cancel_goal_async()
                cancel_sent = True
            self._rclpy.spin_once(self.node, timeout_sec=0.02)

        wrapped = result_future.result()
        return response_from_msg(wrapped.result, canceled=wrapped.status == GoalStatus.STATUS_CANCELED)

    def close(self, shutdown: bool = True) -> None:
        self._action.destroy()
        self.node.destroy_node()
        if shutdown:
            self._rclpy.try_shutdown()


# -------------------------
# Report formatting
# -------------------------

def format_request(inv: ClientInvocation) -> str:
    source = os.path.basename(inv.image_path) if inv.image_path else "latest"
    line = f"request: mode={inv.mode.value} task={inv.task_token} image={source}"
    if inv.text_input:
        line += f" text={inv.text_input!r}"
    return line


def format_feedback(feedback: ActionFeedback) -> str:
    return f"feedback: {feedback.stage.name} elapsed={feedback.elapsed:.3f}"


def format_response(response: ExecuteTaskResponse) -> list[str]:
    if response.canceled:
        return [f"canceled: {response.error_message}"]
    if not response.success:
        return [f"error: {response.error_message}"]
    lines = [
        "success: true",
        f"inference_time: {response.inference_time:.3f}",
        f"results_json: {response.results_json}",
    ]
    if response.detections is not None:
        lines.append(f"detections: {len(response.detections)}")
        for i, det in enumerate(response.detections.detections):
            lines.append(
                f"  [{i}] {det.label} score={det.score:.2f} "
                f"center=({det.center_x:.1f}, {det.center_y:.1f}) "
                f"size=({det.size_x:.1f}, {det.size_y:.1f})"
            )
    return lines


def exit_code_for(response: ExecuteTaskResponse) -> ExitCode:
    if response.canceled:
        return ExitCode.CANCELED
    return ExitCode.OK if response.success else ExitCode.ERROR


# -------------------------
# Runner
# -------------------------

def run_client(inv: ClientInvocation, transport: Transport,
               out: Callable[[str], None] = print) -> ExitCode:
    out(format_request(inv))
    try:
        image = RasterImage.from_file(inv.image_path) if inv.image_path else None
    except (OSError, ValueError) as e:
        out(f"error: cannot read image {inv.image_path}: {e}")
        out(f"exit: {ExitCode.ERROR.name}")
        return ExitCode.ERROR

    req = ExecuteTaskRequest(
        task_token=inv.task_token,
        text_input=inv.text_input,
        image=image,
        use_latest_image=inv.use_latest_image or image is None,
    )
    try:
        if inv.mode == ClientMode.SERVICE:
            response = transport.call_service(req, inv.timeout)
        else:
            response = transport.send_goal(
                req, lambda fb: out(format_feedback(fb)), inv.cancel_after, inv.timeout)
    except Florence2Error as e:
        code = {
            ErrorCode.TIMEOUT: ExitCode.TIMEOUT,
            ErrorCode.NODE_UNREACHABLE: ExitCode.NODE_UNREACHABLE,
        }.get(e.code, ExitCode.ERROR)
        out(f"error: {e.describe()}")
        out(f"exit: {code.name}")
        return code

    for line in format_response(response):
        out(line)
    code = exit_code_for(response)
    out(f"exit: {code.name}")
    return code


def _in_process_transport(mock_latency_s: float) -> EngineTransport:
    from .inference_backend import BackendConfig, load_backend
    from .node_core import NodeConfig
    from .task_registry import default_registry

    backend_config = BackendConfig(model_id="mock", mock_latency_s=mock_latency_s)
    config = NodeConfig(backend=backend_config)
    engine = InferenceEngine(config, default_registry(), load_backend(backend_config))
    return EngineTransport(engine)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="florence2_client", description="Call a Florence-2 node.")
    parser.add_argument("mode", choices=[m.value for m in ClientMode])
    parser.add_argument("--task", required=True, help='task token, e.g. "<OD>"')
    parser.add_argument("--text", default="", help="text input for text-conditioned tasks")
    parser.add_argument("--image", help="PNG/JPEG file to send with the request")
    parser.add_argument("--use-latest", action="store_true", help="use the node's latest camera frame")
    parser.add_argument("--timeout", type=float, default=30.0)
    parser.add_argument("--cancel-after", type=float, help="seconds after sending the goal (action mode)")
    parser.add_argument("--node", default=DEFAULT_NODE, help="fully qualified node name")
    parser.add_argument("--in-process", action="store_true",
                        help="run against an in-process mock engine instead of a live node")
    parser.add_argument("--mock-latency", type=float, default=0.1)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    args = build_parser().parse_args(argv)
    try:
        inv = ClientInvocation(
            mode=ClientMode(args.mode),
            task_token=args.task,
            text_input=args.text,
            image_path=args.image,
            timeout=args.timeout,
            cancel_after=args.cancel_after,
            use_latest_image=args.use_latest,
        )
    except ConfigError as e:
        print(f"error: {e.describe()}", file=sys.stderr)
        return int(ExitCode.ERROR)

    if args.in_process:
        return int(run_client(inv, _in_process_transport(args.mock_latency)))

    try:
        transport = RosTransport(args.node)
    except ImportError as e:
        print(f"error: ROS 2 client libraries unavailable ({e}); try --in-process", file=sys.stderr)
        return int(ExitCode.NODE_UNREACHABLE)
    try:
        return int(run_client(inv, transport))
    finally:
        transport.close()


if __name__ == "__main__":
    sys.exit(main())
