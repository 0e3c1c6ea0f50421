"""
Boundary between the engine and the ROS 2 graph.

Image conversion goes through cv_bridge. Request, detection and endpoint
bookkeeping work on any object with the standard message attributes, so they
can be tested without a ROS installation. The rclpy node itself lives in
ros2_node.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from types import SimpleNamespace
from typing import Any, Iterable, Optional

import numpy as np

from .contract import ExecuteTaskRequest, ExecuteTaskResponse, RasterImage, Stamp
from .errors import ConversionError, ErrorCode
from .result_mapping import Detection, DetectionSet

NODE_NAME = "florence2_node"

WIRE_CHANNELS = {"rgb8": 3, "bgr8": 3, "mono8": 1}


@dataclass(frozen=True)
class TopicBindings:
    input_image: str = "/camera/image_raw"
    results_json: str = "~/results_json"
    detections: str = "~/detections"
    annotated_image: str = "~/annotated_image"
    service: str = "~/execute_task"
    action: str = "~/execute_task_action"
    list_tasks: str = "~/list_tasks"
    stats: str = "~/stats"

    def resolve(self, name: str, node_fqn: str) -> str:
        if name.startswith("~/"):
            return f"{node_fqn.rstrip('/')}/{name[2:]}"
        return name

    def core_endpoints(self, node_fqn: str) -> dict:
        """The six primary endpoints as {field: (kind, resolved name)}."""
        return {
            "input_image": ("topic", self.resolve(self.input_image, node_fqn)),
            "results_json": ("topic", self.resolve(self.results_json, node_fqn)),
            "detections": ("topic", self.resolve(self.detections, node_fqn)),
            "annotated_image": ("topic", self.resolve(self.annotated_image, node_fqn)),
            "service": ("service", self.resolve(self.service, node_fqn)),
            "action": ("action", self.resolve(self.action, node_fqn)),
        }


# -------------------------
# Image conversion
# -------------------------

def _stamp_of(msg: Any) -> Optional[Stamp]:
    header = getattr(msg, "header", None)
    if header is None:
        return None
    stamp = header.stamp
    if stamp.sec == 0 and stamp.nanosec == 0:
        return None
    return Stamp(int(stamp.sec), int(stamp.nanosec))


def is_empty_image(msg: Any) -> bool:
    """A request image with zero width or height means "none supplied"."""
    return msg is None or msg.width == 0 or msg.height == 0


@lru_cache(maxsize=1)
def _bridge():
    from cv_bridge import CvBridge

    return CvBridge()


def _tight_rows(msg: Any, row: int, step: int) -> Any:
    """msg with row padding removed; cv_bridge only strips whole-pixel padding."""
    rows = np.frombuffer(bytes(msg.data), dtype=np.uint8)[:step * msg.height]
    return SimpleNamespace(
        header=msg.header, height=msg.height, width=msg.width, encoding=msg.encoding,
        is_bigendian=getattr(msg, "is_bigendian", 0), step=row,
        data=rows.reshape(msg.height, step)[:, :row].tobytes(),
    )


def convert_image_in(msg: Any) -> RasterImage:
    """Wire image (rgb8, bgr8, mono8) -> RasterImage in rgb8/mono8 order."""
    from cv_bridge import CvBridgeError

    encoding = msg.encoding or ""
    channels = WIRE_CHANNELS.get(encoding)
    if channels is None:
        raise ConversionError(ErrorCode.UNSUPPORTED_ENCODING, encoding or "<empty>")

    height, width = int(msg.height), int(msg.width)
    if height <= 0 or width <= 0:
        raise ConversionError(ErrorCode.MALFORMED_IMAGE, f"empty image {width}x{height}")
    row = width * channels
    step = int(msg.step)
    if step < row or len(msg.data) < step * height:
        raise ConversionError(
            ErrorCode.MALFORMED_IMAGE,
            f"{len(msg.data)} bytes with step {step} cannot hold {width}x{height} {encoding}",
        )
    if step % channels:
        msg = _tight_rows(msg, row, step)

    target = "mono8" if channels == 1 else "rgb8"
    try:
        array = _bridge().imgmsg_to_cv2(msg, desired_encoding=target)
    except (CvBridgeError, TypeError, ValueError) as e:
        raise ConversionError(ErrorCode.MALFORMED_IMAGE, f"{encoding}: {e}") from e

    return RasterImage.from_array(
        array,
        stamp=_stamp_of(msg),
        frame_id=getattr(getattr(msg, "header", None), "frame_id", "") or "",
        source_encoding=encoding,
    )


def convert_image_out(image: RasterImage) -> Any:
    """RasterImage -> wire image, restoring the encoding it arrived in."""
    import cv2

    image.validate()
    array = image.to_array()
    encoding = image.encoding
    if image.source_encoding == "bgr8" and image.encoding == "rgb8":
        array = cv2.cvtColor(array, cv2.COLOR_RGB2BGR)
        encoding = "bgr8"

    msg = _bridge().cv2_to_imgmsg(np.ascontiguousarray(array), encoding=encoding)
    stamp = image.stamp or Stamp()
    msg.header.stamp.sec = stamp.sec
    msg.header.stamp.nanosec = stamp.nanosec
    msg.header.frame_id = image.frame_id
    return msg


# -------------------------
# Requests and detections
# -------------------------

def request_from_msg(msg: Any) -> ExecuteTaskRequest:
    """Service request or action goal -> ExecuteTaskRequest. May raise ConversionError."""
    image = None if is_empty_image(msg.image) else convert_image_in(msg.image)
    return ExecuteTaskRequest(
        task_token=msg.task_token,
        text_input=msg.text_input,
        image=image,
        use_latest_image=bool(msg.use_latest_image),
    )


def detections_to_msg(dets: DetectionSet, frame_id: str = "", array_type=None,
                      detection_type=None, hypothesis_type=None) -> Any:
    """DetectionSet -> Detection2DArray stamped with the source image time."""
    if array_type is None:
        from vision_msgs.msg import Detection2D, Detection2DArray, ObjectHypothesisWithPose

        array_type, detection_type, hypothesis_type = (
            Detection2DArray, Detection2D, ObjectHypothesisWithPose)

    msg = array_type()
    msg.header.stamp.sec = dets.source_stamp.sec
    msg.header.stamp.nanosec = dets.source_stamp.nanosec
    msg.header.frame_id = frame_id
    for det in dets.detections:
        item = detection_type()
        item.header.stamp.sec = dets.source_stamp.sec
        item.header.stamp.nanosec = dets.source_stamp.nanosec
        item.header.frame_id = frame_id
        item.bbox.center.position.x = float(det.center_x)
        item.bbox.center.position.y = float(det.center_y)
        item.bbox.size_x = float(det.size_x)
        item.bbox.size_y = float(det.size_y)
        hypothesis = hypothesis_type()
        hypothesis.hypothesis.class_id = det.label
        hypothesis.hypothesis.score = float(det.score)
        item.results.append(hypothesis)
        msg.detections.append(item)
    return msg


def detections_from_msg(msg: Any) -> DetectionSet:
    stamp = msg.header.stamp
    detections = []
    for item in msg.detections:
        label, score = "", 0.0
        if item.results:
            label = item.results[0].hypothesis.class_id
            score = item.results[0].hypothesis.score
        detections.append(Detection(
            center_x=item.bbox.center.position.x,
            center_y=item.bbox.center.position.y,
            size_x=item.bbox.size_x,
            size_y=item.bbox.size_y,
            label=label,
            score=score,
        ))
    return DetectionSet(detections=detections, source_stamp=Stamp(int(stamp.sec), int(stamp.nanosec)))


def response_from_msg(msg: Any, canceled: bool = False) -> ExecuteTaskResponse:
    """Service response or action result -> ExecuteTaskResponse."""
    detections = detections_from_msg(msg.detections) if msg.detections.detections else None
    return ExecuteTaskResponse(
        success=bool(msg.success),
        error_message=msg.error_message,
        results_json=msg.results_json,
        detections=detections,
        inference_time=float(msg.inference_time),
        canceled=canceled,
    )


# -------------------------
# Graph introspection
# -------------------------

def missing_endpoints(expected: dict, topics: Iterable[str], services: Iterable[str]) -> list:
    """Fields of `expected` (see TopicBindings.core_endpoints) absent from the graph."""
    topics, services = set(topics), set(services)
    missing = []
    for field_name, (kind, name) in expected.items():
        if kind == "topic":
            live = name in topics
        elif kind == "service":
            live = name in services
        else:
            live = f"{name}/_action/send_goal" in services
        if not live:
            missing.append(field_name)
    return missing


def check_interfaces(graph_node: Any, node_fqn: str = f"/{NODE_NAME}",
                     bindings: Optional[TopicBindings] = None) -> dict:
    """{endpoint field: live?} for the six primary endpoints, seen from graph_node."""
    bindings = bindings or TopicBindings()
    expected = bindings.core_endpoints(node_fqn)
    topics = [name for name, _ in graph_node.get_topic_names_and_types()]
    services = [name for name, _ in graph_node.get_service_names_and_types()]
    missing = set(missing_endpoints(expected, topics, services))
    return {field_name: field_name not in missing for field_name in expected}


# image subscription, action cancel, stats timer or list_tasks, plus the request on the lane
RESERVED_EXECUTOR_THREADS = 4


def executor_threads(queue_depth: int) -> int:
    """Executor size that leaves threads free while every queued request blocks."""
    return queue_depth + RESERVED_EXECUTOR_THREADS


def bind(engine, config, registry, publish_diagnostics: bool = True, node_name: str = NODE_NAME):
    """Attach a running engine to a new ROS 2 node. rclpy must be initialized."""
    from .ros2_node import Florence2Node

    return Florence2Node(engine=engine, config=config, registry=registry,
                         publish_diagnostics=publish_diagnostics, node_name=node_name)


def main(args=None) -> int:
    from .ros2_node import run

    logging.basicConfig(level=logging.INFO)
    return run(args)


if __name__ == "__main__":
    raise SystemExit(main())
