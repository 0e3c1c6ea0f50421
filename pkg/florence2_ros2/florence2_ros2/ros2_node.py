"""
Florence-2 ROS 2 node.
Subscribes to the camera topic, exposes the ExecuteTask service and action,
and publishes results_json, detections and annotated_image. All behaviour is
delegated to InferenceEngine; this module only converts and forwards.
"""

import json
import logging
from typing import Optional

import rclpy
from rclpy.action import ActionServer, CancelResponse, GoalResponse
from rclpy.callback_groups import MutuallyExclusiveCallbackGroup, ReentrantCallbackGroup
from rclpy.executors import MultiThreadedExecutor
from rclpy.node import Node
from rclpy.qos import HistoryPolicy, QoSProfile, ReliabilityPolicy
from sensor_msgs.msg import Image
from std_msgs.msg import String
from std_srvs.srv import Trigger
from vision_msgs.msg import Detection2DArray

from florence2_interfaces.action import ExecuteTask as ExecuteTaskAction
from florence2_interfaces.srv import ExecuteTask

from .contract import ExecuteTaskResponse
from .errors import ConversionError, Florence2Error
from .inference_backend import load_backend
from .node_core import CancellationToken, InferenceEngine, NodeConfig, PublishedOutputs
from .ros2_adapter import (
    NODE_NAME,
    TopicBindings,
    convert_image_in,
    convert_image_out,
    detections_to_msg,
    executor_threads,
    request_from_msg,
)
from .settings import DEFAULTS, build_node_config, load_settings
from .task_registry import TaskRegistry, default_registry

logger = logging.getLogger(__name__)

SENSOR_QOS = QoSProfile(depth=1, reliability=ReliabilityPolicy.BEST_EFFORT,
                        history=HistoryPolicy.KEEP_LAST)
OUTPUT_QOS = QoSProfile(depth=10, reliability=ReliabilityPolicy.RELIABLE,
                        history=HistoryPolicy.KEEP_LAST)

STATS_PERIOD_S = 1.0


class Florence2Node(Node):
    def __init__(self, engine: Optional[InferenceEngine] = None, config: Optional[NodeConfig] = None,
                 registry: Optional[TaskRegistry] = None, publish_diagnostics: Optional[bool] = None,
                 node_name: str = NODE_NAME):
        super().__init__(node_name)
        for name, default in DEFAULTS.items():
            self.declare_parameter(name, default)
        params = {name: self.get_parameter(name).value for name in DEFAULTS}
        settings = load_settings(overrides=params, read_file=False)

        self.registry = registry or default_registry()
        if engine is None:
            config = build_node_config(settings, self.registry)
            engine = InferenceEngine(config, self.registry, load_backend(config.backend))
        self.engine = engine
        self.config = config or engine.config
        if publish_diagnostics is None:
            publish_diagnostics = settings["publish_diagnostics"]

        self.bindings = TopicBindings(input_image=self.config.image_topic)
        self._tokens: dict = {}
        self._image_group = MutuallyExclusiveCallbackGroup()
        self._request_group = ReentrantCallbackGroup()

        self._results_pub = self.create_publisher(String, self.bindings.results_json, OUTPUT_QOS)
        self._detections_pub = self.create_publisher(
            Detection2DArray, self.bindings.detections, OUTPUT_QOS)
        self._annotated_pub = self.create_publisher(Image, self.bindings.annotated_image, OUTPUT_QOS)

        self.create_subscription(Image, self.bindings.input_image, self._on_image, SENSOR_QOS,
                                 callback_group=self._image_group)
        self.create_service(ExecuteTask, self.bindings.service, self._on_service,
                            callback_group=self._request_group)
        self._action_server = ActionServer(
            self,
            ExecuteTaskAction,
            self.bindings.action,
            execute_callback=self._on_goal,
            goal_callback=lambda goal: GoalResponse.ACCEPT,
            cancel_callback=self._on_cancel,
            callback_group=self._request_group,
        )

        self._stats_pub = None
        if publish_diagnostics:
            self.create_service(Trigger, self.bindings.list_tasks, self._on_list_tasks,
                                callback_group=self._request_group)
            self._stats_pub = self.create_publisher(String, self.bindings.stats, OUTPUT_QOS)
            self.create_timer(STATS_PERIOD_S, self._on_stats_timer)

        self.engine.add_output_listener(self._publish_outputs)

        task = self.config.continuous_task or "none (on-demand only)"
        self.get_logger().info(
            f"Florence-2 node ready: model {self.engine.backend.model_label}, "
            f"continuous task {task}, image topic {self.bindings.input_image}"
        )

    # ---- subscriptions ----

    def _on_image(self, msg: Image) -> None:
        try:
            image = convert_image_in(msg)
        except ConversionError as e:
            self.get_logger().warning(f"Rejected frame: {e.describe()}")
            return
        self.engine.on_image(image)

    # ---- service ----

    def _on_service(self, request, response):
        try:
            req = request_from_msg(request)
        except ConversionError as e:
            return _fill(response, ExecuteTaskResponse.failure(e.describe()), "")
        result = self.engine.handle_service(req)
        frame_id = req.image.frame_id if req.image is not None else ""
        return _fill(response, result, frame_id)

    # ---- action ----

    def _on_cancel(self, goal_handle) -> CancelResponse:
        token = self._tokens.get(bytes(goal_handle.goal_id.uuid))
        if token is not None:
            token.set()
        return CancelResponse.ACCEPT

    def _on_goal(self, goal_handle):
        key = bytes(goal_handle.goal_id.uuid)
        token = CancellationToken()
        self._tokens[key] = token
        if goal_handle.is_cancel_requested:
            token.set()

        def send_feedback(feedback):
            msg = ExecuteTaskAction.Feedback()
            msg.stage = int(feedback.stage)
            msg.elapsed = float(feedback.elapsed)
            goal_handle.publish_feedback(msg)

        frame_id = ""
        try:
            req = request_from_msg(goal_handle.request)
            frame_id = req.image.frame_id if req.image is not None else ""
            result = self.engine.handle_action(req, send_feedback, token)
        except ConversionError as e:
            result = ExecuteTaskResponse.failure(e.describe())
        finally:
            self._tokens.pop(key, None)

        if result.canceled:
            goal_handle.canceled()
        elif result.success:
            goal_handle.succeed()
        else:
            goal_handle.abort()
        return _fill(ExecuteTaskAction.Result(), result, frame_id)

    # ---- introspection ----

    def _on_list_tasks(self, request, response):
        response.success = True
        response.message = json.dumps(self.registry.to_json_ready(), sort_keys=True)
        return response

    def _on_stats_timer(self) -> None:
        stats = self.engine.stats().to_dict()
        stats["lane_busy"] = self.engine.lane_busy
        stats["queued"] = self.engine.queued
        stats["device"] = self.engine.backend.device.describe()
        stats["model"] = self.engine.backend.model_label
        self._stats_pub.publish(String(data=json.dumps(stats, sort_keys=True)))

    # ---- outputs ----

    def _publish_outputs(self, outputs: PublishedOutputs) -> None:
        frame_id = outputs.source_image.frame_id
        self._results_pub.publish(String(data=outputs.results_json))
        if outputs.detections is not None:
            self._detections_pub.publish(detections_to_msg(outputs.detections, frame_id))
        if outputs.annotated_image is not None:
            self._annotated_pub.publish(convert_image_out(outputs.annotated_image))


def _fill(target, result: ExecuteTaskResponse, frame_id: str):
    target.success = result.success
    target.error_message = result.error_message
    target.results_json = result.results_json
    target.inference_time = float(result.inference_time)
    if result.detections is not None:
        target.detections = detections_to_msg(result.detections, frame_id)
    return target


def run(args=None) -> int:
    """Start the node on a multi-threaded executor. Returns the exit status."""
    rclpy.init(args=args)
    try:
        node = Florence2Node()
    except Florence2Error as e:
        logger.error(f"Florence-2 node failed to start: {e.describe()}")
        rclpy.try_shutdown()
        return 1

    executor = MultiThreadedExecutor(num_threads=executor_threads(node.config.queue_depth))
    executor.add_node(node)
    node.engine.start()
    for kind, name in node.bindings.core_endpoints(node.get_fully_qualified_name()).values():
        logger.info(f"  {kind:<8} {name}")
    try:
        executor.spin()
    except KeyboardInterrupt:
        pass
    finally:
        node.engine.stop()
        node.engine.backend.close()
        node.destroy_node()
        rclpy.try_shutdown()
    return 0
