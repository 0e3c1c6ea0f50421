import numpy as np
import pytest

from florence2_ros2.clock import VirtualClock
from florence2_ros2.contract import RasterImage, Stamp
from florence2_ros2.inference_backend import BackendConfig, DevicePolicy, StaticProbe, load_backend
from florence2_ros2.node_core import InferenceEngine, NodeConfig
from florence2_ros2.task_registry import default_registry


@pytest.fixture
def registry():
    return default_registry()


@pytest.fixture
def clock():
    return VirtualClock()


def make_image(width=64, height=48, seed=0, stamp=None, encoding="rgb8"):
    rng = np.random.default_rng(seed)
    shape = (height, width) if encoding == "mono8" else (height, width, 3)
    return RasterImage.from_array(rng.integers(0, 256, shape, dtype=np.uint8), stamp=stamp,
                                  frame_id="test_camera")


@pytest.fixture
def image():
    return make_image(stamp=Stamp(1_700_000_123, 456))


@pytest.fixture
def make_engine(registry):
    """Engine factory on the mock backend; a VirtualClock unless a clock is passed."""

    def factory(continuous_task=None, latency=0.1, clock=None, queue_depth=8,
                publish_annotated=True, text_input=""):
        clock = clock or VirtualClock()
        backend_config = BackendConfig(model_id="mock", device_policy=DevicePolicy("cpu"),
                                       mock_latency_s=latency)
        backend = load_backend(backend_config, StaticProbe(), clock)
        config = NodeConfig(
            backend=backend_config,
            continuous_task=continuous_task,
            continuous_text_input=text_input,
            publish_annotated=publish_annotated,
            queue_depth=queue_depth,
        )
        return InferenceEngine(config, registry, backend, clock)

    return factory
