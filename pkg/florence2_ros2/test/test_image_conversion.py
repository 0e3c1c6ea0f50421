"""Image conversion through cv_bridge; skipped where cv_bridge is not installed."""

import numpy as np
import pytest

pytest.importorskip("cv_bridge")
sensor_msgs = pytest.importorskip("sensor_msgs.msg")

from types import SimpleNamespace  # noqa: E402

from conftest import make_image  # noqa: E402
from florence2_ros2.contract import Stamp  # noqa: E402
from florence2_ros2.errors import ConversionError, ErrorCode  # noqa: E402
from florence2_ros2.ros2_adapter import (  # noqa: E402
    convert_image_in,
    convert_image_out,
    request_from_msg,
)


def _image_msg(array, encoding, step=None, sec=10, nanosec=20):
    height, width = array.shape[:2]
    row = array.tobytes()
    natural = len(row) // height
    step = step or natural
    msg = sensor_msgs.Image()
    msg.header.stamp.sec = sec
    msg.header.stamp.nanosec = nanosec
    msg.header.frame_id = "cam"
    msg.height = height
    msg.width = width
    msg.encoding = encoding
    msg.step = step
    msg.data = b"".join(row[i * natural:(i + 1) * natural] + bytes(step - natural)
                        for i in range(height))
    return msg


def _pixels(seed=0, height=6, width=5, channels=3):
    shape = (height, width, channels) if channels > 1 else (height, width)
    return np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)


def test_rgb8_round_trip():
    pixels = _pixels()
    image = convert_image_in(_image_msg(pixels, "rgb8"))
    assert (image.width, image.height, image.encoding) == (5, 6, "rgb8")
    assert image.stamp == Stamp(10, 20)
    assert image.frame_id == "cam"
    np.testing.assert_array_equal(image.to_array(), pixels)

    out = convert_image_out(image)
    assert out.encoding == "rgb8"
    assert out.step == 15
    assert bytes(out.data) == pixels.tobytes()
    assert (out.header.stamp.sec, out.header.stamp.nanosec, out.header.frame_id) == (10, 20, "cam")


def test_bgr8_is_swapped_and_restored():
    pixels = _pixels(seed=1)
    image = convert_image_in(_image_msg(pixels, "bgr8"))
    np.testing.assert_array_equal(image.to_array(), pixels[:, :, ::-1])
    assert image.encoding == "rgb8"
    assert image.source_encoding == "bgr8"

    out = convert_image_out(image)
    assert out.encoding == "bgr8"
    assert bytes(out.data) == pixels.tobytes()


def test_mono8():
    pixels = _pixels(seed=2, channels=1)
    image = convert_image_in(_image_msg(pixels, "mono8"))
    assert image.encoding == "mono8"
    assert bytes(convert_image_out(image).data) == pixels.tobytes()


@pytest.mark.parametrize("step", [18, 20])
def test_padded_rows(step):
    pixels = _pixels(seed=3)
    image = convert_image_in(_image_msg(pixels, "rgb8", step=step))
    np.testing.assert_array_equal(image.to_array(), pixels)


def test_zero_stamp_means_unstamped():
    image = convert_image_in(_image_msg(_pixels(), "rgb8", sec=0, nanosec=0))
    assert image.stamp is None


@pytest.mark.parametrize("encoding", ["16UC1", "rgba8", "mono16", "bayer_rggb8", ""])
def test_unsupported_encoding(encoding):
    with pytest.raises(ConversionError) as err:
        convert_image_in(_image_msg(_pixels(), encoding))
    assert err.value.code == ErrorCode.UNSUPPORTED_ENCODING


def test_short_buffer_is_malformed():
    msg = _image_msg(_pixels(), "rgb8")
    msg.data = bytes(msg.data)[:-1]
    with pytest.raises(ConversionError) as err:
        convert_image_in(msg)
    assert err.value.code == ErrorCode.MALFORMED_IMAGE


def test_step_smaller_than_row_is_malformed():
    msg = _image_msg(_pixels(), "rgb8")
    msg.step = 10
    with pytest.raises(ConversionError) as err:
        convert_image_in(msg)
    assert err.value.code == ErrorCode.MALFORMED_IMAGE


def test_out_image_without_stamp():
    out = convert_image_out(make_image(4, 4))
    assert (out.header.stamp.sec, out.header.stamp.nanosec) == (0, 0)


def test_request_with_image():
    msg = SimpleNamespace(task_token="<CAPTION_TO_PHRASE_GROUNDING>", text_input="a cup",
                          image=_image_msg(_pixels(), "bgr8"), use_latest_image=False)
    req = request_from_msg(msg)
    assert req.task_token == "<CAPTION_TO_PHRASE_GROUNDING>"
    assert req.text_input == "a cup"
    assert req.image.source_encoding == "bgr8"
