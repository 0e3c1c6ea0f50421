import numpy as np
import pytest

from conftest import make_image
from florence2_ros2.contract import ResultDocument, Stamp, parse_result, serialize_result
from florence2_ros2.errors import ErrorCode, Florence2Error, SchemaError
from florence2_ros2.inference_backend import BackendResult
from florence2_ros2.result_mapping import (
    AnnotationStyle,
    Detection,
    DetectionSet,
    render_annotations,
    to_detections,
    to_result_document,
)

STAMP = Stamp(1_700_000_321, 42)


def _doc(output, task="<OD>"):
    return ResultDocument(task=task, model="mock", stamp=STAMP, inference_time_s=0.1, output=output)


def _random_boxes(rng, n, width=640, height=480):
    boxes, labels = [], []
    for _ in range(n):
        x1, x2 = sorted(rng.uniform(0, width, 2).round(3).tolist())
        y1, y2 = sorted(rng.uniform(0, height, 2).round(3).tolist())
        boxes.append([x1, y1, x2, y2])
        labels.append(f"obj{rng.integers(100)}")
    return boxes, labels


def test_to_result_document(registry):
    spec = registry.lookup("<OD>")
    result = BackendResult("raw", {"bboxes": [[0.0, 0.0, 2.0, 2.0]], "labels": ["a"]}, 0.3)
    doc = to_result_document(spec, result, STAMP, "mock")
    assert doc.task == "<OD>"
    assert doc.stamp == STAMP
    assert doc.inference_time_s == 0.3
    assert doc.output == result.parsed_output


def test_to_result_document_checks_kind(registry):
    spec = registry.lookup("<OD>")
    with pytest.raises(SchemaError):
        to_result_document(spec, BackendResult("raw", {"text": "no boxes"}, 0.1), STAMP, "mock")


def test_detections_center_size():
    dets = to_detections(_doc({"bboxes": [[10.0, 20.0, 30.0, 60.0]], "labels": ["cup"]}))
    assert dets.source_stamp == STAMP
    assert dets.detections == [Detection(20.0, 40.0, 20.0, 40.0, "cup", 1.0)]


def test_detections_reconstruct_random_documents():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        boxes, labels = _random_boxes(rng, int(rng.integers(0, 6)))
        doc = parse_result(serialize_result(_doc({"bboxes": boxes, "labels": labels})))
        dets = to_detections(doc)
        assert len(dets) == len(boxes)
        for det, box, label in zip(dets.detections, boxes, labels):
            assert det.corners() == pytest.approx(box, abs=1e-9)
            assert det.label == label
            assert det.score == 1.0


def test_empty_detection_set():
    dets = to_detections(_doc({"bboxes": [], "labels": []}))
    assert len(dets) == 0
    assert dets.source_stamp == STAMP


@pytest.mark.parametrize("output", [
    {"text": "a caption"},
    {"quad_boxes": [[0, 0, 1, 0, 1, 1, 0, 1]], "labels": ["A"]},
    {"polygons": [[0, 0, 4, 0, 4, 4]], "labels": ["tri"]},
    {"bboxes": [[0, 0, 1, 1]], "texts": ["region"]},
])
def test_detections_wrong_output_kind(output):
    with pytest.raises(Florence2Error) as err:
        to_detections(_doc(output))
    assert err.value.code == ErrorCode.WRONG_OUTPUT_KIND


# -------------------------
# Annotation
# -------------------------

def _perimeter_mask(box, width, height, line_width):
    x1, y1, x2, y2 = box
    mask = np.zeros((height, width), dtype=bool)
    mask[y1:y2 + 1, x1:x2 + 1] = True
    inner = (x1 + line_width, y1 + line_width, x2 - line_width, y2 - line_width)
    if inner[0] <= inner[2] and inner[1] <= inner[3]:
        mask[inner[1]:inner[3] + 1, inner[0]:inner[2] + 1] = False
    return mask


def test_render_changes_only_perimeter_without_labels():
    image = make_image(64, 48, seed=5)
    dets = DetectionSet([Detection(32.0, 24.0, 20.0, 16.0, "box")], STAMP)
    out = render_annotations(image, dets, AnnotationStyle(line_width=2, draw_labels=False))
    changed = np.any(out.to_array() != image.to_array(), axis=2)
    allowed = _perimeter_mask((22, 16, 42, 32), 64, 48, 2)
    assert changed.any()
    assert not (changed & ~allowed).any()


def test_render_changes_only_perimeter_and_label_region():
    image = make_image(96, 80, seed=6)
    dets = DetectionSet([Detection(48.0, 50.0, 30.0, 20.0, "cup")], STAMP)
    style = AnnotationStyle(line_width=1)
    out = render_annotations(image, dets, style)
    changed = np.any(out.to_array() != image.to_array(), axis=2)

    allowed = _perimeter_mask((33, 40, 63, 60), 96, 80, 1)
    # Label region sits above the box; the box starts at y=40 so it fits.
    label_rows = slice(0, 41)
    label_cols = slice(33, 96)
    allowed[label_rows, label_cols] = True
    assert not (changed & ~allowed).any()
    assert changed[:40].any(), "label not drawn"


def test_render_keeps_metadata():
    image = make_image(32, 32, stamp=STAMP)
    out = render_annotations(image, DetectionSet([Detection(16, 16, 8, 8, "x")], STAMP))
    assert (out.width, out.height, out.encoding, out.stamp, out.frame_id) == (
        32, 32, "rgb8", STAMP, "test_camera")
    assert out.data != image.data


def test_render_mono_image():
    image = make_image(32, 32, encoding="mono8")
    out = render_annotations(image, DetectionSet([Detection(16, 16, 8, 8, "x")], STAMP))
    assert out.encoding == "mono8"
    assert len(out.data) == 32 * 32


def test_render_clamps_out_of_bounds_box():
    image = make_image(20, 20)
    out = render_annotations(image, DetectionSet([Detection(30, 30, 40, 40, "big")], STAMP),
                             AnnotationStyle(draw_labels=False))
    out.validate()


def test_render_no_detections_leaves_pixels():
    image = make_image()
    out = render_annotations(image, DetectionSet([], STAMP))
    assert out.data == image.data
    assert out.stamp == STAMP


def test_render_takes_detection_stamp_for_unstamped_frame():
    image = make_image(32, 32)
    assert image.stamp is None
    out = render_annotations(image, DetectionSet([Detection(16, 16, 8, 8, "x")], STAMP))
    assert out.stamp == STAMP
