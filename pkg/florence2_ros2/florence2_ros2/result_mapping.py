"""
Hybrid output surface: the canonical JSON document for every task, plus a
typed detection set and an annotated image for box-and-label tasks.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

from PIL import ImageDraw, ImageFont

from .contract import (
    RasterImage,
    ResultDocument,
    Stamp,
    infer_output_kind,
    validate_output,
)
from .errors import ErrorCode, Florence2Error
from .inference_backend import BackendResult
from .task_registry import OutputKind, TaskSpec

# Florence-2 emits no confidence; detections carry this synthetic score.
SYNTHETIC_SCORE = 1.0

DEFAULT_COLORS = (
    (255, 64, 64),
    (64, 220, 64),
    (64, 160, 255),
    (255, 200, 0),
    (220, 64, 255),
    (0, 230, 230),
)


@dataclass(frozen=True)
class Detection:
    center_x: float
    center_y: float
    size_x: float
    size_y: float
    label: str
    score: float = SYNTHETIC_SCORE

    def corners(self) -> tuple:
        half_x, half_y = self.size_x / 2.0, self.size_y / 2.0
        return (
            self.center_x - half_x,
            self.center_y - half_y,
            self.center_x + half_x,
            self.center_y + half_y,
        )


@dataclass
class DetectionSet:
    detections: list[Detection] = field(default_factory=list)
    source_stamp: Stamp = field(default_factory=Stamp)

    def __len__(self) -> int:
        return len(self.detections)


@dataclass(frozen=True)
class AnnotationStyle:
    line_width: int = 2
    font_scale: float = 1.0
    colors: tuple = DEFAULT_COLORS
    draw_labels: bool = True


def to_result_document(task: TaskSpec, backend_result: BackendResult,
                       stamp: Stamp, model_id: str) -> ResultDocument:
    validate_output(task.output_kind, backend_result.parsed_output)
    return ResultDocument(
        task=task.token,
        model=model_id,
        stamp=stamp,
        inference_time_s=max(0.0, float(backend_result.inference_time)),
        output=backend_result.parsed_output,
    )


def to_detections(doc: ResultDocument) -> DetectionSet:
    """Corner boxes -> center/size detections with the synthetic score."""
    output = doc.output
    if not (isinstance(output, dict) and "bboxes" in output and "labels" in output):
        kind = infer_output_kind(output)
        found = kind.value if kind else "unknown"
        raise Florence2Error(ErrorCode.WRONG_OUTPUT_KIND, f"{found} output has no detections")
    validate_output(OutputKind.BOXES_LABELS, output)

    detections = []
    for (x1, y1, x2, y2), label in zip(output["bboxes"], output["labels"]):
        detections.append(Detection(
            center_x=(x1 + x2) / 2.0,
            center_y=(y1 + y2) / 2.0,
            size_x=x2 - x1,
            size_y=y2 - y1,
            label=label,
        ))
    return DetectionSet(detections=detections, source_stamp=doc.stamp)


# -------------------------
# Annotation rendering
# -------------------------

def _load_font(style: AnnotationStyle):
    size = max(8, round(11 * style.font_scale))
    try:
        return ImageFont.load_default(size=size)
    except Exception:
        return ImageFont.load_default()


def _pixel_box(det: Detection, width: int, height: int) -> tuple:
    x1, y1, x2, y2 = det.corners()
    x1, x2 = sorted((min(max(round(x1), 0), width - 1), min(max(round(x2), 0), width - 1)))
    y1, y2 = sorted((min(max(round(y1), 0), height - 1), min(max(round(y2), 0), height - 1)))
    return x1, y1, x2, y2


def label_region(draw: ImageDraw.ImageDraw, box: tuple, label: str, font,
                 width: int, height: int, pad: int = 2) -> tuple:
    """Filled rectangle holding the label: above the box, or inside it at the image top."""
    left, top, right, bottom = draw.textbbox((0, 0), label, font=font)
    text_w, text_h = right - left, bottom - top
    x1, y1 = box[0], box[1]
    ly1 = y1 - text_h - 2 * pad
    if ly1 < 0:
        ly1 = y1
    lx2 = min(width - 1, x1 + text_w + 2 * pad)
    ly2 = min(height - 1, ly1 + text_h + 2 * pad)
    return x1, ly1, lx2, ly2


def _ink(color: tuple, mode: str):
    if mode == "L":
        r, g, b = color
        return int(round(0.299 * r + 0.587 * g + 0.114 * b))
    return color


def render_annotations(image: RasterImage, dets: DetectionSet,
                       style: Optional[AnnotationStyle] = None) -> RasterImage:
    """
    Draw box outlines and labels over a copy of the image. Pixels change only
    on box perimeters and inside label regions; boxes are clamped first. The
    result carries the detections' stamp so both outputs of a frame match.
    """
    image.validate()
    style = style or AnnotationStyle()
    if not dets.detections:
        return replace(image, stamp=dets.source_stamp)
    canvas = image.to_pil().copy()

    draw = ImageDraw.Draw(canvas)
    font = _load_font(style) if style.draw_labels else None
    for i, det in enumerate(dets.detections):
        color = style.colors[i % len(style.colors)]
        box = _pixel_box(det, image.width, image.height)
        draw.rectangle(box, outline=_ink(color, canvas.mode), width=style.line_width)
        if style.draw_labels and det.label:
            region = label_region(draw, box, det.label, font, image.width, image.height)
            draw.rectangle(region, fill=_ink(color, canvas.mode))
            left, top, _, _ = draw.textbbox((0, 0), det.label, font=font)
            draw.text((region[0] + 2 - left, region[1] + 2 - top), det.label,
                      fill=_ink((0, 0, 0), canvas.mode), font=font)

    return RasterImage(
        width=image.width,
        height=image.height,
        encoding=image.encoding,
        data=canvas.tobytes(),
        stamp=dets.source_stamp,
        frame_id=image.frame_id,
        source_encoding=image.source_encoding,
    )

