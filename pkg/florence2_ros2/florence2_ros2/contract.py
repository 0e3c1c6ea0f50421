"""
Shared request/result contract for the service and action modes, the
middleware-neutral image type, and the versioned JSON result document.

Everything here is pure data and validation; all functions are stateless.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import lru_cache
from typing import TYPE_CHECKING, Any, Optional

import jsonschema
import numpy as np
from PIL import Image

from .errors import ConversionError, ErrorCode, SchemaError
from .paths import get_schema_path
from .task_registry import OutputKind, TaskRegistry
from .version import SCHEMA_VERSION

if TYPE_CHECKING:
    from .result_mapping import DetectionSet

INTERNAL_ENCODINGS = {"rgb8": 3, "mono8": 1}


@dataclass(frozen=True)
class Stamp:
    sec: int = 0
    nanosec: int = 0

    @classmethod
    def from_seconds(cls, t: float) -> "Stamp":
        sec = int(t)
        nanosec = int(round((t - sec) * 1e9))
        if nanosec >= 1_000_000_000:
            sec, nanosec = sec + 1, nanosec - 1_000_000_000
        return cls(sec, nanosec)

    def to_seconds(self) -> float:
        return self.sec + self.nanosec * 1e-9

    def to_dict(self) -> dict:
        return {"sec": self.sec, "nanosec": self.nanosec}


@dataclass(frozen=True)
class RasterImage:
    """
    Middleware-neutral image. Pixel data is kept in rgb8 or mono8 order;
    source_encoding remembers the wire encoding (e.g. bgr8) so the adapter
    can restore it on the way out.
    """

    width: int
    height: int
    encoding: str
    data: bytes
    stamp: Optional[Stamp] = None
    frame_id: str = ""
    source_encoding: str = ""

    @property
    def channels(self) -> int:
        return INTERNAL_ENCODINGS.get(self.encoding, 0)

    def validate(self) -> None:
        """Raise MALFORMED_IMAGE unless dimensions, encoding and buffer agree."""
        if self.encoding not in INTERNAL_ENCODINGS:
            raise ConversionError(ErrorCode.UNSUPPORTED_ENCODING, self.encoding)
        if self.width <= 0 or self.height <= 0:
            raise ConversionError(
                ErrorCode.MALFORMED_IMAGE, f"empty image {self.width}x{self.height}"
            )
        expected = self.width * self.height * self.channels
        if len(self.data) != expected:
            raise ConversionError(
                ErrorCode.MALFORMED_IMAGE,
                f"buffer has {len(self.data)} bytes, expected {expected}",
            )

    def checksum(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def to_array(self) -> np.ndarray:
        arr = np.frombuffer(self.data, dtype=np.uint8)
        if self.channels == 1:
            return arr.reshape(self.height, self.width)
        return arr.reshape(self.height, self.width, self.channels)

    def to_pil(self) -> Image.Image:
        mode = "L" if self.encoding == "mono8" else "RGB"
        return Image.frombytes(mode, (self.width, self.height), self.data)

    @classmethod
    def from_array(cls, array: np.ndarray, stamp: Optional[Stamp] = None,
                   frame_id: str = "", source_encoding: str = "") -> "RasterImage":
        array = np.ascontiguousarray(array, dtype=np.uint8)
        if array.ndim == 2:
            encoding = "mono8"
        elif array.ndim == 3 and array.shape[2] == 3:
            encoding = "rgb8"
        else:
            raise ConversionError(ErrorCode.UNSUPPORTED_ENCODING, f"array shape {array.shape}")
        return cls(
            width=int(array.shape[1]),
            height=int(array.shape[0]),
            encoding=encoding,
            data=array.tobytes(),
            stamp=stamp,
            frame_id=frame_id,
            source_encoding=source_encoding or encoding,
        )

    @classmethod
    def from_pil(cls, image: Image.Image, stamp: Optional[Stamp] = None,
                 frame_id: str = "") -> "RasterImage":
        if image.mode not in ("L", "RGB"):
            image = image.convert("RGB")
        return cls.from_array(np.asarray(image), stamp=stamp, frame_id=frame_id)

    @classmethod
    def from_file(cls, path: str, stamp: Optional[Stamp] = None) -> "RasterImage":
        """Read a PNG/JPEG file."""
        with Image.open(path) as image:
            image.load()
            return cls.from_pil(image, stamp=stamp)


@dataclass
class ExecuteTaskRequest:
    task_token: str
    text_input: str = ""
    image: Optional[RasterImage] = None
    use_latest_image: bool = False


@dataclass
class ExecuteTaskResponse:
    success: bool
    error_message: str = ""
    results_json: str = ""
    detections: Optional["DetectionSet"] = None
    inference_time: float = 0.0
    # Not part of the wire message; the action server maps it to goal status.
    canceled: bool = False

    @classmethod
    def failure(cls, message: str, inference_time: float = 0.0,
                canceled: bool = False) -> "ExecuteTaskResponse":
        return cls(
            success=False,
            error_message=message or ErrorCode.INFERENCE_FAILURE.value,
            inference_time=inference_time,
            canceled=canceled,
        )


class FeedbackStage(IntEnum):
    RECEIVED = 0
    PREPROCESSING = 1
    INFERENCE_RUNNING = 2
    POSTPROCESSING = 3


@dataclass(frozen=True)
class ActionFeedback:
    stage: FeedbackStage
    elapsed: float


@dataclass
class ResultDocument:
    task: str
    model: str
    stamp: Stamp
    inference_time_s: float
    output: dict[str, Any]
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "task": self.task,
            "model": self.model,
            "stamp": self.stamp.to_dict(),
            "inference_time_s": self.inference_time_s,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResultDocument":
        return cls(
            task=data["task"],
            model=data["model"],
            stamp=Stamp(int(data["stamp"]["sec"]), int(data["stamp"]["nanosec"])),
            inference_time_s=float(data["inference_time_s"]),
            output=data["output"],
            schema_version=data["schema_version"],
        )


# -------------------------
# Request validation
# -------------------------

class RejectionReason(str, Enum):
    UNKNOWN_TASK = ErrorCode.UNKNOWN_TASK.value
    NO_IMAGE_AVAILABLE = ErrorCode.NO_IMAGE_AVAILABLE.value
    MISSING_TEXT_INPUT = ErrorCode.MISSING_TEXT_INPUT.value
    AMBIGUOUS_IMAGE_SOURCE = ErrorCode.AMBIGUOUS_IMAGE_SOURCE.value


@dataclass(frozen=True)
class ValidationResult:
    reason: Optional[RejectionReason] = None

    @property
    def ok(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.ok


def validate_request(req: ExecuteTaskRequest, registry: TaskRegistry,
                     cache_populated: bool) -> ValidationResult:
    """Check the request invariants. Total: never raises."""
    spec = registry.lookup(req.task_token) if req.task_token else None
    if spec is None:
        return ValidationResult(RejectionReason.UNKNOWN_TASK)

    has_image = req.image is not None
    cached = bool(req.use_latest_image and cache_populated)
    if not has_image and not req.use_latest_image:
        return ValidationResult(RejectionReason.AMBIGUOUS_IMAGE_SOURCE)
    if has_image and cached:
        return ValidationResult(RejectionReason.AMBIGUOUS_IMAGE_SOURCE)
    if not has_image and not cached:
        return ValidationResult(RejectionReason.NO_IMAGE_AVAILABLE)

    if spec.requires_text_input and not req.text_input:
        return ValidationResult(RejectionReason.MISSING_TEXT_INPUT)
    return ValidationResult()


# -------------------------
# Output-kind schemas
# -------------------------

_KIND_KEYS = {
    OutputKind.TEXT: ("text",),
    OutputKind.BOXES_LABELS: ("bboxes", "labels"),
    OutputKind.QUAD_BOXES_TEXT: ("quad_boxes", "labels"),
    OutputKind.POLYGONS_LABELS: ("polygons", "labels"),
    OutputKind.REGION_TEXT_PAIRS: ("bboxes", "texts"),
}

_COORD_LENGTH = {"bboxes": 4, "quad_boxes": 8}


def infer_output_kind(output: Any) -> Optional[OutputKind]:
    """Identify the kind of an output subtree by its key set."""
    if not isinstance(output, dict):
        return None
    keys = set(output)
    for kind, expected in _KIND_KEYS.items():
        if keys == set(expected):
            return kind
    return None


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_output(kind: OutputKind, output: Any, path: str = "$.output") -> None:
    """Raise SCHEMA_MISMATCH unless output conforms to the kind's shape."""
    if not isinstance(output, dict):
        raise SchemaError(ErrorCode.SCHEMA_MISMATCH, "output is not an object", path)
    expected = _KIND_KEYS[kind]
    if set(output) != set(expected):
        raise SchemaError(
            ErrorCode.SCHEMA_MISMATCH,
            f"{kind.value} output needs keys {sorted(expected)}, got {sorted(output)}",
            path,
        )
    if kind == OutputKind.TEXT:
        if not isinstance(output["text"], str):
            raise SchemaError(ErrorCode.SCHEMA_MISMATCH, "text must be a string", f"{path}.text")
        return

    geometry_key, names_key = expected
    geometry, names = output[geometry_key], output[names_key]
    if not isinstance(geometry, list) or not isinstance(names, list):
        raise SchemaError(ErrorCode.SCHEMA_MISMATCH, "expected lists", path)
    if len(geometry) != len(names):
        raise SchemaError(
            ErrorCode.SCHEMA_MISMATCH,
            f"{len(geometry)} {geometry_key} but {len(names)} {names_key}",
            path,
        )
    for i, name in enumerate(names):
        if not isinstance(name, str):
            raise SchemaError(ErrorCode.SCHEMA_MISMATCH, "must be a string",
                              f"{path}.{names_key}[{i}]")
    for i, coords in enumerate(geometry):
        item_path = f"{path}.{geometry_key}[{i}]"
        if not isinstance(coords, list) or not all(_is_number(c) for c in coords):
            raise SchemaError(ErrorCode.SCHEMA_MISMATCH, "must be a list of numbers", item_path)
        if geometry_key in _COORD_LENGTH and len(coords) != _COORD_LENGTH[geometry_key]:
            raise SchemaError(
                ErrorCode.SCHEMA_MISMATCH,
                f"needs {_COORD_LENGTH[geometry_key]} coordinates, got {len(coords)}",
                item_path,
            )
        if geometry_key == "polygons" and (len(coords) < 6 or len(coords) % 2):
            raise SchemaError(ErrorCode.SCHEMA_MISMATCH,
                              "polygon needs an even number (>= 6) of coordinates", item_path)
        if geometry_key == "bboxes" and (coords[0] > coords[2] or coords[1] > coords[3]):
            raise SchemaError(ErrorCode.SCHEMA_MISMATCH, "box corners out of order", item_path)


# -------------------------
# Result document (de)serialization
# -------------------------

@lru_cache(maxsize=1)
def load_schema() -> dict:
    with open(get_schema_path(), "r", encoding="utf-8") as f:
        return json.load(f)


@lru_cache(maxsize=1)
def _validator() -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(load_schema())


def check_document(data: Any) -> None:
    """Validate a decoded document against the published JSON schema."""
    error = jsonschema.exceptions.best_match(_validator().iter_errors(data))
    if error is not None:
        raise SchemaError(ErrorCode.SCHEMA_ERROR, error.message, error.json_path)
    kind = infer_output_kind(data["output"])
    validate_output(kind, data["output"])


def serialize_result(doc: ResultDocument) -> str:
    """Deterministic JSON: sorted keys, compact separators."""
    data = doc.to_dict()
    check_document(data)
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


_KEY_PATTERN = re.compile(r'"([A-Za-z_][A-Za-z0-9_]*)"\s*:')


def parse_result(s: str) -> ResultDocument:
    """Decode and schema-check a serialized ResultDocument."""
    try:
        data = json.loads(s)
    except json.JSONDecodeError as e:
        keys = _KEY_PATTERN.findall(s[:e.pos])
        path = f"$.{keys[-1]}" if keys else "$"
        raise SchemaError(
            ErrorCode.SCHEMA_ERROR, f"malformed JSON at char {e.pos}: {e.msg}", path
        ) from e
    check_document(data)
    return ResultDocument.from_dict(data)
