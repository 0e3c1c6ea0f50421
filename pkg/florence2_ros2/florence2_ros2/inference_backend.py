"""
Model loading and blocking generation behind one backend interface.

Two implementations: Florence2Backend runs the upstream model through
torch + transformers; MockBackend is a deterministic stand-in selected with
model_id "mock" and used by CI, the smoke test and the bench calibration.
"""

import logging
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional, Protocol

from .clock import Clock, MonotonicClock
from .contract import RasterImage, validate_output
from .errors import BackendError, ConfigError, ErrorCode, Florence2Error
from .task_registry import OutputKind, TaskSpec
from .version import DEFAULT_MODEL_ID, DEFAULT_MODEL_REVISION

logger = logging.getLogger(__name__)

MOCK_MODEL_ID = "mock"
MODEL_CACHE_ENV = "FLORENCE2_MODEL_CACHE"
LOCAL_REVISION = "local"

_COMMIT_HASH = re.compile(r"^[0-9a-f]{40}$")


class PrecisionPolicy(str, Enum):
    AUTO = "auto"
    FULL = "full"
    REDUCED = "reduced"


@dataclass(frozen=True)
class DevicePolicy:
    """AUTO, CPU, or GPU(index)."""

    kind: str = "auto"
    index: int = 0

    @classmethod
    def parse(cls, value: str) -> "DevicePolicy":
        text = (value or "auto").strip().lower()
        if text in ("auto", "cpu"):
            return cls(text)
        if text in ("gpu", "cuda"):
            return cls("gpu", 0)
        for prefix in ("gpu:", "cuda:"):
            if text.startswith(prefix):
                try:
                    index = int(text[len(prefix):])
                except ValueError:
                    break
                if index < 0:
                    raise ConfigError(f"GPU index must be >= 0, got {index}")
                return cls("gpu", index)
        raise ConfigError(f"unknown device policy {value!r} (expected auto, cpu, gpu or gpu:N)")

    def __str__(self) -> str:
        return f"gpu:{self.index}" if self.kind == "gpu" else self.kind


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 1024
    num_beams: int = 3
    sampling_enabled: bool = False

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.num_beams < 1:
            raise ConfigError(f"num_beams must be >= 1, got {self.num_beams}")


@dataclass(frozen=True)
class BackendConfig:
    model_id: str = DEFAULT_MODEL_ID
    device_policy: DevicePolicy = field(default_factory=DevicePolicy)
    precision_policy: PrecisionPolicy = PrecisionPolicy.AUTO
    generation: GenerationParams = field(default_factory=GenerationParams)
    revision: str = DEFAULT_MODEL_REVISION
    cache_dir: Optional[str] = None
    allow_download: bool = False
    mock_latency_s: float = 0.0

    def __post_init__(self):
        if not self.model_id:
            raise ConfigError("model_id must not be empty")
        if self.mock_latency_s < 0:
            raise ConfigError("mock_latency_s must be >= 0")

    @property
    def is_mock(self) -> bool:
        return self.model_id == MOCK_MODEL_ID


@dataclass
class BackendResult:
    raw_text: str
    parsed_output: dict
    inference_time: float


@dataclass(frozen=True)
class ResolvedDevice:
    kind: str
    index: int = 0
    name: str = ""

    @property
    def is_gpu(self) -> bool:
        return self.kind == "cuda"

    @property
    def torch_device(self) -> str:
        return f"cuda:{self.index}" if self.is_gpu else "cpu"

    def describe(self) -> str:
        return f"{self.torch_device} ({self.name})" if self.name else self.torch_device


# -------------------------
# Device and precision selection
# -------------------------

class HardwareProbe(Protocol):
    def gpu_count(self) -> int: ...

    def device_name(self, index: int) -> str: ...


class TorchProbe:
    """Asks torch which CUDA devices exist; reports none if torch is absent."""

    def gpu_count(self) -> int:
        try:
            import torch
        except ImportError:
            return 0
        try:
            return torch.cuda.device_count() if torch.cuda.is_available() else 0
        except Exception as e:
            logger.warning(f"CUDA probe failed: {e}")
            return 0

    def device_name(self, index: int) -> str:
        try:
            import torch
            return torch.cuda.get_device_name(index)
        except Exception:
            return ""


class StaticProbe:
    def __init__(self, gpus: int = 0, names: Optional[list] = None):
        self._gpus = gpus
        self._names = names or [f"GPU {i}" for i in range(gpus)]

    def gpu_count(self) -> int:
        return self._gpus

    def device_name(self, index: int) -> str:
        return self._names[index] if index < len(self._names) else ""


def select_device(policy: DevicePolicy, probe: HardwareProbe) -> ResolvedDevice:
    """AUTO picks the first GPU if any, else CPU. Explicit GPUs must exist."""
    count = probe.gpu_count()
    if policy.kind == "cpu":
        device = ResolvedDevice("cpu")
    elif policy.kind == "gpu":
        if policy.index >= count:
            raise BackendError(
                ErrorCode.GPU_UNAVAILABLE,
                f"gpu:{policy.index} requested, {count} GPU(s) present",
            )
        device = ResolvedDevice("cuda", policy.index, probe.device_name(policy.index))
    elif count > 0:
        device = ResolvedDevice("cuda", 0, probe.device_name(0))
    else:
        device = ResolvedDevice("cpu")
    logger.info(f"Device policy {policy} resolved to {device.describe()}")
    return device


def resolve_precision(policy: PrecisionPolicy, device: ResolvedDevice) -> PrecisionPolicy:
    if policy == PrecisionPolicy.AUTO:
        return PrecisionPolicy.REDUCED if device.is_gpu else PrecisionPolicy.FULL
    return policy


# -------------------------
# Output shaping
# -------------------------

def _clamp(value: float, upper: float) -> float:
    return float(min(max(float(value), 0.0), float(upper)))


def clamp_box(box, width: int, height: int) -> list:
    """Corner box clamped to the image and ordered so min <= max."""
    x1, y1, x2, y2 = (float(v) for v in box[:4])
    x1, x2 = sorted((_clamp(x1, width), _clamp(x2, width)))
    y1, y2 = sorted((_clamp(y1, height), _clamp(y2, height)))
    return [x1, y1, x2, y2]


def _clamp_points(coords, width: int, height: int) -> list:
    return [
        _clamp(v, width if i % 2 == 0 else height) for i, v in enumerate(coords)
    ]


def _clean_label(label: Any) -> str:
    return str(label).replace("</s>", "").replace("<s>", "").strip()


def shape_output(kind: OutputKind, tree: Any, width: int, height: int) -> dict:
    """
    Convert the upstream post-processor tree for one task into this
    repository's output-kind schema, in absolute pixels within the image.
    """
    if kind == OutputKind.TEXT:
        if not isinstance(tree, str):
            raise BackendError(ErrorCode.SCHEMA_MISMATCH, f"expected text, got {type(tree).__name__}")
        return {"text": tree.strip()}

    if not isinstance(tree, dict):
        raise BackendError(ErrorCode.SCHEMA_MISMATCH, f"expected a mapping, got {type(tree).__name__}")

    if kind in (OutputKind.BOXES_LABELS, OutputKind.REGION_TEXT_PAIRS):
        boxes = [clamp_box(b, width, height) for b in tree.get("bboxes", [])]
        labels = tree.get("labels", tree.get("bboxes_labels", []))
        labels = [_clean_label(label) for label in labels]
        if not labels and boxes:
            labels = [""] * len(boxes)
        key = "labels" if kind == OutputKind.BOXES_LABELS else "texts"
        return {"bboxes": boxes, key: labels}

    if kind == OutputKind.QUAD_BOXES_TEXT:
        quads = [_clamp_points(q, width, height) for q in tree.get("quad_boxes", [])]
        labels = [_clean_label(label) for label in tree.get("labels", [])]
        return {"quad_boxes": quads, "labels": labels}

    polygons, labels = [], []
    names = tree.get("labels", tree.get("polygons_labels", []))
    for i, instance in enumerate(tree.get("polygons", [])):
        label = _clean_label(names[i]) if i < len(names) else ""
        # Upstream nests one list of polygons per instance.
        parts = instance if instance and isinstance(instance[0], (list, tuple)) else [instance]
        for part in parts:
            if len(part) >= 6:
                polygons.append(_clamp_points(part, width, height))
                labels.append(label)
    return {"polygons": polygons, "labels": labels}


# -------------------------
# Backends
# -------------------------

class ReentrancyGuard:
    """Fails loudly if two inferences ever overlap on one handle."""

    def __init__(self):
        self._lock = threading.Lock()
        self.max_concurrency = 0
        self._active = 0

    def __enter__(self):
        if not self._lock.acquire(blocking=False):
            raise BackendError(ErrorCode.REENTRANT_INFERENCE, "infer() is already running")
        self._active += 1
        self.max_concurrency = max(self.max_concurrency, self._active)
        return self

    def __exit__(self, *exc):
        self._active -= 1
        self._lock.release()
        return False


class Backend(ABC):
    def __init__(self, config: BackendConfig, device: ResolvedDevice, precision: PrecisionPolicy):
        self.config = config
        self.device = device
        self.precision = precision
        self.guard = ReentrancyGuard()

    @property
    @abstractmethod
    def model_label(self) -> str:
        """Identifier recorded as ResultDocument.model."""

    def infer(self, prompt: str, image: RasterImage, spec: TaskSpec) -> BackendResult:
        """Blocking generation. Never returns a partially populated result."""
        image.validate()
        with self.guard:
            try:
                result = self._infer(prompt, image, spec)
                validate_output(spec.output_kind, result.parsed_output)
                return result
            except Florence2Error:
                raise
            except Exception as e:
                logger.error(f"Inference failed for {spec.token}: {e}")
                raise BackendError(ErrorCode.INFERENCE_FAILURE, str(e)) from e

    @abstractmethod
    def _infer(self, prompt: str, image: RasterImage, spec: TaskSpec) -> BackendResult:
        ...

    def close(self) -> None:
        pass


class MockBackend(Backend):
    """
    Pure function of (task token, width, height, checksum) plus a fixed,
    injected latency. Thread-safe apart from the shared reentrancy guard.
    """

    def __init__(self, config: BackendConfig, device: ResolvedDevice,
                 precision: PrecisionPolicy, clock: Optional[Clock] = None):
        super().__init__(config, device, precision)
        self.clock = clock or MonotonicClock()
        self.latency_s = config.mock_latency_s
        self.calls = 0

    @property
    def model_label(self) -> str:
        return MOCK_MODEL_ID

    def _infer(self, prompt: str, image: RasterImage, spec: TaskSpec) -> BackendResult:
        self.calls += 1
        started = self.clock.monotonic()
        self.clock.sleep(self.latency_s)
        output = mock_output(spec.output_kind, image.width, image.height, image.checksum())
        elapsed = self.clock.monotonic() - started
        return BackendResult(
            raw_text=f"{spec.token}{output!r}",
            parsed_output=output,
            inference_time=max(elapsed, 1e-6),
        )


def mock_output(kind: OutputKind, width: int, height: int, checksum: str) -> dict:
    x1, y1, x2, y2 = 0.25 * width, 0.25 * height, 0.75 * width, 0.75 * height
    if kind == OutputKind.TEXT:
        return {"text": f"mock caption {checksum[:8]}"}
    if kind == OutputKind.BOXES_LABELS:
        return {"bboxes": [[x1, y1, x2, y2]], "labels": ["mock"]}
    if kind == OutputKind.QUAD_BOXES_TEXT:
        return {"quad_boxes": [[x1, y1, x2, y1, x2, y2, x1, y2]], "labels": ["mock"]}
    if kind == OutputKind.POLYGONS_LABELS:
        return {"polygons": [[x1, y1, x2, y1, x2, y2, x1, y2]], "labels": ["mock"]}
    return {"bboxes": [[x1, y1, x2, y2]], "texts": ["mock region"]}


class Florence2Backend(Backend):
    """Upstream Florence-2 through transformers (trust_remote_code)."""

    def __init__(self, config: BackendConfig, device: ResolvedDevice, precision: PrecisionPolicy):
        super().__init__(config, device, precision)
        try:
            import torch
            from transformers import AutoModelForCausalLM, AutoProcessor
        except ImportError as e:
            raise BackendError(ErrorCode.MODEL_NOT_FOUND, f"model runtime not installed: {e}") from e

        self.commit = resolve_revision(config.model_id, config.revision,
                                       cache_dir=config.cache_dir, allow_download=config.allow_download)
        self._torch = torch
        self._dtype = torch.float16 if precision == PrecisionPolicy.REDUCED else torch.float32
        options = {
            "revision": None if self.commit == LOCAL_REVISION else self.commit,
            "cache_dir": config.cache_dir,
            "local_files_only": not config.allow_download,
            "trust_remote_code": True,
        }
        started = time.perf_counter()
        try:
            self._processor = AutoProcessor.from_pretrained(config.model_id, **options)
            model = AutoModelForCausalLM.from_pretrained(
                config.model_id,
                torch_dtype=self._dtype,
                attn_implementation="eager",
                **options,
            )
            self._model = model.to(device.torch_device).eval()
        except torch.cuda.OutOfMemoryError as e:
            raise BackendError(ErrorCode.OUT_OF_MEMORY, str(e)) from e
        except (OSError, ValueError) as e:
            raise BackendError(ErrorCode.MODEL_NOT_FOUND, f"{config.model_id}: {e}") from e
        logger.info(
            f"Loaded {self.model_label} on {device.describe()} "
            f"({precision.value} precision) in {time.perf_counter() - started:.1f}s"
        )

    @property
    def model_label(self) -> str:
        return f"{self.config.model_id}@{self.commit}"

    def _infer(self, prompt: str, image: RasterImage, spec: TaskSpec) -> BackendResult:
        torch = self._torch
        gen = self.config.generation
        started = time.perf_counter()
        try:
            inputs = self._processor(
                text=prompt, images=image.to_pil().convert("RGB"), return_tensors="pt"
            ).to(self.device.torch_device, self._dtype)
            with torch.inference_mode():
                generated_ids = self._model.generate(
                    input_ids=inputs["input_ids"],
                    pixel_values=inputs["pixel_values"],
                    max_new_tokens=gen.max_new_tokens,
                    num_beams=gen.num_beams,
                    do_sample=gen.sampling_enabled,
                )
        except torch.cuda.OutOfMemoryError as e:
            raise BackendError(ErrorCode.OUT_OF_MEMORY, str(e)) from e
        raw_text = self._processor.batch_decode(generated_ids, skip_special_tokens=False)[0]
        parsed = self._processor.post_process_generation(
            raw_text, task=spec.token, image_size=(image.width, image.height)
        )
        output = shape_output(spec.output_kind, parsed.get(spec.token), image.width, image.height)
        return BackendResult(
            raw_text=raw_text,
            parsed_output=output,
            inference_time=max(time.perf_counter() - started, 1e-6),
        )

    def close(self) -> None:
        del self._model
        if self.device.is_gpu:
            self._torch.cuda.empty_cache()


def _looks_like_path(model_id: str) -> bool:
    return model_id.startswith((".", "/", "~")) or os.sep in model_id.replace("/", "", 1)


def is_commit_hash(revision: str) -> bool:
    return bool(_COMMIT_HASH.match(revision or ""))


def resolve_revision(model_id: str, revision: str, cache_dir: Optional[str] = None,
                     allow_download: bool = False) -> str:
    """
    Commit hash that a branch, tag or hash points at for a hub model.

    Reads the Hugging Face cache, or the hub when downloads are allowed.
    Local model directories resolve to LOCAL_REVISION.
    """
    if _looks_like_path(model_id):
        return LOCAL_REVISION
    if is_commit_hash(revision):
        return revision
    try:
        from huggingface_hub import snapshot_download
    except ImportError as e:
        raise BackendError(ErrorCode.MODEL_NOT_FOUND, f"model runtime not installed: {e}") from e
    try:
        snapshot = snapshot_download(model_id, revision=revision, cache_dir=cache_dir,
                                     local_files_only=not allow_download)
    except (OSError, ValueError) as e:
        raise BackendError(ErrorCode.MODEL_NOT_FOUND, f"{model_id}@{revision}: {e}") from e
    commit = os.path.basename(os.path.normpath(snapshot))
    logger.info(f"Resolved {model_id}@{revision} to commit {commit}")
    return commit


def load_backend(config: BackendConfig, probe: Optional[HardwareProbe] = None,
                 clock: Optional[Clock] = None) -> Backend:
    """Resolve device and precision, then build the backend handle."""
    device = select_device(config.device_policy, probe or TorchProbe())
    precision = resolve_precision(config.precision_policy, device)

    if config.is_mock:
        logger.info(f"Using mock backend (latency {config.mock_latency_s * 1000:.0f} ms)")
        return MockBackend(config, device, precision, clock=clock)

    if _looks_like_path(config.model_id) and not os.path.isdir(os.path.expanduser(config.model_id)):
        raise BackendError(ErrorCode.MODEL_NOT_FOUND, f"no model directory at {config.model_id}")
    if config.cache_dir is None and os.environ.get(MODEL_CACHE_ENV):
        config = replace(config, cache_dir=os.environ[MODEL_CACHE_ENV])
    return Florence2Backend(config, device, precision)
