"""
Throughput bench for continuous mode.

Replays a repeatable image stream (synthetic frames or a recorded bag) into
the node at a fixed rate and reports min/avg/max FPS over sliding windows of
completed inferences, one report per (device, model) cell.

Usage:
    florence2_bench run --config bench.yaml --out-dir reports/
    florence2_bench table reports/*.json --reference --csv table.csv
"""

import argparse
import csv
import io
import json
import logging
import os
import platform
import re
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path
from statistics import fmean
from typing import Iterator, Optional, Protocol

import numpy as np
import yaml

from .clock import MonotonicClock, VirtualClock
from .contract import RasterImage, Stamp
from .errors import ConfigError, ErrorCode, Florence2Error
from .inference_backend import (
    BackendConfig,
    DevicePolicy,
    HardwareProbe,
    PrecisionPolicy,
    load_backend,
)
from .node_core import InferenceEngine, NodeConfig
from .task_registry import TaskRegistry, default_registry

logger = logging.getLogger(__name__)

ADVISORY_BAND = 0.30
CAMERA_RATE_HZ = 30.0
# input ticks per mock latency when the rate is derived
OVERDRIVE_FACTOR = 20.0
STREAM_EPOCH = 1_700_000_000.0


@dataclass(frozen=True)
class BenchConfig:
    task_token: str = "<OD>"
    text_input: str = ""
    model_id: str = "mock"
    device_policy: str = "auto"
    precision: str = "auto"
    mock_latency_s: float = 0.1
    # stream
    bag_path: Optional[str] = None
    image_topic: str = "/camera/image_raw"
    width: int = 640
    height: int = 480
    frame_count: int = 0  # 0 replays the stream until enough outputs arrived
    rate_hz: Optional[float] = None  # None: camera rate, or overdrive the mock backend
    seed: int = 0
    distinct_frames: int = 16
    # measurement
    warmup_frames: int = 20
    measure_frames: int = 100
    window: int = 10
    startup_deadline_s: float = 120.0
    virtual_time: bool = True  # mock backend only
    driver: str = "engine"  # engine | ros
    node_name: str = "/florence2_node"

    def __post_init__(self):
        if not 1 <= self.window <= self.measure_frames:
            raise ConfigError(
                f"need measure_frames >= window >= 1, got window={self.window} "
                f"measure_frames={self.measure_frames}"
            )
        if self.warmup_frames < 0:
            raise ConfigError("warmup_frames must be >= 0")
        if self.rate_hz is not None and self.rate_hz <= 0:
            raise ConfigError("rate_hz must be > 0")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("width and height must be > 0")
        if self.frame_count < 0 or self.distinct_frames < 1:
            raise ConfigError("frame_count must be >= 0 and distinct_frames >= 1")
        if self.driver not in ("engine", "ros"):
            raise ConfigError(f"driver must be engine or ros, got {self.driver!r}")

    @property
    def stream_rate_hz(self) -> float:
        """Input rate. Without an explicit rate the mock backend is overdriven so its FPS tracks 1/latency."""
        if self.rate_hz is not None:
            return self.rate_hz
        if self.model_id == "mock" and self.mock_latency_s > 0:
            return max(CAMERA_RATE_HZ, OVERDRIVE_FACTOR / self.mock_latency_s)
        return CAMERA_RATE_HZ

    @property
    def outputs_needed(self) -> int:
        return self.warmup_frames + self.measure_frames + 1

    @property
    def uses_virtual_time(self) -> bool:
        return self.virtual_time and self.model_id == "mock" and self.driver == "engine"


def load_bench_configs(path) -> list[BenchConfig]:
    """
    One BenchConfig per cell. A `models:` list expands into one cell per
    model; every other key is a BenchConfig field shared by all cells.
    """
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    models = data.pop("models", None)
    known = set(BenchConfig.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown bench settings: {', '.join(unknown)}")
    base = BenchConfig(**data)
    if not models:
        return [base]
    return [replace(base, model_id=str(model)) for model in models]


# -------------------------
# FPS statistics
# -------------------------

@dataclass(frozen=True)
class FpsStats:
    fps_min: float
    fps_avg: float
    fps_max: float
    samples: tuple


def window_fps(completion_times: list, window: int) -> FpsStats:
    """FPS over every run of `window` consecutive completion intervals."""
    samples = []
    for k in range(len(completion_times) - window):
        span = completion_times[k + window] - completion_times[k]
        if span > 0:
            samples.append(window / span)
    if not samples:
        raise Florence2Error(
            ErrorCode.STREAM_EMPTY,
            f"{len(completion_times)} outputs are not enough for one {window}-frame window",
        )
    return FpsStats(min(samples), fmean(samples), max(samples), tuple(samples))


@dataclass
class BenchReport:
    task_token: str
    model_id: str
    device: str
    fps_min: float
    fps_avg: float
    fps_max: float
    frames_processed: int
    frames_dropped: int
    frames_sent: int
    window: int
    environment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BenchReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{_slug(self.device)}__{_slug(self.model_id)}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "BenchReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower() or "unknown"


# -------------------------
# Streams
# -------------------------

class SyntheticStream:
    """Seeded pseudo-random rgb8 frames, stamped at the configured rate."""

    def __init__(self, width: int = 640, height: int = 480, frame_count: int = 0,
                 rate_hz: float = 30.0, seed: int = 0, distinct_frames: int = 16):
        rng = np.random.default_rng(seed)
        self._pool = [
            RasterImage.from_array(rng.integers(0, 256, (height, width, 3), dtype=np.uint8),
                                   frame_id="bench_camera")
            for _ in range(min(distinct_frames, frame_count or distinct_frames))
        ]
        self.frame_count = frame_count
        self.rate_hz = rate_hz

    def __iter__(self) -> Iterator[RasterImage]:
        i = 0
        while not self.frame_count or i < self.frame_count:
            stamp = Stamp.from_seconds(STREAM_EPOCH + i / self.rate_hz)
            yield replace(self._pool[i % len(self._pool)], stamp=stamp)
            i += 1


class BagStream:
    """Image messages from one topic of a recorded bag, replayed in order."""

    def __init__(self, path: str, topic: str, frame_count: int = 0):
        if not os.path.exists(path):
            raise Florence2Error(ErrorCode.STREAM_EMPTY, f"no bag at {path}")
        self.path = path
        self.topic = topic
        self.frame_count = frame_count

    def _read_once(self) -> Iterator[RasterImage]:
        import rosbag2_py
        from rclpy.serialization import deserialize_message
        from sensor_msgs.msg import Image

        from .ros2_adapter import convert_image_in

        reader = rosbag2_py.SequentialReader()
        reader.open(
            rosbag2_py.StorageOptions(uri=self.path, storage_id=""),
            rosbag2_py.ConverterOptions(input_serialization_format="cdr",
                                        output_serialization_format="cdr"),
        )
        reader.set_filter(rosbag2_py.StorageFilter(topics=[self.topic]))
        while reader.has_next():
            _, data, _ = reader.read_next()
            yield convert_image_in(deserialize_message(data, Image))

    def __iter__(self) -> Iterator[RasterImage]:
        sent = 0
        while True:
            passed = 0
            for image in self._read_once():
                yield image
                sent += 1
                passed += 1
                if self.frame_count and sent >= self.frame_count:
                    return
            if passed == 0:
                if sent == 0:
                    raise Florence2Error(ErrorCode.STREAM_EMPTY, f"{self.topic} has no images in {self.path}")
                return


def open_stream(cfg: BenchConfig):
    if cfg.bag_path:
        return BagStream(cfg.bag_path, cfg.image_topic, cfg.frame_count)
    return SyntheticStream(cfg.width, cfg.height, cfg.frame_count, cfg.stream_rate_hz,
                           cfg.seed, cfg.distinct_frames)


# -------------------------
# Drivers
# -------------------------

@dataclass
class DriverResult:
    completion_times: list
    frames_sent: int
    frames_dropped: int
    device: str
    model_label: str


class Driver(Protocol):
    def run(self, stream, cfg: BenchConfig) -> DriverResult: ...


class EngineDriver:
    """Feeds an in-process engine; virtual time for the mock backend, wall time otherwise."""

    def __init__(self, registry: Optional[TaskRegistry] = None, probe: Optional[HardwareProbe] = None):
        self.registry = registry or default_registry()
        self.probe = probe

    def run(self, stream, cfg: BenchConfig) -> DriverResult:
        clock = VirtualClock(epoch=STREAM_EPOCH) if cfg.uses_virtual_time else MonotonicClock()
        backend_config = BackendConfig(
            model_id=cfg.model_id,
            device_policy=DevicePolicy.parse(cfg.device_policy),
            precision_policy=PrecisionPolicy(cfg.precision),
            mock_latency_s=cfg.mock_latency_s,
        )
        backend = load_backend(backend_config, self.probe, clock)
        config = NodeConfig(
            backend=backend_config,
            continuous_task=cfg.task_token,
            continuous_text_input=cfg.text_input,
            publish_annotated=False,
        )
        engine = InferenceEngine(config, self.registry, backend, clock)
        completions = []
        engine.add_output_listener(lambda outputs: completions.append(outputs.finished_at))

        try:
            if cfg.uses_virtual_time:
                sent = self._run_virtual(engine, clock, stream, cfg, completions)
            else:
                sent = self._run_wall(engine, stream, cfg, completions)
        finally:
            backend.close()
        return DriverResult(
            completion_times=completions,
            frames_sent=sent,
            frames_dropped=engine.stats().frames_dropped,
            device=backend.device.describe(),
            model_label=backend.model_label,
        )

    @staticmethod
    def _run_virtual(engine, clock: VirtualClock, stream, cfg: BenchConfig, completions: list) -> int:
        frames = iter(stream)
        period = 1.0 / cfg.stream_rate_hz
        start = clock.monotonic()
        sent = [0]

        def deliver():
            frame = next(frames, None)
            if frame is None:
                return
            engine.on_image(frame)
            sent[0] += 1
            if len(completions) < cfg.outputs_needed:
                clock.call_at(start + sent[0] * period, deliver)

        clock.call_at(start, deliver)
        while len(completions) < cfg.outputs_needed:
            due = clock.next_due()
            if due is None:
                break
            clock.advance_to(due)
            while engine.process_next():
                pass
        return sent[0]

    @staticmethod
    def _run_wall(engine, stream, cfg: BenchConfig, completions: list) -> int:
        period = 1.0 / cfg.stream_rate_hz
        sent = 0
        engine.start()
        try:
            start = time.monotonic()
            for frame in stream:
                if len(completions) >= cfg.outputs_needed:
                    break
                if not completions and time.monotonic() - start > cfg.startup_deadline_s:
                    raise Florence2Error(ErrorCode.NODE_NOT_PROCESSING,
                                         f"no output within {cfg.startup_deadline_s:.0f}s")
                delay = start + sent * period - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                engine.on_image(frame)
                sent += 1
            # let the last accepted frame finish
            deadline = time.monotonic() + cfg.startup_deadline_s
            while engine.lane_busy and time.monotonic() < deadline:
                time.sleep(0.01)
        finally:
            engine.stop()
        return sent


class RosDriver:
    """Publishes frames to a running node and times its results_json output."""

    def __init__(self, node_name: str = "/florence2_node"):
        self.node_name = node_name.rstrip("/")

    def run(self, stream, cfg: BenchConfig) -> DriverResult:
        import rclpy
        from rclpy.qos import qos_profile_sensor_data
        from sensor_msgs.msg import Image
        from std_msgs.msg import String

        from .ros2_adapter import convert_image_out

        if not rclpy.ok():
            rclpy.init()
        node = rclpy.create_node("florence2_bench")
        completions, models, stats = [], [], {}

        def on_result(msg):
            completions.append(time.monotonic())
            if not models:
                models.append(json.loads(msg.data).get("model", cfg.model_id))

        def on_stats(msg):
            stats.update(json.loads(msg.data))

        publisher = node.create_publisher(Image, cfg.image_topic, qos_profile_sensor_data)
        node.create_subscription(String, f"{self.node_name}/results_json", on_result, 10)
        node.create_subscription(String, f"{self.node_name}/stats", on_stats, 10)

        period = 1.0 / cfg.stream_rate_hz
        sent = 0
        try:
            start = time.monotonic()
            for frame in stream:
                if len(completions) >= cfg.outputs_needed:
                    break
                if not completions and time.monotonic() - start > cfg.startup_deadline_s:
                    raise Florence2Error(ErrorCode.NODE_NOT_PROCESSING,
                                         f"{self.node_name} published nothing within "
                                         f"{cfg.startup_deadline_s:.0f}s")
                publisher.publish(convert_image_out(frame))
                sent += 1
                next_at = start + sent * period
                while time.monotonic() < next_at:
                    rclpy.spin_once(node, timeout_sec=max(0.0, next_at - time.monotonic()))
        finally:
            node.destroy_node()

        dropped = int(stats.get("frames_dropped", max(0, sent - len(completions))))
        return DriverResult(completions, sent, dropped, stats.get("device", cfg.device_policy),
                            models[0] if models else cfg.model_id)


# -------------------------
# Running a cell
# -------------------------

def _version(package: str) -> str:
    try:
        return metadata.version(package)
    except metadata.PackageNotFoundError:
        return "not installed"


def environment_metadata() -> dict:
    """Runtime and driver versions; GPU drivers differ between machines."""
    env = {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": _version("numpy"),
        "torch": _version("torch"),
        "transformers": _version("transformers"),
        "ros_distro": os.environ.get("ROS_DISTRO", ""),
    }
    try:
        import torch

        env["cuda_runtime"] = torch.version.cuda or ""
        if torch.cuda.is_available():
            env["gpu"] = torch.cuda.get_device_name(0)
    except ImportError:
        pass
    try:
        out = subprocess.run(
            ["nvidia-smi", "--query-gpu=driver_version", "--format=csv,noheader"],
            capture_output=True, text=True, timeout=5, check=True,
        )
        env["nvidia_driver"] = out.stdout.strip().splitlines()[0]
    except (OSError, subprocess.SubprocessError, IndexError):
        pass
    return env


def make_driver(cfg: BenchConfig) -> Driver:
    if cfg.driver == "ros":
        return RosDriver(cfg.node_name)
    return EngineDriver()


def run_bench(cfg: BenchConfig, driver: Optional[Driver] = None,
              environment: Optional[dict] = None) -> BenchReport:
    driver = driver or make_driver(cfg)
    logger.info(f"Bench cell: {cfg.model_id} on {cfg.device_policy}, task {cfg.task_token}, "
                f"{cfg.stream_rate_hz:g} Hz input")
    result = driver.run(open_stream(cfg), cfg)
    if result.frames_sent == 0:
        raise Florence2Error(ErrorCode.STREAM_EMPTY, "the stream produced no frames")
    if not result.completion_times:
        raise Florence2Error(ErrorCode.NODE_NOT_PROCESSING, "no outputs were published")

    measured = result.completion_times[cfg.warmup_frames:cfg.outputs_needed]
    stats = window_fps(measured, cfg.window)
    report = BenchReport(
        task_token=cfg.task_token,
        model_id=result.model_label,
        device=result.device,
        fps_min=stats.fps_min,
        fps_avg=stats.fps_avg,
        fps_max=stats.fps_max,
        frames_processed=len(result.completion_times),
        frames_dropped=result.frames_dropped,
        frames_sent=result.frames_sent,
        window=cfg.window,
        environment=environment if environment is not None else environment_metadata(),
    )
    logger.info(f"  {report.device} {report.model_id}: "
                f"{report.fps_min:.2f}/{report.fps_avg:.2f}/{report.fps_max:.2f} FPS")
    return report


# -------------------------
# Table
# -------------------------

@dataclass(frozen=True)
class ReferenceRow:
    device: str
    match: str
    base: tuple
    large: tuple


# Published measurements for <OD>, FPS min/avg/max.
REFERENCE_ROWS = (
    ReferenceRow("GTX 1060 Mobile", "1060", (5.50, 5.81, 5.99), (2.44, 2.50, 2.56)),
    ReferenceRow("RTX 3060 Mobile", "3060", (9.23, 9.75, 10.1), (4.05, 4.21, 4.29)),
    ReferenceRow("RTX 3080 Ti Desktop", "3080 ti", (25.3, 26.6, 27.5), (11.1, 11.5, 11.7)),
)

BASE_COLUMN = "Base model"
LARGE_COLUMN = "Large model"


def model_column(model_id: str) -> str:
    name = model_id.lower()
    if "large" in name:
        return LARGE_COLUMN
    if "base" in name:
        return BASE_COLUMN
    return model_id


def _column_order(columns) -> list:
    fixed = [c for c in (BASE_COLUMN, LARGE_COLUMN) if c in columns]
    return fixed + sorted(c for c in columns if c not in fixed)


def _triplet(values) -> str:
    return "/".join(f"{v:.2f}" for v in values)


@dataclass(frozen=True)
class ReferenceComparison:
    device: str
    reference_device: str
    column: str
    measured_avg: float
    reference_avg: float

    @property
    def ratio(self) -> float:
        return self.measured_avg / self.reference_avg

    @property
    def within_band(self) -> bool:
        return abs(self.ratio - 1.0) <= ADVISORY_BAND

    def describe(self) -> str:
        verdict = "within" if self.within_band else "outside"
        return (f"advisory: {self.device} {self.column} avg {self.measured_avg:.2f} vs "
                f"{self.reference_device} {self.reference_avg:.2f} "
                f"({self.ratio:.2f}x, {verdict} +/-{ADVISORY_BAND:.0%})")


def compare_to_reference(report: BenchReport) -> Optional[ReferenceComparison]:
    """Match a report to a reference row by device name and model size."""
    column = model_column(report.model_id)
    if column not in (BASE_COLUMN, LARGE_COLUMN):
        return None
    device = report.device.lower()
    for row in sorted(REFERENCE_ROWS, key=lambda r: -len(r.match)):
        if row.match in device:
            triplet = row.base if column == BASE_COLUMN else row.large
            return ReferenceComparison(report.device, row.device, column, report.fps_avg, triplet[1])
    return None


def ordering_violations(reports: list[BenchReport]) -> list[str]:
    """Devices where the base model was not faster than the large one."""
    by_device: dict = {}
    for report in reports:
        by_device.setdefault(report.device, {})[model_column(report.model_id)] = report.fps_avg
    return sorted(
        device for device, cols in by_device.items()
        if BASE_COLUMN in cols and LARGE_COLUMN in cols and cols[BASE_COLUMN] <= cols[LARGE_COLUMN]
    )


@dataclass(frozen=True)
class TableOutput:
    csv: str
    text: str


def emit_table(reports: list[BenchReport], include_reference: bool = False) -> TableOutput:
    """One row per device, a min/avg/max triplet per model column."""
    if not reports:
        raise ValueError("emit_table needs at least one report")

    cells: dict = {}
    for report in sorted(reports, key=lambda r: (r.device, r.model_id)):
        key = (report.device, model_column(report.model_id))
        if key in cells:
            logger.warning(f"Duplicate cell {key}; keeping the first report")
            continue
        cells[key] = (report.fps_min, report.fps_avg, report.fps_max)

    columns = {col for _, col in cells}
    if include_reference:
        columns |= {BASE_COLUMN, LARGE_COLUMN}
    columns = _column_order(columns)

    header = ["Device", "Source"] + [f"{c} (min/avg/max)" for c in columns]
    rows = []
    for device in sorted({device for device, _ in cells}):
        rows.append([device, "measured"] + [
            _triplet(cells[(device, c)]) if (device, c) in cells else "-" for c in columns
        ])
    if include_reference:
        for ref in REFERENCE_ROWS:
            values = {BASE_COLUMN: ref.base, LARGE_COLUMN: ref.large}
            rows.append([ref.device, "reference"] + [
                _triplet(values[c]) if c in values else "-" for c in columns
            ])

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)

    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in [header] + rows]
    if include_reference:
        for report in sorted(reports, key=lambda r: (r.device, r.model_id)):
            comparison = compare_to_reference(report)
            if comparison is not None:
                lines.append(comparison.describe())
    return TableOutput(csv=buffer.getvalue(), text="\n".join(lines) + "\n")


# -------------------------
# CLI
# -------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="florence2_bench", description="Continuous-mode FPS bench.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every cell of a bench config")
    run.add_argument("--config", required=True, help="YAML file with BenchConfig fields")
    run.add_argument("--out-dir", default="bench_reports")
    run.add_argument("--driver", choices=["engine", "ros"], help="override the config's driver")

    table = sub.add_parser("table", help="tabulate report files")
    table.add_argument("reports", nargs="+")
    table.add_argument("--reference", action="store_true", help="add the published reference rows")
    table.add_argument("--csv", help="also write the CSV table to this file")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO)
    args = build_parser().parse_args(argv)

    try:
        if args.command == "run":
            configs = load_bench_configs(args.config)
            if args.driver:
                configs = [replace(c, driver=args.driver) for c in configs]
            reports = []
            for cfg in configs:
                report = run_bench(cfg)
                path = report.save(args.out_dir)
                logger.info(f"Wrote {path}")
                reports.append(report)
        else:
            reports = [BenchReport.load(p) for p in args.reports]
    except Florence2Error as e:
        logger.error(e.describe())
        return 1

    output = emit_table(reports, include_reference=getattr(args, "reference", False))
    print(output.text, end="")
    if getattr(args, "csv", None):
        Path(args.csv).write_text(output.csv, encoding="utf-8")
    for device in ordering_violations(reports):
        logger.warning(f"{device}: base model was not faster than large model")
    return 0


if __name__ == "__main__":
    sys.exit(main())
