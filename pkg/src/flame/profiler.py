"""Sparse profiling campaigns and dataset persistence.

A campaign measures every unique layer config of interest at a strided
subset of the frequency grid, averaging repeated measurements per point,
and records the result as a ProfileDataset.  Datasets persist as a CSV of
averaged samples plus a JSON sidecar carrying the grid, the plan, and
provenance, so external tools can plot the CSV directly.

A profile source is anything with a `device_id` and a
`sample_mean(config, f_c, f_g, iterations, rng)` method returning a
ProfileSample: the synthetic device simulator is the live source, and
ReplaySource serves a previously saved dataset back, point by point.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .core import (
    FrequencyGrid,
    LayerConfig,
    LayerType,
    ProfileSample,
    ValidationError,
)
from .layerfit import workload_fingerprint

DATASET_SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "layer_type",
    "config_json",
    "f_c_ghz",
    "f_g_ghz",
    "context",
    "cpu_ms",
    "gpu_ms",
    "delta_ms",
    "total_ms",
) + tuple(f"feature_{i}" for i in range(10))


class CampaignError(RuntimeError):
    """A profile source failed mid-campaign.

    Carries the dataset assembled so far, flagged incomplete, so partial
    work is inspectable.
    """

    def __init__(self, message: str, partial: "ProfileDataset") -> None:
        super().__init__(message)
        self.partial = partial


class DatasetFormatError(ValueError):
    """A dataset file failed to parse or violated an invariant."""


@dataclass(frozen=True)
class SamplingPlan:
    """How densely to sample the grid and how often to repeat each point."""

    cpu_stride: int = 1
    gpu_stride: int = 1
    context_stride: int = 90
    iterations: int = 1
    context_max: int = 1024

    def __post_init__(self) -> None:
        for name in ("cpu_stride", "gpu_stride", "context_stride", "iterations", "context_max"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValidationError(f"plan field '{name}' must be an integer >= 1, got {value!r}")

    def to_dict(self) -> dict:
        return {
            "cpu_stride": self.cpu_stride,
            "gpu_stride": self.gpu_stride,
            "context_stride": self.context_stride,
            "iterations": self.iterations,
            "context_max": self.context_max,
        }

    @staticmethod
    def from_dict(data: dict) -> "SamplingPlan":
        return SamplingPlan(
            cpu_stride=int(data["cpu_stride"]),
            gpu_stride=int(data["gpu_stride"]),
            context_stride=int(data["context_stride"]),
            iterations=int(data["iterations"]),
            context_max=int(data["context_max"]),
        )


def _strided_indices(count: int, stride: int) -> list[int]:
    # Endpoints are always sampled: fitting interpolates far better than
    # it extrapolates, and the breakpoint scan needs the top bracket.
    idx = set(range(0, count, stride))
    idx.add(count - 1)
    return sorted(idx)


def plan_points(grid: FrequencyGrid, plan: SamplingPlan) -> list[tuple[float, float]]:
    """Strided frequency pairs, CPU-major, endpoints forced on each axis."""
    cpu_idx = _strided_indices(len(grid.cpu_levels), plan.cpu_stride)
    gpu_idx = _strided_indices(len(grid.gpu_levels), plan.gpu_stride)
    return [
        (grid.cpu_levels[ci], grid.gpu_levels[gi])
        for ci in cpu_idx
        for gi in gpu_idx
    ]


def context_points(plan: SamplingPlan) -> list[int]:
    """Context lengths to sweep for transformer configs.

    Always includes 1 and context_max so the feature regression is
    anchored at both extremes.
    """
    points = set(range(1, plan.context_max + 1, plan.context_stride))
    points.add(plan.context_max)
    return sorted(points)


@dataclass(frozen=True)
class ProfileDataset:
    """Averaged profile samples plus the plan and grid that produced them."""

    device_id: str
    grid: FrequencyGrid
    plan: SamplingPlan
    samples: tuple[ProfileSample, ...]
    created_at: str
    complete: bool = True

    def __post_init__(self) -> None:
        seen: set[tuple] = set()
        for i, sample in enumerate(self.samples):
            if not grid_holds(self.grid, sample):
                raise ValidationError(
                    f"sample {i} frequency pair ({sample.f_c}, {sample.f_g}) GHz is off-grid"
                )
            if sample.key in seen:
                raise ValidationError(f"sample {i} duplicates key {sample.key}")
            seen.add(sample.key)

    def __len__(self) -> int:
        return len(self.samples)


def grid_holds(grid: FrequencyGrid, sample: ProfileSample) -> bool:
    return grid.contains(sample.f_c, sample.f_g)


def _campaign_configs(configs: Sequence[LayerConfig], plan: SamplingPlan) -> list[LayerConfig]:
    """Dedupe configs and expand transformers across the context sweep."""
    expanded: list[LayerConfig] = []
    seen: set[str] = set()
    for config in configs:
        if config.layer_type is LayerType.TRANSFORMER:
            variants = [config.with_context(n) for n in context_points(plan)]
        else:
            variants = [config]
        for variant in variants:
            key = variant.canonical_key
            if key not in seen:
                seen.add(key)
                expanded.append(variant)
    return expanded


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_campaign(
    source,
    configs: Sequence[LayerConfig],
    grid: FrequencyGrid,
    plan: SamplingPlan,
    rng=None,
) -> ProfileDataset:
    """Measure every (config, planned point), averaging plan.iterations.

    Points run in a fixed order (configs as given, contexts ascending,
    pairs CPU-major) so a seeded source yields identical datasets.  A
    source failure raises CampaignError carrying the partial dataset.
    """
    points = plan_points(grid, plan)
    samples: list[ProfileSample] = []
    for config in _campaign_configs(configs, plan):
        fingerprint = workload_fingerprint(config)
        for f_c, f_g in points:
            try:
                sample = source.sample_mean(config, f_c, f_g, plan.iterations, rng)
            except Exception as exc:
                partial = ProfileDataset(
                    device_id=source.device_id,
                    grid=grid,
                    plan=plan,
                    samples=tuple(samples),
                    created_at=_timestamp(),
                    complete=False,
                )
                raise CampaignError(
                    f"profile source failed at config {config.canonical_key} "
                    f"point ({f_c}, {f_g}) GHz: {exc}",
                    partial,
                ) from exc
            samples.append(replace(sample, features=fingerprint.values))
    return ProfileDataset(
        device_id=source.device_id,
        grid=grid,
        plan=plan,
        samples=tuple(samples),
        created_at=_timestamp(),
    )


class ReplaySource:
    """Serves a saved dataset as a profile source, point by point.

    iterations and rng are accepted for interface parity and ignored: the
    stored samples are already averaged.
    """

    def __init__(self, dataset: ProfileDataset) -> None:
        self._dataset = dataset
        self._index = {s.key: s for s in dataset.samples}

    @property
    def device_id(self) -> str:
        return self._dataset.device_id

    @property
    def grid(self) -> FrequencyGrid:
        return self._dataset.grid

    def sample_mean(
        self, config: LayerConfig, f_c: float, f_g: float, iterations: int, rng=None
    ) -> ProfileSample:
        key = (config.canonical_key, f_c, f_g)
        try:
            return self._index[key]
        except KeyError:
            raise LookupError(
                f"replay dataset holds no sample for config {config.canonical_key} "
                f"at ({f_c}, {f_g}) GHz"
            )


# ---------------------------------------------------------------------------
# Persistence: CSV of samples + JSON sidecar.


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def _format_float(value: float) -> str:
    return repr(float(value))


def save_dataset(dataset: ProfileDataset, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for sample in dataset.samples:
            config = sample.layer_config
            features = sample.features or tuple([0.0] * 10)
            writer.writerow(
                [
                    config.layer_type.value,
                    config.canonical_key,
                    _format_float(sample.f_c),
                    _format_float(sample.f_g),
                    "" if config.context is None else str(config.context),
                    _format_float(sample.cpu_ms),
                    _format_float(sample.gpu_ms),
                    _format_float(sample.delta_ms),
                    _format_float(sample.total_ms),
                ]
                + [_format_float(v) for v in features]
            )
    meta = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "device_id": dataset.device_id,
        "units": {"frequency": "GHz", "time": "ms"},
        "grid": dataset.grid.to_dict(),
        "plan": dataset.plan.to_dict(),
        "created_at": dataset.created_at,
        "complete": dataset.complete,
        "sample_count": len(dataset.samples),
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def _parse_row(row: list[str], line_no: int, offset: int) -> ProfileSample:
    if len(row) != len(CSV_COLUMNS):
        raise DatasetFormatError(
            f"line {line_no} (byte offset {offset}): expected {len(CSV_COLUMNS)} "
            f"columns, got {len(row)}"
        )
    try:
        config = LayerConfig.from_dict(json.loads(row[1]))
        f_c = float(row[2])
        f_g = float(row[3])
        cpu_ms = float(row[5])
        gpu_ms = float(row[6])
        delta_ms = float(row[7])
        total_ms = float(row[8])
        features = tuple(float(v) for v in row[9:])
        return ProfileSample(
            layer_config=config,
            f_c=f_c,
            f_g=f_g,
            cpu_ms=cpu_ms,
            gpu_ms=gpu_ms,
            delta_ms=delta_ms,
            total_ms=total_ms,
            features=features,
        )
    except (ValueError, KeyError) as exc:
        raise DatasetFormatError(f"line {line_no} (byte offset {offset}): {exc}") from exc


def load_dataset(path) -> ProfileDataset:
    path = Path(path)
    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise DatasetFormatError(f"missing dataset sidecar {meta_file}")
    with open(meta_file, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    version = meta.get("schema_version")
    if version != DATASET_SCHEMA_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset schema version {version!r} (expected {DATASET_SCHEMA_VERSION})"
        )
    grid = FrequencyGrid.from_dict(meta["grid"])
    plan = SamplingPlan.from_dict(meta["plan"])

    samples: list[ProfileSample] = []
    offset = 0
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.readlines()
    if not lines:
        raise DatasetFormatError("dataset CSV is empty (byte offset 0)")
    header = next(csv.reader([lines[0]]))
    if tuple(header) != CSV_COLUMNS:
        raise DatasetFormatError(f"line 1 (byte offset 0): unexpected header {header}")
    offset = len(lines[0].encode("utf-8"))
    for line_no, line in enumerate(lines[1:], start=2):
        if line.strip():
            row = next(csv.reader([line]))
            samples.append(_parse_row(row, line_no, offset))
        offset += len(line.encode("utf-8"))

    expected = meta.get("sample_count")
    if expected is not None and expected != len(samples):
        raise DatasetFormatError(
            f"sidecar promises {expected} samples but CSV holds {len(samples)} "
            f"(file may be truncated at byte offset {offset})"
        )
    try:
        return ProfileDataset(
            device_id=str(meta["device_id"]),
            grid=grid,
            plan=plan,
            samples=tuple(samples),
            created_at=str(meta["created_at"]),
            complete=bool(meta.get("complete", True)),
        )
    except ValidationError as exc:
        raise DatasetFormatError(str(exc)) from exc
