"""Shared domain types for the latency toolkit.

One unit system is used everywhere, without exception: processor
frequencies in GHz, durations in milliseconds, power in watts.  The
inverse-frequency coefficients (the ``k`` values of the per-processor
latency law ``t(f) = k / f + b``) therefore carry GHz*ms.  Durations are
bare floats; only the CPU-GPU interaction gap ``delta`` may be negative
(negative means the GPU kernel started before the host finished its
dispatch work, i.e. the two processors overlapped).

All types in this module are immutable value objects and safe to share
across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterator, Sequence

# Absolute slack allowed between a recorded total and cpu + gpu + delta.
RECORD_TOLERANCE_MS = 1e-6

# Activations and weights are accounted as fp32.
BYTES_PER_ELEMENT = 4


class ValidationError(ValueError):
    """A model spec, sample, or file failed a structural check."""


class LayerType(str, Enum):
    CONVOLUTION = "convolution"
    LINEAR = "linear"
    TRANSFORMER = "transformer"


# Canonical parameter order per layer type.  validate_model_spec rewrites
# every params dict into this order so serialized specs are stable.
REQUIRED_PARAMS: dict[LayerType, tuple[str, ...]] = {
    LayerType.CONVOLUTION: (
        "input_height",
        "input_width",
        "input_channels",
        "output_channels",
        "kernel_size",
        "stride",
    ),
    LayerType.LINEAR: ("input_features", "output_features"),
    LayerType.TRANSFORMER: ("embed_dim", "num_heads", "context_length"),
}


@dataclass(frozen=True)
class LayerConfig:
    """One layer of a model: a type plus its integer shape parameters."""

    layer_type: LayerType
    params: dict[str, int]

    @cached_property
    def canonical_key(self) -> str:
        """Stable string key for dedup and store lookup."""
        return json.dumps(
            {"layer_type": self.layer_type.value, "params": dict(sorted(self.params.items()))},
            separators=(",", ":"),
        )

    @property
    def context(self) -> int:
        """Context length for transformer layers, 0 otherwise."""
        return int(self.params.get("context_length", 0))

    def with_context(self, context: int) -> "LayerConfig":
        if self.layer_type is not LayerType.TRANSFORMER:
            return self
        params = dict(self.params)
        params["context_length"] = int(context)
        return LayerConfig(self.layer_type, params)

    def to_dict(self) -> dict:
        return {"layer_type": self.layer_type.value, "params": dict(self.params)}

    @staticmethod
    def from_dict(data: dict) -> "LayerConfig":
        try:
            layer_type = LayerType(data["layer_type"])
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"unknown layer type in {data!r}") from exc
        params = data.get("params")
        if not isinstance(params, dict):
            raise ValidationError("layer config is missing a params mapping")
        return LayerConfig(layer_type, dict(params))


@dataclass(frozen=True)
class ModelSpec:
    """An ordered stack of layers to be timed end to end."""

    name: str
    layers: tuple[LayerConfig, ...]

    def unique_configs(self) -> list[LayerConfig]:
        """Distinct layer configs in first-appearance order."""
        seen: dict[str, LayerConfig] = {}
        for layer in self.layers:
            seen.setdefault(layer.canonical_key, layer)
        return list(seen.values())

    def layer_types(self) -> set[LayerType]:
        return {layer.layer_type for layer in self.layers}

    def with_context(self, context: int) -> "ModelSpec":
        """Copy of the spec with every transformer layer at ``context``."""
        return ModelSpec(self.name, tuple(l.with_context(context) for l in self.layers))

    def to_dict(self) -> dict:
        return {"name": self.name, "layers": [l.to_dict() for l in self.layers]}

    @staticmethod
    def from_dict(data: dict) -> "ModelSpec":
        if not isinstance(data, dict) or "layers" not in data:
            raise ValidationError("model spec must be an object with a 'layers' list")
        layers = tuple(LayerConfig.from_dict(entry) for entry in data["layers"])
        return ModelSpec(str(data.get("name", "model")), layers)


def validate_model_spec(spec: ModelSpec) -> ModelSpec:
    """Check a spec structurally and return it with params in canonical order.

    Raises ValidationError naming the offending layer index and key.
    """
    if not spec.layers:
        raise ValidationError("model spec has no layers")
    normalized = []
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer.layer_type, LayerType):
            raise ValidationError(f"layer {i}: unknown layer type {layer.layer_type!r}")
        required = REQUIRED_PARAMS[layer.layer_type]
        for key in required:
            if key not in layer.params:
                raise ValidationError(
                    f"layer {i} ({layer.layer_type.value}): missing key '{key}'"
                )
        for key, value in layer.params.items():
            if key not in required:
                raise ValidationError(
                    f"layer {i} ({layer.layer_type.value}): unexpected key '{key}'"
                )
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise ValidationError(
                    f"layer {i} ({layer.layer_type.value}): key '{key}' must be a "
                    f"positive integer, got {value!r}"
                )
        normalized.append(LayerConfig(layer.layer_type, {k: layer.params[k] for k in required}))
    return ModelSpec(spec.name, tuple(normalized))


@dataclass(frozen=True)
class FrequencyGrid:
    """The discrete CPU and GPU frequency levels a device exposes, in GHz."""

    cpu_levels: tuple[float, ...]
    gpu_levels: tuple[float, ...]

    def __post_init__(self) -> None:
        for name, levels in (("cpu", self.cpu_levels), ("gpu", self.gpu_levels)):
            if not levels:
                raise ValidationError(f"{name} level list is empty")
            if any(f <= 0 for f in levels):
                raise ValidationError(f"{name} levels must be positive GHz values")
            if any(b <= a for a, b in zip(levels, levels[1:])):
                raise ValidationError(f"{name} levels must be strictly ascending")

    def pairs(self) -> Iterator[tuple[float, float]]:
        """All (f_c, f_g) combinations, CPU-major, both axes ascending."""
        for f_c in self.cpu_levels:
            for f_g in self.gpu_levels:
                yield (f_c, f_g)

    @property
    def max_pair(self) -> tuple[float, float]:
        return (self.cpu_levels[-1], self.gpu_levels[-1])

    @property
    def min_pair(self) -> tuple[float, float]:
        return (self.cpu_levels[0], self.gpu_levels[0])

    def contains(self, f_c: float, f_g: float, tol: float = 1e-9) -> bool:
        on_cpu = any(abs(f_c - f) <= tol for f in self.cpu_levels)
        on_gpu = any(abs(f_g - f) <= tol for f in self.gpu_levels)
        return on_cpu and on_gpu

    def nearest_cpu_level(self, f_c: float) -> float:
        return min(self.cpu_levels, key=lambda level: abs(level - f_c))

    def to_dict(self) -> dict:
        return {
            "cpu_levels_ghz": list(self.cpu_levels),
            "gpu_levels_ghz": list(self.gpu_levels),
        }

    @staticmethod
    def from_dict(data: dict) -> "FrequencyGrid":
        try:
            return FrequencyGrid(
                tuple(float(f) for f in data["cpu_levels_ghz"]),
                tuple(float(f) for f in data["gpu_levels_ghz"]),
            )
        except KeyError as exc:
            raise ValidationError(f"frequency grid is missing {exc}") from exc


def frequency_pair_count(grid: FrequencyGrid) -> int:
    """Number of distinct (f_c, f_g) combinations on the grid."""
    return len(grid.cpu_levels) * len(grid.gpu_levels)


@dataclass(frozen=True)
class DeltaBranch:
    """One branch of the piecewise CPU-GPU interaction model.

    delta(f_c, f_g) = k_c / f_c + k_g / f_g + b, in ms.  Coefficients are
    signed; a negative value means overlap deepens in that direction.
    """

    k_c: float
    k_g: float
    b: float

    def evaluate(self, f_c: float, f_g: float) -> float:
        return self.k_c / f_c + self.k_g / f_g + self.b

    def to_dict(self) -> dict:
        return {"k_c": self.k_c, "k_g": self.k_g, "b": self.b}

    @staticmethod
    def from_dict(data: dict) -> "DeltaBranch":
        return DeltaBranch(float(data["k_c"]), float(data["k_g"]), float(data["b"]))


@dataclass(frozen=True)
class ProfileSample:
    """One averaged measurement of a layer at a frequency pair.

    total_ms must close against cpu_ms + gpu_ms + delta_ms; the recording
    tolerance is RECORD_TOLERANCE_MS.  ``features`` optionally carries the
    workload fingerprint measured alongside the timing.
    """

    layer_config: LayerConfig
    f_c: float
    f_g: float
    cpu_ms: float
    gpu_ms: float
    delta_ms: float
    total_ms: float
    features: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.f_c <= 0 or self.f_g <= 0:
            raise ValidationError("sample frequencies must be positive")
        if self.cpu_ms < 0 or self.gpu_ms < 0 or self.total_ms < 0:
            raise ValidationError("cpu, gpu, and total durations must be non-negative")
        closure = self.cpu_ms + self.gpu_ms + self.delta_ms
        if abs(closure - self.total_ms) > RECORD_TOLERANCE_MS:
            raise ValidationError(
                f"sample does not close: cpu+gpu+delta={closure!r} vs total={self.total_ms!r}"
            )

    @property
    def key(self) -> tuple[str, float, float]:
        return (self.layer_config.canonical_key, self.f_c, self.f_g)


@dataclass(frozen=True)
class LayerSpan:
    """Start and end timestamps (ms) of one layer on each processor."""

    cpu_start: float
    cpu_end: float
    gpu_start: float
    gpu_end: float


def pipeline_spans(durations: Sequence[tuple[float, float, float]]) -> tuple[LayerSpan, ...]:
    """Lay (cpu_ms, gpu_ms, delta_ms) triples onto a shared two-processor clock.

    The CPU runs layers back to back from t=0.  Each layer's GPU kernel
    becomes ready at cpu_end + delta (early when delta is negative) but
    cannot start before the single GPU finishes the previous kernel, and
    never before t=0.
    """
    spans: list[LayerSpan] = []
    cpu_clock = 0.0
    gpu_free = 0.0
    for cpu_ms, gpu_ms, delta_ms in durations:
        cpu_start = cpu_clock
        cpu_clock += cpu_ms
        gpu_start = max(cpu_clock + delta_ms, gpu_free, 0.0)
        gpu_end = gpu_start + gpu_ms
        spans.append(LayerSpan(cpu_start, cpu_clock, gpu_start, gpu_end))
        gpu_free = gpu_end
    return tuple(spans)


# ---------------------------------------------------------------------------
# Workload arithmetic shared by the simulator and the feature extractor.


def conv_output_hw(config: LayerConfig) -> tuple[int, int]:
    """Output spatial size of a same-padded convolution."""
    p = config.params
    s = p["stride"]
    return (-(-p["input_height"] // s), -(-p["input_width"] // s))


def mac_count(config: LayerConfig) -> int:
    """Multiply-accumulate operations performed by one layer."""
    p = config.params
    if config.layer_type is LayerType.CONVOLUTION:
        oh, ow = conv_output_hw(config)
        k = p["kernel_size"]
        return k * k * p["input_channels"] * p["output_channels"] * oh * ow
    if config.layer_type is LayerType.LINEAR:
        return p["input_features"] * p["output_features"]
    # Transformer block at full context n with embed d: four d*d projections,
    # score and value mixing at n*n*d each, and a 4x feed-forward.
    n, d = p["context_length"], p["embed_dim"]
    return 12 * n * d * d + 2 * n * n * d


def param_count(config: LayerConfig) -> int:
    p = config.params
    if config.layer_type is LayerType.CONVOLUTION:
        k = p["kernel_size"]
        return k * k * p["input_channels"] * p["output_channels"] + p["output_channels"]
    if config.layer_type is LayerType.LINEAR:
        return p["input_features"] * p["output_features"] + p["output_features"]
    d = p["embed_dim"]
    return 12 * d * d + 9 * d


def input_bytes(config: LayerConfig) -> int:
    p = config.params
    if config.layer_type is LayerType.CONVOLUTION:
        return BYTES_PER_ELEMENT * p["input_height"] * p["input_width"] * p["input_channels"]
    if config.layer_type is LayerType.LINEAR:
        return BYTES_PER_ELEMENT * p["input_features"]
    return BYTES_PER_ELEMENT * p["context_length"] * p["embed_dim"]


def output_bytes(config: LayerConfig) -> int:
    p = config.params
    if config.layer_type is LayerType.CONVOLUTION:
        oh, ow = conv_output_hw(config)
        return BYTES_PER_ELEMENT * oh * ow * p["output_channels"]
    if config.layer_type is LayerType.LINEAR:
        return BYTES_PER_ELEMENT * p["output_features"]
    return BYTES_PER_ELEMENT * p["context_length"] * p["embed_dim"]


def weight_bytes(config: LayerConfig) -> int:
    return BYTES_PER_ELEMENT * param_count(config)


def arithmetic_intensity(config: LayerConfig) -> float:
    """MACs per byte moved (inputs + outputs + weights)."""
    moved = input_bytes(config) + output_bytes(config) + weight_bytes(config)
    return mac_count(config) / moved
