"""Synthetic CPU-GPU device used as ground truth for the estimator stack.

The simulated device hides a closed-form latency law per layer: both
processors follow t(f) = k / f + b, and the interaction gap delta(f_c, f_g)
is piecewise in f_c around a saturation frequency.  Below that frequency
the CPU is too slow to keep the GPU fed, so the gap shrinks steadily as
the CPU speeds up; above it the GPU kernel launches a fixed fraction into
the (now short) CPU window, so the gap follows a shallow law of its own
and typically sits below zero (overlap).

Hidden coefficients are smooth power laws of the layer's MAC count so the
coefficient-generalization stage has something learnable to recover, and
every draw is keyed on (coefficient_seed, layer_type), making a device
fully reproducible from its JSON description.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import (
    DeltaBranch,
    FrequencyGrid,
    LayerConfig,
    LayerSpan,
    LayerType,
    ModelSpec,
    ProfileSample,
    ValidationError,
    mac_count,
    pipeline_spans,
)

DEVICE_SCHEMA_VERSION = 1

# MAC count at which the per-type base coefficients apply unscaled.
REFERENCE_MACS = 1e8

_TYPE_CODE = {
    LayerType.CONVOLUTION: 0,
    LayerType.LINEAR: 1,
    LayerType.TRANSFORMER: 2,
}

DEFAULT_FEATURE_LAW_EXPONENTS = {
    LayerType.CONVOLUTION: 0.80,
    LayerType.LINEAR: 0.85,
    LayerType.TRANSFORMER: 0.72,
}


@dataclass(frozen=True)
class PowerModel:
    """Board power draw: static floor plus a cubic term per processor."""

    p_static_w: float
    a_c_w_per_ghz3: float
    a_g_w_per_ghz3: float

    def power(self, f_c: float, f_g: float) -> float:
        return self.p_static_w + self.a_c_w_per_ghz3 * f_c**3 + self.a_g_w_per_ghz3 * f_g**3

    def to_dict(self) -> dict:
        return {
            "p_static_w": self.p_static_w,
            "a_c_w_per_ghz3": self.a_c_w_per_ghz3,
            "a_g_w_per_ghz3": self.a_g_w_per_ghz3,
        }

    @staticmethod
    def from_dict(data: dict) -> "PowerModel":
        return PowerModel(
            float(data["p_static_w"]),
            float(data["a_c_w_per_ghz3"]),
            float(data["a_g_w_per_ghz3"]),
        )


def measure_power(power_model: PowerModel, f_c: float, f_g: float) -> float:
    """Board power (W) at a frequency pair."""
    return power_model.power(f_c, f_g)


@dataclass(frozen=True)
class GroundTruthLayerModel:
    """The device's true latency law for one layer config."""

    k_c: float
    b_c: float
    k_g: float
    b_g: float
    delta_uns: DeltaBranch
    delta_sat: DeltaBranch
    breakpoint: float

    def cpu_ms(self, f_c: float) -> float:
        return self.k_c / f_c + self.b_c

    def gpu_ms(self, f_g: float) -> float:
        return self.k_g / f_g + self.b_g

    def delta_of(self, f_c: float, f_g: float) -> float:
        """Interaction gap; the breakpoint itself belongs to the unsaturated side."""
        branch = self.delta_uns if f_c <= self.breakpoint else self.delta_sat
        return branch.evaluate(f_c, f_g)

    def total_ms(self, f_c: float, f_g: float) -> float:
        return self.cpu_ms(f_c) + self.gpu_ms(f_g) + self.delta_of(f_c, f_g)

    def coefficient_dict(self) -> dict:
        return {
            "k_c": self.k_c,
            "b_c": self.b_c,
            "k_g": self.k_g,
            "b_g": self.b_g,
            "delta_uns": self.delta_uns.to_dict(),
            "delta_sat": self.delta_sat.to_dict(),
            "breakpoint": self.breakpoint,
        }


@dataclass(frozen=True)
class DeviceConfig:
    """Everything needed to rebuild a synthetic device deterministically."""

    name: str
    grid: FrequencyGrid
    power: PowerModel
    jitter_sigma: float
    coefficient_seed: int
    feature_law_exponents: dict[LayerType, float] = field(
        default_factory=lambda: dict(DEFAULT_FEATURE_LAW_EXPONENTS)
    )

    def __post_init__(self) -> None:
        if self.jitter_sigma < 0:
            raise ValidationError("jitter_sigma must be non-negative")
        for layer_type, exponent in self.feature_law_exponents.items():
            if exponent <= 0:
                raise ValidationError(f"feature law exponent for {layer_type} must be positive")

    def to_dict(self) -> dict:
        return {
            "schema_version": DEVICE_SCHEMA_VERSION,
            "name": self.name,
            "units": {"frequency": "GHz", "time": "ms", "power": "W"},
            "grid": self.grid.to_dict(),
            "power": self.power.to_dict(),
            "jitter_sigma": self.jitter_sigma,
            "coefficient_seed": self.coefficient_seed,
            "feature_law_exponents": {
                t.value: e for t, e in self.feature_law_exponents.items()
            },
        }

    @staticmethod
    def from_dict(data: dict) -> "DeviceConfig":
        version = data.get("schema_version")
        if version != DEVICE_SCHEMA_VERSION:
            raise ValidationError(
                f"unsupported device schema version {version!r} (expected {DEVICE_SCHEMA_VERSION})"
            )
        return DeviceConfig(
            name=str(data["name"]),
            grid=FrequencyGrid.from_dict(data["grid"]),
            power=PowerModel.from_dict(data["power"]),
            jitter_sigma=float(data["jitter_sigma"]),
            coefficient_seed=int(data["coefficient_seed"]),
            feature_law_exponents={
                LayerType(t): float(e) for t, e in data["feature_law_exponents"].items()
            },
        )


@dataclass(frozen=True)
class _TypeLaws:
    """Per layer-type hidden law parameters drawn once from the device seed."""

    tau_c: float
    tau_g: float
    b_c: float
    b_g: float
    launch_fraction: float
    launch_floor: float
    sat_gpu_ratio: float
    uns_cpu_ratio: float
    uns_gpu_ratio: float
    branch_gap: float
    breakpoint: float


def _draw_type_laws(device: DeviceConfig, layer_type: LayerType) -> _TypeLaws:
    rng = np.random.default_rng(
        np.random.SeedSequence([int(device.coefficient_seed), _TYPE_CODE[layer_type]])
    )
    tau_c = float(rng.uniform(0.4, 2.5))
    ratio = float(rng.uniform(0.8, 4.0))
    b_c = float(rng.uniform(0.05, 0.3))
    b_g = float(rng.uniform(0.08, 0.5))
    launch_fraction = float(rng.uniform(0.2, 0.45))
    launch_floor = float(rng.uniform(0.03, 0.1))
    sat_gpu_ratio = float(rng.uniform(0.005, 0.02))
    uns_cpu_ratio = float(rng.uniform(0.35, 0.8))
    uns_gpu_ratio = float(rng.uniform(0.01, 0.03))
    branch_gap = float(rng.uniform(0.0, 0.05))
    cpu_levels = device.grid.cpu_levels
    n = len(cpu_levels)
    lo = math.ceil(0.2 * (n - 1))
    hi = math.floor(0.8 * (n - 1))
    hi = max(hi, lo)
    idx = int(rng.integers(lo, hi + 1))
    # Each side of the split needs at least two sampled levels to be
    # fittable, so keep the breakpoint away from both grid ends.
    idx = min(max(idx, 1), max(1, n - 3)) if n > 2 else min(idx, n - 1)
    return _TypeLaws(
        tau_c=tau_c,
        tau_g=tau_c * ratio,
        b_c=b_c,
        b_g=b_g,
        launch_fraction=launch_fraction,
        launch_floor=launch_floor,
        sat_gpu_ratio=sat_gpu_ratio,
        uns_cpu_ratio=uns_cpu_ratio,
        uns_gpu_ratio=uns_gpu_ratio,
        branch_gap=branch_gap,
        breakpoint=cpu_levels[idx],
    )


def generate_ground_truth(
    layer_config: LayerConfig, device: DeviceConfig
) -> GroundTruthLayerModel:
    """Deterministic hidden latency law for one layer on one device.

    Both k coefficients scale as (MACs / REFERENCE_MACS) ** gamma with the
    device's per-type exponent; offsets are per-type constants.  The
    saturated branch is anchored to the CPU window: the GPU kernel starts a
    launch-fraction into the host's dispatch work, which keeps the gap
    within -cpu_ms at every grid point (the GPU never starts before its
    own layer's CPU work does).  The unsaturated branch is pinned to meet
    the saturated one at the breakpoint from above, within a few percent,
    at mid-grid GPU frequency.
    """
    laws = _draw_type_laws(device, layer_config.layer_type)
    gamma = device.feature_law_exponents[layer_config.layer_type]
    scale = (mac_count(layer_config) / REFERENCE_MACS) ** gamma
    k_c = laws.tau_c * scale
    k_g = laws.tau_g * scale

    grid = device.grid
    f_hat = laws.breakpoint
    f_gmid = grid.gpu_levels[len(grid.gpu_levels) // 2]
    f_cmax = grid.cpu_levels[-1]
    f_gmax = grid.gpu_levels[-1]
    gpu_gap = 1.0 / f_gmid - 1.0 / f_gmax  # > 0

    lam = laws.launch_fraction
    # Saturated side: delta = (lam - 1) * k_c / f_c + k_sg / f_g + b_s.
    k_sc = (lam - 1.0) * k_c
    k_sg = laws.sat_gpu_ratio * k_g
    if gpu_gap > 0:
        cap = 0.75 * (lam * k_c / f_cmax + laws.launch_floor) / gpu_gap
        k_sg = min(k_sg, cap)
    b_s = laws.launch_floor - laws.b_c - k_sg / f_gmid

    # Value both branches share (up to the gap) at (f_hat, f_gmid).
    v_sat = (lam - 1.0) * k_c / f_hat + laws.launch_floor - laws.b_c
    k_uc = laws.uns_cpu_ratio * k_c
    k_ug = laws.uns_gpu_ratio * k_g
    if gpu_gap > 0:
        cap = 0.75 * (lam * k_c / f_hat + laws.launch_floor) / gpu_gap
        k_ug = min(k_ug, cap)
    b_u = v_sat + laws.branch_gap * abs(v_sat) - k_uc / f_hat - k_ug / f_gmid

    return GroundTruthLayerModel(
        k_c=k_c,
        b_c=laws.b_c,
        k_g=k_g,
        b_g=laws.b_g,
        delta_uns=DeltaBranch(k_uc, k_ug, b_u),
        delta_sat=DeltaBranch(k_sc, k_sg, b_s),
        breakpoint=f_hat,
    )


def _jitter_triplet(rng: np.random.Generator | None, sigma: float) -> tuple[float, float, float]:
    if sigma <= 0:
        return (1.0, 1.0, 1.0)
    if rng is None:
        raise ValueError("an rng is required when jitter_sigma > 0")
    j = rng.lognormal(0.0, sigma, size=3)
    return (float(j[0]), float(j[1]), float(j[2]))


def simulate_layer(
    model: GroundTruthLayerModel,
    layer_config: LayerConfig,
    f_c: float,
    f_g: float,
    *,
    jitter_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    grid: FrequencyGrid | None = None,
) -> ProfileSample:
    """One isolated measurement of a layer at a frequency pair.

    Each of the three components gets its own multiplicative LogNormal(0,
    sigma) jitter draw; with sigma = 0 the sample is the exact law and the
    call is a pure function.
    """
    if grid is not None and not grid.contains(f_c, f_g):
        raise ValidationError(f"frequency pair ({f_c}, {f_g}) GHz is not on the device grid")
    j_c, j_g, j_d = _jitter_triplet(rng, jitter_sigma)
    cpu_ms = model.cpu_ms(f_c) * j_c
    gpu_ms = model.gpu_ms(f_g) * j_g
    delta_ms = model.delta_of(f_c, f_g) * j_d
    return ProfileSample(
        layer_config=layer_config,
        f_c=f_c,
        f_g=f_g,
        cpu_ms=cpu_ms,
        gpu_ms=gpu_ms,
        delta_ms=delta_ms,
        total_ms=cpu_ms + gpu_ms + delta_ms,
    )


@dataclass(frozen=True)
class SimTrace:
    """Per-layer spans of one simulated inference plus run summary."""

    spans: tuple[LayerSpan, ...]
    total_ms: float
    avg_power_w: float

    def rows(self) -> list[tuple[int, float, float, float, float]]:
        return [
            (i + 1, s.cpu_start, s.cpu_end, s.gpu_start, s.gpu_end)
            for i, s in enumerate(self.spans)
        ]


def simulate_model(
    spec: ModelSpec,
    f_c: float,
    f_g: float,
    device: DeviceConfig,
    *,
    disturbance: float = 0.0,
    rng: np.random.Generator | None = None,
    models: dict[str, GroundTruthLayerModel] | None = None,
) -> SimTrace:
    """Run a whole model once on the simulated device.

    The CPU dispatches layers back to back; each layer's GPU kernel starts
    at cpu_end + delta unless the GPU is still busy with the previous
    kernel.  A disturbance load factor stretches CPU and GPU durations by
    (1 + load); the interaction gap is left alone.
    """
    if not device.grid.contains(f_c, f_g):
        raise ValidationError(f"frequency pair ({f_c}, {f_g}) GHz is not on the device grid")
    if disturbance < 0:
        raise ValidationError("disturbance load factor must be non-negative")
    stretch = 1.0 + disturbance
    durations = []
    for layer in spec.layers:
        key = layer.canonical_key
        if models is not None and key in models:
            model = models[key]
        else:
            model = generate_ground_truth(layer, device)
            if models is not None:
                models[key] = model
        j_c, j_g, j_d = _jitter_triplet(rng, device.jitter_sigma)
        durations.append(
            (
                model.cpu_ms(f_c) * j_c * stretch,
                model.gpu_ms(f_g) * j_g * stretch,
                model.delta_of(f_c, f_g) * j_d,
            )
        )
    spans = pipeline_spans(durations)
    total = spans[-1].gpu_end - spans[0].cpu_start
    return SimTrace(spans, total, measure_power(device.power, f_c, f_g))


class SimulatedDevice:
    """Convenience wrapper: a device config, a ground-truth cache, and an RNG.

    Each instance owns its RNG and is independent of every other instance;
    nothing here is shared, so separate devices may run on separate threads.
    """

    def __init__(self, config: DeviceConfig, seed: int | None = None):
        self.config = config
        self._models: dict[str, GroundTruthLayerModel] = {}
        self._rng = np.random.default_rng(
            config.coefficient_seed if seed is None else seed
        )

    @property
    def device_id(self) -> str:
        return self.config.name

    @property
    def grid(self) -> FrequencyGrid:
        return self.config.grid

    @property
    def power_model(self) -> PowerModel:
        return self.config.power

    def ground_truth(self, layer_config: LayerConfig) -> GroundTruthLayerModel:
        key = layer_config.canonical_key
        model = self._models.get(key)
        if model is None:
            model = generate_ground_truth(layer_config, self.config)
            self._models[key] = model
        return model

    def power(self, f_c: float, f_g: float) -> float:
        return measure_power(self.config.power, f_c, f_g)

    def profile_sample(
        self, layer_config: LayerConfig, f_c: float, f_g: float,
        rng: np.random.Generator | None = None,
    ) -> ProfileSample:
        return simulate_layer(
            self.ground_truth(layer_config),
            layer_config,
            f_c,
            f_g,
            jitter_sigma=self.config.jitter_sigma,
            rng=rng if rng is not None else self._rng,
            grid=self.config.grid,
        )

    def sample_mean(
        self,
        layer_config: LayerConfig,
        f_c: float,
        f_g: float,
        iterations: int,
        rng: np.random.Generator | None = None,
    ) -> ProfileSample:
        """Mean of `iterations` repeated measurements at one grid point.

        Averaging each field over multiplicative jitter is done with one
        vectorized draw; the result is the same arithmetic mean a loop of
        profile_sample calls would produce.
        """
        if iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if not self.config.grid.contains(f_c, f_g):
            raise ValidationError(
                f"frequency pair ({f_c}, {f_g}) GHz is not on the device grid"
            )
        model = self.ground_truth(layer_config)
        cpu_ms = model.cpu_ms(f_c)
        gpu_ms = model.gpu_ms(f_g)
        delta_ms = model.delta_of(f_c, f_g)
        sigma = self.config.jitter_sigma
        if sigma > 0:
            use = rng if rng is not None else self._rng
            j = use.lognormal(0.0, sigma, size=(iterations, 3))
            means = j.mean(axis=0)
            cpu_ms *= float(means[0])
            gpu_ms *= float(means[1])
            delta_ms *= float(means[2])
        return ProfileSample(
            layer_config=layer_config,
            f_c=f_c,
            f_g=f_g,
            cpu_ms=cpu_ms,
            gpu_ms=gpu_ms,
            delta_ms=delta_ms,
            total_ms=cpu_ms + gpu_ms + delta_ms,
        )

    def run_model(
        self,
        spec: ModelSpec,
        f_c: float,
        f_g: float,
        *,
        disturbance: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> SimTrace:
        return simulate_model(
            spec,
            f_c,
            f_g,
            self.config,
            disturbance=disturbance,
            rng=rng if rng is not None else self._rng,
            models=self._models,
        )


def make_device(
    *,
    seed: int,
    cpu_levels: int = 29,
    gpu_levels: int = 11,
    cpu_range_ghz: tuple[float, float] = (0.1, 2.2),
    gpu_range_ghz: tuple[float, float] = (0.3, 1.3),
    jitter_sigma: float = 0.03,
    power: PowerModel | None = None,
    name: str | None = None,
) -> DeviceConfig:
    """Build a device config with evenly spaced frequency levels."""
    if cpu_levels < 2 or gpu_levels < 2:
        raise ValidationError("a device needs at least two levels per processor")
    grid = FrequencyGrid(
        tuple(float(f) for f in np.linspace(cpu_range_ghz[0], cpu_range_ghz[1], cpu_levels)),
        tuple(float(f) for f in np.linspace(gpu_range_ghz[0], gpu_range_ghz[1], gpu_levels)),
    )
    return DeviceConfig(
        name=name or f"synthetic-seed{seed}-{cpu_levels}x{gpu_levels}",
        grid=grid,
        power=power or PowerModel(p_static_w=4.0, a_c_w_per_ghz3=1.0, a_g_w_per_ghz3=7.0),
        jitter_sigma=jitter_sigma,
        coefficient_seed=seed,
    )


def save_device(config: DeviceConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


def load_device(path) -> DeviceConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return DeviceConfig.from_dict(json.load(fh))
