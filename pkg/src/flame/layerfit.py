"""Per-layer latency model fitting and cross-config generalization.

Fitting recovers, per layer config, the coefficients of

    cpu_ms(f_c) = k_c / f_c + b_c
    gpu_ms(f_g) = k_g / f_g + b_g
    delta(f_c, f_g) = k'_c / f_c + k'_g / f_g + b'   (two branches, split in f_c)

from profiled samples by least squares over the 1/f regressor.  The delta
split frequency is found by an exhaustive two-segment scan: every gap
between consecutive sampled CPU levels is tried, each side is fitted
freely, and the split with the smallest summed squared error wins.

Generalization to configs that were never profiled goes through a small
pipeline: analytic raw workload features -> correlation-ranked top-10
selection -> per-feature parser -> per-coefficient regressor.  The default
regressor is ridge regression on log features (log-magnitude targets when
a coefficient has a consistent sign), which matches workloads whose
coefficients follow power laws; a boosted-tree alternative sits behind a
flag for workloads that do not.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    DeltaBranch,
    FrequencyGrid,
    LayerConfig,
    LayerType,
    ValidationError,
    arithmetic_intensity,
    conv_output_hw,
    input_bytes,
    mac_count,
    output_bytes,
    param_count,
    weight_bytes,
)

STORE_SCHEMA_VERSION = 1

FEATURE_COUNT = 10

# Ridge penalty for the log-space linear models.  Small on purpose: the
# feature sets are collinear and near-interpolation is wanted.
RIDGE_ALPHA = 1e-6

_LOG_FLOOR = 1e-12

COEFFICIENT_NAMES = (
    "k_c",
    "b_c",
    "k_g",
    "b_g",
    "uns_k_c",
    "uns_k_g",
    "uns_b",
    "sat_k_c",
    "sat_k_g",
    "sat_b",
    "breakpoint",
)


class FitError(RuntimeError):
    """A model could not be fitted from the data given."""


class UnderdeterminedError(FitError):
    """Not enough distinct operating points to identify the model."""


# ---------------------------------------------------------------------------
# Raw workload features.

RAW_FEATURE_NAMES: dict[LayerType, tuple[str, ...]] = {
    LayerType.CONVOLUTION: (
        "mac_count",
        "param_count",
        "input_bytes",
        "output_bytes",
        "weight_bytes",
        "arithmetic_intensity",
        "kernel_area",
        "kernel_volume",
        "channel_product",
        "output_pixels",
        "output_volume",
        "input_volume",
        "stride",
    ),
    LayerType.LINEAR: (
        "mac_count",
        "param_count",
        "input_bytes",
        "output_bytes",
        "weight_bytes",
        "arithmetic_intensity",
        "input_features",
        "output_features",
        "feature_sum",
        "feature_product",
        "max_features",
        "fan_ratio",
    ),
    LayerType.TRANSFORMER: (
        "mac_count",
        "param_count",
        "input_bytes",
        "output_bytes",
        "weight_bytes",
        "arithmetic_intensity",
        "context_length",
        "embed_dim",
        "num_heads",
        "context_sq_heads",
        "context_embed",
        "score_macs",
        "projection_macs",
        "kv_cache_bytes",
    ),
}


def raw_feature_names(layer_type: LayerType) -> tuple[str, ...]:
    return RAW_FEATURE_NAMES[layer_type]


def featureize(config: LayerConfig) -> np.ndarray:
    """Full analytic workload feature vector for one layer config."""
    p = config.params
    common = [
        float(mac_count(config)),
        float(param_count(config)),
        float(input_bytes(config)),
        float(output_bytes(config)),
        float(weight_bytes(config)),
        float(arithmetic_intensity(config)),
    ]
    if config.layer_type is LayerType.CONVOLUTION:
        oh, ow = conv_output_hw(config)
        k = p["kernel_size"]
        extra = [
            float(k * k),
            float(k * k * p["input_channels"]),
            float(p["input_channels"] * p["output_channels"]),
            float(oh * ow),
            float(oh * ow * p["output_channels"]),
            float(p["input_height"] * p["input_width"] * p["input_channels"]),
            float(p["stride"]),
        ]
    elif config.layer_type is LayerType.LINEAR:
        fin, fout = p["input_features"], p["output_features"]
        extra = [
            float(fin),
            float(fout),
            float(fin + fout),
            float(fin * fout),
            float(max(fin, fout)),
            float(fout / fin),
        ]
    else:
        n, d, h = p["context_length"], p["embed_dim"], p["num_heads"]
        extra = [
            float(n),
            float(d),
            float(h),
            float(n * n * h),
            float(n * d),
            float(2 * n * n * d),
            float(12 * n * d * d),
            float(2 * 4 * n * d),
        ]
    return np.array(common + extra, dtype=float)


# Per-type subset of raw features recorded on every profile sample.
_FINGERPRINT_INDICES: dict[LayerType, tuple[int, ...]] = {
    LayerType.CONVOLUTION: (0, 1, 2, 3, 4, 5, 7, 8, 10, 12),
    LayerType.LINEAR: (0, 1, 2, 3, 4, 5, 6, 7, 9, 11),
    LayerType.TRANSFORMER: (0, 1, 2, 3, 4, 5, 6, 7, 9, 10),
}


@dataclass(frozen=True)
class WorkloadFeatures:
    """A fixed-width bundle of workload descriptors with their names."""

    values: tuple[float, ...]
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.values) != FEATURE_COUNT or len(self.names) != FEATURE_COUNT:
            raise ValidationError(f"expected exactly {FEATURE_COUNT} features")
        if any(v < 0 for v in self.values):
            raise ValidationError("workload features must be non-negative")


def workload_fingerprint(config: LayerConfig) -> WorkloadFeatures:
    """The canonical ten-feature fingerprint recorded with each sample."""
    raw = featureize(config)
    names = RAW_FEATURE_NAMES[config.layer_type]
    idx = _FINGERPRINT_INDICES[config.layer_type]
    return WorkloadFeatures(
        values=tuple(float(raw[i]) for i in idx),
        names=tuple(names[i] for i in idx),
    )


# ---------------------------------------------------------------------------
# Per-config least-squares fits.


def fit_processor_model(samples: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Fit t = k / f + b from (frequency_ghz, duration_ms) pairs.

    A negative fitted k is clamped to zero and b refitted, which keeps
    estimated durations non-increasing in frequency.
    """
    if len(samples) < 2:
        raise UnderdeterminedError("need at least two samples to fit a processor model")
    f = np.array([s[0] for s in samples], dtype=float)
    t = np.array([s[1] for s in samples], dtype=float)
    if np.unique(f).size < 2:
        raise UnderdeterminedError(
            "processor model is underdetermined: all samples share one frequency"
        )
    design = np.column_stack([1.0 / f, np.ones_like(f)])
    coef, *_ = np.linalg.lstsq(design, t, rcond=None)
    k, b = float(coef[0]), float(coef[1])
    if k < 0:
        k = 0.0
        b = float(np.mean(t))
    return k, b


def _branch_lstsq(
    f_c: np.ndarray, f_g: np.ndarray, delta: np.ndarray
) -> tuple[np.ndarray, float]:
    design = np.column_stack([1.0 / f_c, 1.0 / f_g, np.ones_like(f_c)])
    coef, *_ = np.linalg.lstsq(design, delta, rcond=None)
    residual = delta - design @ coef
    return coef, float(residual @ residual)


@dataclass(frozen=True)
class BreakpointResult:
    """Outcome of the two-segment delta split scan."""

    breakpoint: float
    two_branch_sse: float
    single_branch_sse: float
    low_confidence: bool


def detect_breakpoint(samples: Sequence[tuple[float, float, float]]) -> BreakpointResult:
    """Locate the CPU frequency where the interaction gap changes regime.

    samples are (f_c, f_g, delta_ms) rows.  Every split between consecutive
    sampled CPU levels that leaves at least two levels on the unsaturated
    (low frequency) side is scored by the summed SSE of two independently
    fitted branches; the minimum wins and ties go to the lower frequency.
    The returned breakpoint is the highest sampled level of the winning
    unsaturated side.  When splitting barely improves on a single global
    fit (< 5% SSE reduction) the result is flagged low confidence, which is
    what data without a regime change looks like.
    """
    if len(samples) < 3:
        raise UnderdeterminedError("need at least three samples to scan for a breakpoint")
    f_c = np.array([s[0] for s in samples], dtype=float)
    f_g = np.array([s[1] for s in samples], dtype=float)
    delta = np.array([s[2] for s in samples], dtype=float)
    levels = np.unique(f_c)
    if levels.size < 3:
        raise UnderdeterminedError(
            f"breakpoint scan needs >= 3 distinct CPU frequencies, got {levels.size}"
        )
    _, single_sse = _branch_lstsq(f_c, f_g, delta)

    candidates = []
    for i in range(1, levels.size - 1):
        split = float(levels[i])
        low = f_c <= split
        _, sse_lo = _branch_lstsq(f_c[low], f_g[low], delta[low])
        _, sse_hi = _branch_lstsq(f_c[~low], f_g[~low], delta[~low])
        candidates.append((split, sse_lo + sse_hi))
    tol = 1e-9 * max(float(delta @ delta), 1e-30)
    best_level, best_sse = candidates[0]
    for split, sse in candidates[1:]:
        if sse < best_sse - tol:
            best_level, best_sse = split, sse
    improvement = 0.0 if single_sse <= tol else (single_sse - best_sse) / single_sse
    return BreakpointResult(
        breakpoint=best_level,
        two_branch_sse=min(best_sse, single_sse),
        single_branch_sse=single_sse,
        low_confidence=improvement < 0.05,
    )


def fit_delta(
    samples: Sequence[tuple[float, float, float]], breakpoint: float
) -> tuple[DeltaBranch, DeltaBranch]:
    """Fit both interaction-gap branches around a known breakpoint.

    The breakpoint frequency itself belongs to the unsaturated branch.
    Each side must hold at least three samples spanning two CPU and two
    GPU levels, otherwise the branch is underdetermined.
    """
    f_c = np.array([s[0] for s in samples], dtype=float)
    f_g = np.array([s[1] for s in samples], dtype=float)
    delta = np.array([s[2] for s in samples], dtype=float)
    low = f_c <= breakpoint
    branches = []
    for name, mask in (("unsaturated", low), ("saturated", ~low)):
        if mask.sum() < 3 or np.unique(f_c[mask]).size < 2 or np.unique(f_g[mask]).size < 2:
            raise UnderdeterminedError(
                f"{name} branch is underdetermined: needs >= 3 samples spanning "
                f">= 2 CPU and >= 2 GPU levels"
            )
        coef, _ = _branch_lstsq(f_c[mask], f_g[mask], delta[mask])
        branches.append(DeltaBranch(float(coef[0]), float(coef[1]), float(coef[2])))
    return branches[0], branches[1]


@dataclass(frozen=True)
class CoefficientSet:
    """All fitted symbols of one layer config's latency law."""

    k_c: float
    b_c: float
    k_g: float
    b_g: float
    delta_uns: DeltaBranch
    delta_sat: DeltaBranch
    breakpoint: float
    fit_residual_ms: float = 0.0

    def components(self, f_c: float, f_g: float) -> tuple[float, float, float]:
        """(cpu_ms, gpu_ms, delta_ms) at a frequency pair."""
        branch = self.delta_uns if f_c <= self.breakpoint else self.delta_sat
        return (
            self.k_c / f_c + self.b_c,
            self.k_g / f_g + self.b_g,
            branch.evaluate(f_c, f_g),
        )

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.k_c,
                self.b_c,
                self.k_g,
                self.b_g,
                self.delta_uns.k_c,
                self.delta_uns.k_g,
                self.delta_uns.b,
                self.delta_sat.k_c,
                self.delta_sat.k_g,
                self.delta_sat.b,
                self.breakpoint,
            ],
            dtype=float,
        )

    @staticmethod
    def from_vector(vec: Sequence[float], fit_residual_ms: float = 0.0) -> "CoefficientSet":
        v = [float(x) for x in vec]
        return CoefficientSet(
            k_c=max(v[0], 0.0),
            b_c=v[1],
            k_g=max(v[2], 0.0),
            b_g=v[3],
            delta_uns=DeltaBranch(v[4], v[5], v[6]),
            delta_sat=DeltaBranch(v[7], v[8], v[9]),
            breakpoint=v[10],
            fit_residual_ms=fit_residual_ms,
        )

    def to_dict(self) -> dict:
        return {
            "k_c": self.k_c,
            "b_c": self.b_c,
            "k_g": self.k_g,
            "b_g": self.b_g,
            "delta_uns": self.delta_uns.to_dict(),
            "delta_sat": self.delta_sat.to_dict(),
            "breakpoint": self.breakpoint,
            "fit_residual_ms": self.fit_residual_ms,
        }

    @staticmethod
    def from_dict(data: dict) -> "CoefficientSet":
        return CoefficientSet(
            k_c=float(data["k_c"]),
            b_c=float(data["b_c"]),
            k_g=float(data["k_g"]),
            b_g=float(data["b_g"]),
            delta_uns=DeltaBranch.from_dict(data["delta_uns"]),
            delta_sat=DeltaBranch.from_dict(data["delta_sat"]),
            breakpoint=float(data["breakpoint"]),
            fit_residual_ms=float(data.get("fit_residual_ms", 0.0)),
        )


def fit_layer_coefficients(samples: Sequence) -> CoefficientSet:
    """Fit one config's full CoefficientSet from its profile samples."""
    cpu_fit = fit_processor_model([(s.f_c, s.cpu_ms) for s in samples])
    gpu_fit = fit_processor_model([(s.f_g, s.gpu_ms) for s in samples])
    delta_rows = [(s.f_c, s.f_g, s.delta_ms) for s in samples]
    split = detect_breakpoint(delta_rows)
    uns, sat = fit_delta(delta_rows, split.breakpoint)
    coeffs = CoefficientSet(
        k_c=cpu_fit[0],
        b_c=cpu_fit[1],
        k_g=gpu_fit[0],
        b_g=gpu_fit[1],
        delta_uns=uns,
        delta_sat=sat,
        breakpoint=split.breakpoint,
    )
    predicted = np.array(
        [sum(coeffs.components(s.f_c, s.f_g)) for s in samples], dtype=float
    )
    measured = np.array([s.total_ms for s in samples], dtype=float)
    residual = float(np.sqrt(np.mean((predicted - measured) ** 2)))
    return CoefficientSet(
        k_c=coeffs.k_c,
        b_c=coeffs.b_c,
        k_g=coeffs.k_g,
        b_g=coeffs.b_g,
        delta_uns=coeffs.delta_uns,
        delta_sat=coeffs.delta_sat,
        breakpoint=coeffs.breakpoint,
        fit_residual_ms=residual,
    )


# ---------------------------------------------------------------------------
# Feature selection and the generalization pipeline.


@dataclass(frozen=True)
class FeatureSelection:
    """Top raw features for one layer type, ranked by |Pearson r|."""

    layer_type: LayerType
    indices: tuple[int, ...]
    names: tuple[str, ...]
    scores: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "indices": list(self.indices),
            "names": list(self.names),
            "scores": list(self.scores),
        }


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    sx = x.std()
    sy = y.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def select_features(dataset, layer_type: LayerType) -> FeatureSelection:
    """Rank raw features against max-frequency latency across configs.

    Uses each distinct config's total at the highest (f_c, f_g) pair in
    the dataset.  Constant features score zero by convention; ties break
    toward the lower feature index.
    """
    rows = _config_latency_table(dataset, layer_type)
    if len(rows) < 3:
        raise FitError(
            f"feature selection needs >= 3 distinct {layer_type.value} configs, got {len(rows)}"
        )
    raw = np.array([featureize(cfg) for cfg, _ in rows], dtype=float)
    latency = np.array([t for _, t in rows], dtype=float)
    if latency.std() == 0:
        raise FitError("latency has zero variance across configs; correlation is undefined")
    scores = np.array([abs(_pearson(raw[:, j], latency)) for j in range(raw.shape[1])])
    order = np.lexsort((np.arange(scores.size), -scores))[:FEATURE_COUNT]
    names = RAW_FEATURE_NAMES[layer_type]
    return FeatureSelection(
        layer_type=layer_type,
        indices=tuple(int(i) for i in order),
        names=tuple(names[i] for i in order),
        scores=tuple(float(scores[i]) for i in order),
    )


def _config_latency_table(dataset, layer_type: LayerType) -> list[tuple[LayerConfig, float]]:
    """(config, total at the max sampled frequency pair) per distinct config."""
    by_config: dict[str, list] = {}
    keep: dict[str, LayerConfig] = {}
    for sample in dataset.samples:
        if sample.layer_config.layer_type is not layer_type:
            continue
        key = sample.layer_config.canonical_key
        by_config.setdefault(key, []).append(sample)
        keep.setdefault(key, sample.layer_config)
    rows = []
    for key, samples in by_config.items():
        top = max(samples, key=lambda s: (s.f_c, s.f_g))
        rows.append((keep[key], top.total_ms))
    return rows


def _log_features(raw: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(raw, _LOG_FLOOR))


@dataclass(frozen=True)
class RidgeModel:
    """Standardized ridge regression, closed form, deterministic.

    The penalty strength is picked per model by exact leave-one-out
    cross-validation over a fixed ladder; with a handful of collinear
    training configs an unregularized fit would interpolate and
    extrapolate wildly to unseen configs.
    """

    weights: tuple[float, ...]
    intercept: float
    x_mean: tuple[float, ...]
    x_scale: tuple[float, ...]
    alpha: float = RIDGE_ALPHA

    ALPHA_LADDER = (1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)

    @staticmethod
    def fit(x: np.ndarray, y: np.ndarray, alpha: float | None = None) -> "RidgeModel":
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        xs = (x - mean) / scale
        y_mean = float(y.mean())
        centered = y - y_mean
        if alpha is None:
            alpha = RidgeModel._loo_alpha(xs, centered)
        n, p = xs.shape
        design = np.vstack([xs, math.sqrt(alpha) * np.eye(p)])
        target = np.concatenate([centered, np.zeros(p)])
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        return RidgeModel(
            weights=tuple(float(w) for w in coef),
            intercept=y_mean,
            x_mean=tuple(float(m) for m in mean),
            x_scale=tuple(float(s) for s in scale),
            alpha=float(alpha),
        )

    @staticmethod
    def _loo_alpha(xs: np.ndarray, centered: np.ndarray) -> float:
        """Ladder value minimizing exact LOO squared error; ties go small.

        Centered targets keep the (unpenalized) intercept's leverage at a
        flat 1/n, so the shortcut e_i / (1 - h_ii) is exact here.
        """
        n = xs.shape[0]
        u, s, _ = np.linalg.svd(xs, full_matrices=False)
        uty = u.T @ centered
        best_alpha, best_sse = RidgeModel.ALPHA_LADDER[0], math.inf
        for alpha in RidgeModel.ALPHA_LADDER:
            shrink = s**2 / (s**2 + alpha)
            residual = centered - u @ (shrink * uty)
            leverage = 1.0 / n + (u**2) @ shrink
            denom = np.maximum(1.0 - leverage, 1e-12)
            sse = float(np.sum((residual / denom) ** 2))
            if sse < best_sse * (1.0 - 1e-12):
                best_alpha, best_sse = alpha, sse
        return best_alpha

    def predict(self, x: np.ndarray) -> np.ndarray:
        xs = (np.atleast_2d(x) - np.array(self.x_mean)) / np.array(self.x_scale)
        return xs @ np.array(self.weights) + self.intercept

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "intercept": self.intercept,
            "x_mean": list(self.x_mean),
            "x_scale": list(self.x_scale),
            "alpha": self.alpha,
        }

    @staticmethod
    def from_dict(data: dict) -> "RidgeModel":
        return RidgeModel(
            weights=tuple(float(w) for w in data["weights"]),
            intercept=float(data["intercept"]),
            x_mean=tuple(float(m) for m in data["x_mean"]),
            x_scale=tuple(float(s) for s in data["x_scale"]),
            alpha=float(data.get("alpha", RIDGE_ALPHA)),
        )


@dataclass(frozen=True)
class FeatureParser:
    """Maps raw log-features to the selected workload features.

    With analytic features this learns a near-identity projection, but it
    keeps the estimator's input stage decoupled from how features were
    measured, so a store can be reused when raw features come from
    hardware counters instead.
    """

    models: tuple[RidgeModel, ...]

    @staticmethod
    def fit(raw: np.ndarray, selection: FeatureSelection) -> "FeatureParser":
        logs = _log_features(raw)
        models = []
        for idx in selection.indices:
            target = np.log(np.maximum(raw[:, idx], _LOG_FLOOR))
            # The target is one of the inputs, so the projection is exact by
            # construction; cross-validated shrinkage would only distort it.
            models.append(RidgeModel.fit(logs, target, alpha=RIDGE_ALPHA))
        return FeatureParser(models=tuple(models))

    def parse(self, raw: np.ndarray) -> np.ndarray:
        logs = _log_features(np.atleast_2d(raw))
        cols = [np.exp(m.predict(logs)) for m in self.models]
        return np.column_stack(cols)

    def to_dict(self) -> dict:
        return {"models": [m.to_dict() for m in self.models]}

    @staticmethod
    def from_dict(data: dict) -> "FeatureParser":
        return FeatureParser(models=tuple(RidgeModel.from_dict(m) for m in data["models"]))


@dataclass
class CoefficientRegressor:
    """Predicts each latency coefficient from selected workload features.

    mode "ridge" fits log-magnitude targets (with a stored sign) whenever a
    coefficient keeps one strict sign across training configs, and falls
    back to a plain linear target otherwise.  mode "tree" keeps the
    training matrix and rebuilds seeded boosted trees on load.
    """

    mode: str
    target_names: tuple[str, ...]
    log_models: dict[str, RidgeModel] = field(default_factory=dict)
    linear_models: dict[str, RidgeModel] = field(default_factory=dict)
    signs: dict[str, float] = field(default_factory=dict)
    train_x: np.ndarray | None = None
    train_y: np.ndarray | None = None
    _trees: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def fit(features: np.ndarray, targets: np.ndarray, mode: str = "ridge") -> "CoefficientRegressor":
        if mode not in ("ridge", "tree"):
            raise FitError(f"unknown regressor mode {mode!r}")
        reg = CoefficientRegressor(mode=mode, target_names=COEFFICIENT_NAMES)
        logs = _log_features(features)
        if mode == "tree":
            reg.train_x = logs.copy()
            reg.train_y = targets.copy()
            reg._fit_trees()
            return reg
        for j, name in enumerate(COEFFICIENT_NAMES):
            y = targets[:, j]
            if np.all(y > 0):
                reg.signs[name] = 1.0
                reg.log_models[name] = RidgeModel.fit(logs, np.log(y))
            elif np.all(y < 0):
                reg.signs[name] = -1.0
                reg.log_models[name] = RidgeModel.fit(logs, np.log(-y))
            else:
                reg.linear_models[name] = RidgeModel.fit(logs, y)
        return reg

    def _fit_trees(self) -> None:
        from sklearn.ensemble import GradientBoostingRegressor

        self._trees = {}
        for j, name in enumerate(self.target_names):
            model = GradientBoostingRegressor(
                n_estimators=150, max_depth=2, learning_rate=0.1, random_state=0
            )
            model.fit(self.train_x, self.train_y[:, j])
            self._trees[name] = model

    def predict(self, features: np.ndarray) -> np.ndarray:
        logs = _log_features(np.atleast_2d(features))
        out = np.empty((logs.shape[0], len(self.target_names)))
        for j, name in enumerate(self.target_names):
            if self.mode == "tree":
                out[:, j] = self._trees[name].predict(logs)
            elif name in self.log_models:
                out[:, j] = self.signs[name] * np.exp(self.log_models[name].predict(logs))
            else:
                out[:, j] = self.linear_models[name].predict(logs)
        return out

    def to_dict(self) -> dict:
        if self.mode == "tree":
            return {
                "mode": "tree",
                "target_names": list(self.target_names),
                "train_x": self.train_x.tolist(),
                "train_y": self.train_y.tolist(),
            }
        return {
            "mode": "ridge",
            "target_names": list(self.target_names),
            "signs": dict(self.signs),
            "log_models": {k: m.to_dict() for k, m in self.log_models.items()},
            "linear_models": {k: m.to_dict() for k, m in self.linear_models.items()},
        }

    @staticmethod
    def from_dict(data: dict) -> "CoefficientRegressor":
        names = tuple(data["target_names"])
        if data["mode"] == "tree":
            reg = CoefficientRegressor(
                mode="tree",
                target_names=names,
                train_x=np.array(data["train_x"], dtype=float),
                train_y=np.array(data["train_y"], dtype=float),
            )
            reg._fit_trees()
            return reg
        return CoefficientRegressor(
            mode="ridge",
            target_names=names,
            signs={k: float(v) for k, v in data["signs"].items()},
            log_models={k: RidgeModel.from_dict(m) for k, m in data["log_models"].items()},
            linear_models={k: RidgeModel.from_dict(m) for k, m in data["linear_models"].items()},
        )


@dataclass
class LayerTypeEstimator:
    """Latency estimator for every config of one layer type.

    Configs seen during profiling resolve to their directly fitted
    coefficients; unseen configs go through the feature pipeline.  A
    predicted breakpoint is snapped to the nearest CPU grid level.
    """

    layer_type: LayerType
    selection: FeatureSelection
    parser: FeatureParser
    regressor: CoefficientRegressor
    training: dict[str, CoefficientSet]
    cpu_levels: tuple[float, ...]
    regression_max_rel_err: float = 0.0

    def __post_init__(self) -> None:
        self._cache: dict[str, CoefficientSet] = {}

    def coefficients_for(self, config: LayerConfig) -> CoefficientSet:
        key = config.canonical_key
        known = self.training.get(key)
        if known is not None:
            return known
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        raw = featureize(config)
        feats = self.parser.parse(raw)
        vec = self.regressor.predict(feats)[0]
        vec = vec.copy()
        vec[10] = min(self.cpu_levels, key=lambda level: abs(level - vec[10]))
        coeffs = CoefficientSet.from_vector(vec, fit_residual_ms=math.nan)
        self._cache[key] = coeffs
        return coeffs

    def estimate(self, config: LayerConfig, f_c: float, f_g: float) -> tuple[float, float, float, float]:
        cpu_ms, gpu_ms, delta_ms = self.coefficients_for(config).components(f_c, f_g)
        return cpu_ms, gpu_ms, delta_ms, cpu_ms + gpu_ms + delta_ms

    def to_dict(self) -> dict:
        return {
            "layer_type": self.layer_type.value,
            "feature_selector": self.selection.to_dict(),
            "config_parser": self.parser.to_dict(),
            "coeff_regressor": self.regressor.to_dict(),
            "cpu_levels_ghz": list(self.cpu_levels),
            "regression_max_rel_err": self.regression_max_rel_err,
            "training_configs": [
                {
                    "config": json.loads(key),
                    "coefficients": coeffs.to_dict(),
                }
                for key, coeffs in sorted(self.training.items())
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "LayerTypeEstimator":
        layer_type = LayerType(data["layer_type"])
        sel = data["feature_selector"]
        selection = FeatureSelection(
            layer_type=layer_type,
            indices=tuple(int(i) for i in sel["indices"]),
            names=tuple(sel["names"]),
            scores=tuple(float(s) for s in sel["scores"]),
        )
        training = {}
        for entry in data["training_configs"]:
            config = LayerConfig.from_dict(entry["config"])
            training[config.canonical_key] = CoefficientSet.from_dict(entry["coefficients"])
        return LayerTypeEstimator(
            layer_type=layer_type,
            selection=selection,
            parser=FeatureParser.from_dict(data["config_parser"]),
            regressor=CoefficientRegressor.from_dict(data["coeff_regressor"]),
            training=training,
            cpu_levels=tuple(float(f) for f in data["cpu_levels_ghz"]),
            regression_max_rel_err=float(data.get("regression_max_rel_err", 0.0)),
        )


def estimate_layer(
    estimator: LayerTypeEstimator, config: LayerConfig, f_c: float, f_g: float
) -> tuple[float, float, float, float]:
    """(cpu_ms, gpu_ms, delta_ms, total_ms) for one layer at one pair."""
    return estimator.estimate(config, f_c, f_g)


def build_layer_estimator(dataset, layer_type: LayerType, *, regressor: str = "ridge") -> LayerTypeEstimator:
    """Fit per-config coefficients and the generalization pipeline.

    Needs at least three distinct configs of the type in the dataset (a
    transformer context sweep counts each context as a config).
    """
    by_config: dict[str, list] = {}
    configs: dict[str, LayerConfig] = {}
    for sample in dataset.samples:
        if sample.layer_config.layer_type is not layer_type:
            continue
        key = sample.layer_config.canonical_key
        by_config.setdefault(key, []).append(sample)
        configs.setdefault(key, sample.layer_config)
    if len(by_config) < 3:
        raise FitError(
            f"need >= 3 distinct {layer_type.value} configs to build an estimator, "
            f"got {len(by_config)}"
        )
    training: dict[str, CoefficientSet] = {}
    for key, samples in by_config.items():
        training[key] = fit_layer_coefficients(samples)

    selection = select_features(dataset, layer_type)
    keys = sorted(by_config)
    raw = np.array([featureize(configs[k]) for k in keys], dtype=float)
    targets = np.array([training[k].as_vector() for k in keys], dtype=float)
    parser = FeatureParser.fit(raw, selection)
    features = parser.parse(raw)
    reg = CoefficientRegressor.fit(features, targets, mode=regressor)

    # How far regressor predictions sit from the direct fits on the
    # training configs themselves; kept as estimator metadata.  Errors are
    # relative to each coefficient, floored at a thousandth of that
    # coefficient's scale across configs so a zero-crossing intercept does
    # not divide by nothing.
    predicted = reg.predict(features)
    column_scale = np.max(np.abs(targets), axis=0)
    denom = np.maximum(np.abs(targets), 1e-3 * column_scale + 1e-12)
    max_rel = float(np.max(np.abs(predicted - targets) / denom))

    cpu_levels = tuple(sorted({s.f_c for s in dataset.samples}))
    if hasattr(dataset, "grid") and dataset.grid is not None:
        cpu_levels = tuple(dataset.grid.cpu_levels)
    return LayerTypeEstimator(
        layer_type=layer_type,
        selection=selection,
        parser=parser,
        regressor=reg,
        training=training,
        cpu_levels=cpu_levels,
        regression_max_rel_err=max_rel,
    )


@dataclass
class EstimatorStore:
    """All per-type estimators fitted from one dataset, plus provenance."""

    device_id: str
    grid: FrequencyGrid
    estimators: dict[LayerType, LayerTypeEstimator]

    def estimator_for(self, layer_type: LayerType) -> LayerTypeEstimator:
        try:
            return self.estimators[layer_type]
        except KeyError:
            raise FitError(f"store has no estimator for layer type '{layer_type.value}'")

    def to_dict(self) -> dict:
        return {
            "schema_version": STORE_SCHEMA_VERSION,
            "device_id": self.device_id,
            "units": {"frequency": "GHz", "time": "ms"},
            "grid": self.grid.to_dict(),
            "estimators": {
                t.value: est.to_dict() for t, est in sorted(self.estimators.items(), key=lambda kv: kv[0].value)
            },
        }

    @staticmethod
    def from_dict(data: dict) -> "EstimatorStore":
        version = data.get("schema_version")
        if version != STORE_SCHEMA_VERSION:
            raise ValidationError(
                f"unsupported store schema version {version!r} (expected {STORE_SCHEMA_VERSION})"
            )
        return EstimatorStore(
            device_id=str(data["device_id"]),
            grid=FrequencyGrid.from_dict(data["grid"]),
            estimators={
                LayerType(t): LayerTypeEstimator.from_dict(e)
                for t, e in data["estimators"].items()
            },
        )


def build_estimator_store(dataset, *, regressor: str = "ridge") -> EstimatorStore:
    """Build estimators for every layer type present in a dataset."""
    types = sorted({s.layer_config.layer_type for s in dataset.samples}, key=lambda t: t.value)
    if not types:
        raise FitError("dataset holds no samples to fit")
    estimators = {t: build_layer_estimator(dataset, t, regressor=regressor) for t in types}
    return EstimatorStore(device_id=dataset.device_id, grid=dataset.grid, estimators=estimators)


def save_store(store: EstimatorStore, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(store.to_dict(), fh, indent=2)
        fh.write("\n")


def load_store(path) -> EstimatorStore:
    with open(path, "r", encoding="utf-8") as fh:
        return EstimatorStore.from_dict(json.load(fh))
