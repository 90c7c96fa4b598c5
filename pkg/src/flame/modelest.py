"""Full-model latency estimation and online calibration.

Model-level latency is not the sum of layer latencies: the CPU dispatches
layer n+1 while the GPU still runs layer n.  reconstruct_timeline replays
that pipeline from per-layer (cpu_ms, gpu_ms, delta_ms) triples on two
clocks, one contiguous CPU stream and one single GPU queue, and the model
total is the last GPU completion.

Runtime drift (thermal load, co-running tasks) is absorbed by a scalar
corrector delta_t: every recalibration batch compares measured totals with
the raw estimates that produced them and folds the mean residual into an
exponentially weighted moving average.  The corrector applies to model
totals only, never per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .core import LayerSpan, ModelSpec, ValidationError, pipeline_spans
from .layerfit import EstimatorStore

SPAN_TOLERANCE_MS = 1e-9


@dataclass(frozen=True)
class Timeline:
    """Per-layer CPU/GPU spans of one reconstructed inference."""

    spans: tuple[LayerSpan, ...]
    total_ms: float

    def __post_init__(self) -> None:
        if not self.spans:
            raise ValidationError("a timeline needs at least one layer")
        clock = 0.0
        gpu_free = 0.0
        for i, span in enumerate(self.spans):
            if abs(span.cpu_start - clock) > SPAN_TOLERANCE_MS:
                raise ValidationError(f"layer {i + 1} breaks CPU stream contiguity")
            if span.gpu_start < gpu_free - SPAN_TOLERANCE_MS:
                raise ValidationError(f"layer {i + 1} double-books the GPU")
            clock = span.cpu_end
            gpu_free = span.gpu_end
        expected = self.spans[-1].gpu_end - self.spans[0].cpu_start
        if abs(self.total_ms - expected) > SPAN_TOLERANCE_MS:
            raise ValidationError("timeline total disagrees with its spans")

    def rows(self) -> list[tuple[int, float, float, float, float]]:
        return [
            (i + 1, s.cpu_start, s.cpu_end, s.gpu_start, s.gpu_end)
            for i, s in enumerate(self.spans)
        ]


def reconstruct_timeline(
    layer_estimates: Sequence[tuple[float, float, float]]
) -> Timeline:
    """Replay the CPU dispatch stream and GPU queue over layer estimates.

    Input triples are (cpu_ms, gpu_ms, delta_ms) in execution order.  The
    CPU runs back to back from t = 0; each GPU kernel starts at
    cpu_end + delta, pushed later if the GPU is still busy (the busy clamp
    applies to both delta signs: overlap can never double-book the single
    GPU queue) and never before t = 0.  Total is the last GPU completion.
    """
    if not layer_estimates:
        raise ValidationError("need at least one layer estimate")
    for i, (cpu_ms, gpu_ms, _) in enumerate(layer_estimates):
        if cpu_ms < 0 or gpu_ms < 0:
            raise ValidationError(f"layer {i + 1} has a negative processing time")
    spans = pipeline_spans(layer_estimates)
    return Timeline(spans=spans, total_ms=spans[-1].gpu_end - spans[0].cpu_start)


def estimate_model(
    store: EstimatorStore, spec: ModelSpec, f_c: float, f_g: float
) -> tuple[float, Timeline]:
    """Estimated (total_ms, timeline) for a whole model at one pair.

    Per-layer components come from the layer-type estimators; tiny
    negative component predictions on unseen configs are clamped to zero
    before reconstruction, mirroring the k >= 0 clamp.
    """
    triples = []
    for layer in spec.layers:
        estimator = store.estimator_for(layer.layer_type)
        cpu_ms, gpu_ms, delta_ms, _ = estimator.estimate(layer, f_c, f_g)
        triples.append((max(cpu_ms, 0.0), max(gpu_ms, 0.0), delta_ms))
    timeline = reconstruct_timeline(triples)
    return timeline.total_ms, timeline


def naive_total(store: EstimatorStore, spec: ModelSpec, f_c: float, f_g: float) -> float:
    """Plain sum of per-layer totals, ignoring pipeline overlap."""
    total = 0.0
    for layer in spec.layers:
        estimator = store.estimator_for(layer.layer_type)
        cpu_ms, gpu_ms, delta_ms, _ = estimator.estimate(layer, f_c, f_g)
        total += max(cpu_ms, 0.0) + max(gpu_ms, 0.0) + delta_ms
    return total


# ---------------------------------------------------------------------------
# Online adaptation.


@dataclass(frozen=True)
class AdaptationState:
    """EWMA corrector over (raw estimate, measured) residuals.

    history buffers the most recent pending observations; every `cadence`
    observations the latest window + 1 of them form one non-overlapping
    recalibration batch.  delta_t is the current additive corrector in ms.
    """

    window: int = 9
    alpha: float = 0.6
    cadence: int = 10
    delta_t: float = 0.0
    history: tuple[tuple[float, float], ...] = ()
    observed: int = 0

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValidationError("window must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("alpha must lie in (0, 1]")
        if self.cadence < 1:
            raise ValidationError("cadence must be >= 1")


def adapt_update(
    state: AdaptationState, batch: Sequence[tuple[float, float]]
) -> AdaptationState:
    """Fold one recalibration batch of (estimate, measured) into delta_t.

    The batch is one non-overlapping window of window + 1 observations;
    its mean residual sigma_t moves the corrector by
    delta_t = alpha * sigma_t + (1 - alpha) * delta_t_prev.
    """
    if len(batch) != state.window + 1:
        raise ValidationError(
            f"batch size {len(batch)} does not match window + 1 = {state.window + 1}"
        )
    sigma_t = sum(measured - estimate for estimate, measured in batch) / len(batch)
    return replace(
        state,
        delta_t=state.alpha * sigma_t + (1.0 - state.alpha) * state.delta_t,
        history=(),
    )


def record_observation(
    state: AdaptationState, estimate: float, measured: float
) -> AdaptationState:
    """Buffer one (raw estimate, measured) pair; recalibrate on cadence.

    Only the most recent window + 1 pending pairs are retained, so when a
    cadence tick arrives the batch is exactly the latest non-overlapping
    window.  Ticks with an underfilled buffer (possible only while the
    very first window fills) are skipped.
    """
    history = (state.history + ((estimate, measured),))[-(state.window + 1):]
    state = replace(state, history=history, observed=state.observed + 1)
    if state.observed % state.cadence == 0 and len(history) == state.window + 1:
        return adapt_update(state, history)
    return state


def calibrated_estimate(state: AdaptationState, raw_total_ms: float) -> tuple[float, bool]:
    """Corrected total and whether the zero floor clamped it."""
    corrected = raw_total_ms + state.delta_t
    if corrected < 0.0:
        return 0.0, True
    return corrected, False
