"""Deadline-aware frequency governing and evaluation metrics.

The governor picks the cheapest frequency pair whose estimated latency
meets the deadline.  Searching every pair costs |F_c| * |F_g| estimator
calls; the greedy decoupled search needs at most |F_c| + |F_g|: pin the
CPU at its maximum frequency and ascend GPU levels to the first feasible
one, then fix that GPU level and ascend CPU levels to the first feasible
one.  The exhaustive scan stays available as a test oracle.

Both searches take the estimator as a plain callable
`latency_fn(f_c, f_g) -> ms`, so they run identically against calibrated
estimates, raw estimates, or simulator ground truth.

govern_loop closes the control loop against the device simulator: decide,
run, measure, feed the residual to the adaptation corrector, repeat.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .core import FrequencyGrid, ModelSpec, ValidationError
from .devicesim import PowerModel, SimulatedDevice
from .layerfit import EstimatorStore
from .modelest import (
    AdaptationState,
    calibrated_estimate,
    estimate_model,
    record_observation,
)

TRACE_COLUMNS = ("step", "f_c", "f_g", "pred_ms", "meas_ms", "power_w", "qos_flag", "delta_t")


@dataclass(frozen=True)
class Deadline:
    """Latency budget per item: per inference for DNNs, per token for SLMs."""

    t_d_ms: float

    def __post_init__(self) -> None:
        if not self.t_d_ms > 0:
            raise ValidationError(f"deadline must be positive, got {self.t_d_ms} ms")


def deadline_ms(deadline) -> float:
    if isinstance(deadline, Deadline):
        return deadline.t_d_ms
    return Deadline(float(deadline)).t_d_ms


@dataclass(frozen=True)
class GovernorDecision:
    f_c: float
    f_g: float
    predicted_latency_ms: float
    predicted_power_w: float
    feasible: bool
    estimator_calls: int


class GovernError(RuntimeError):
    """The control loop aborted; carries the trace rows gathered so far."""

    def __init__(self, message: str, partial: list) -> None:
        super().__init__(message)
        self.partial = partial


def greedy_search(
    latency_fn: Callable[[float, float], float],
    grid: FrequencyGrid,
    deadline,
    power_model: PowerModel,
) -> GovernorDecision:
    """Two-phase decoupled search for the cheapest deadline-meeting pair.

    Levels are scanned in ascending order and the first feasible one wins;
    nothing assumes the estimate is monotone in frequency.  An infeasible
    deadline returns the max-frequency pair flagged infeasible rather than
    raising: the governor always answers.
    """
    t_d = deadline_ms(deadline)
    calls = 0
    f_c_max = grid.cpu_levels[-1]

    chosen_g = None
    latency = 0.0
    for f_g in grid.gpu_levels:
        calls += 1
        latency = latency_fn(f_c_max, f_g)
        if latency <= t_d:
            chosen_g = f_g
            break
    if chosen_g is None:
        # the final probe above was (max, max)
        return GovernorDecision(
            f_c=f_c_max,
            f_g=grid.gpu_levels[-1],
            predicted_latency_ms=latency,
            predicted_power_w=power_model.power(f_c_max, grid.gpu_levels[-1]),
            feasible=False,
            estimator_calls=calls,
        )
    for f_c in grid.cpu_levels:
        calls += 1
        latency = latency_fn(f_c, chosen_g)
        if latency <= t_d:
            return GovernorDecision(
                f_c=f_c,
                f_g=chosen_g,
                predicted_latency_ms=latency,
                predicted_power_w=power_model.power(f_c, chosen_g),
                feasible=True,
                estimator_calls=calls,
            )
    # unreachable with a deterministic estimator: phase 1 proved f_c_max feasible
    return GovernorDecision(
        f_c=f_c_max,
        f_g=chosen_g,
        predicted_latency_ms=latency,
        predicted_power_w=power_model.power(f_c_max, chosen_g),
        feasible=latency <= t_d,
        estimator_calls=calls,
    )


def oracle_search(
    latency_fn: Callable[[float, float], float],
    grid: FrequencyGrid,
    deadline,
    power_model: PowerModel,
) -> GovernorDecision:
    """Exhaustive minimum-power scan; ties by lower f_c, then lower f_g."""
    t_d = deadline_ms(deadline)
    calls = 0
    best = None
    for f_c in grid.cpu_levels:
        for f_g in grid.gpu_levels:
            calls += 1
            latency = latency_fn(f_c, f_g)
            if latency > t_d:
                continue
            key = (power_model.power(f_c, f_g), f_c, f_g)
            if best is None or key < best[0]:
                best = (key, latency)
    if best is None:
        f_c, f_g = grid.max_pair
        return GovernorDecision(
            f_c=f_c,
            f_g=f_g,
            predicted_latency_ms=latency_fn(f_c, f_g),
            predicted_power_w=power_model.power(f_c, f_g),
            feasible=False,
            estimator_calls=calls,
        )
    (power, f_c, f_g), latency = best
    return GovernorDecision(
        f_c=f_c,
        f_g=f_g,
        predicted_latency_ms=latency,
        predicted_power_w=power,
        feasible=True,
        estimator_calls=calls,
    )


# ---------------------------------------------------------------------------
# Metrics.


def mape(y: Sequence[float], y_hat: Sequence[float]) -> float:
    """Mean absolute percentage error, in percent."""
    if len(y) != len(y_hat) or not y:
        raise ValidationError("mape needs two equal-length non-empty sequences")
    total = 0.0
    for i, (truth, est) in enumerate(zip(y, y_hat)):
        if truth == 0:
            raise ValidationError(f"mape undefined: ground-truth entry {i} is zero")
        total += abs(truth - est) / truth
    return total / len(y) * 100.0


def qos(achieved_rate: float, required_rate: float) -> float:
    """Deadline-satisfaction score: min(r_a / r_d, 1) * 100, in percent."""
    if required_rate <= 0:
        raise ValidationError("required rate must be positive")
    return min(achieved_rate / required_rate, 1.0) * 100.0


def ppw(qos_pct: float, avg_power_w: float) -> float:
    """Performance per watt: QoS percent delivered per watt consumed."""
    if avg_power_w <= 0:
        raise ValidationError("average power must be positive")
    return qos_pct / avg_power_w


@dataclass(frozen=True)
class EvalReport:
    mape: float
    qos: float
    ppw: float
    avg_power_w: float
    achieved_rate: float
    required_rate: float

    def to_dict(self) -> dict:
        return {
            "mape_pct": self.mape,
            "qos_pct": self.qos,
            "ppw_pct_per_w": self.ppw,
            "avg_power_w": self.avg_power_w,
            "achieved_rate_per_s": self.achieved_rate,
            "required_rate_per_s": self.required_rate,
        }


@dataclass(frozen=True)
class TraceRow:
    step: int
    f_c: float
    f_g: float
    pred_ms: float
    meas_ms: float
    power_w: float
    qos_flag: bool
    delta_t: float


def evaluate_trace(rows: Sequence[TraceRow], deadline) -> EvalReport:
    """Aggregate a decision trace into the evaluation metrics.

    Rates are items per second: achieved from the mean measured latency,
    required from the mean deadline (a scalar deadline or one per row).
    """
    if not rows:
        raise ValidationError("cannot evaluate an empty trace")
    if isinstance(deadline, (int, float, Deadline)):
        deadlines = [deadline_ms(deadline)] * len(rows)
    else:
        deadlines = [deadline_ms(d) for d in deadline]
        if len(deadlines) != len(rows):
            raise ValidationError("need one deadline per trace row")
    mean_meas = sum(r.meas_ms for r in rows) / len(rows)
    mean_deadline = sum(deadlines) / len(deadlines)
    achieved = 1000.0 / mean_meas
    required = 1000.0 / mean_deadline
    q = qos(achieved, required)
    avg_power = sum(r.power_w for r in rows) / len(rows)
    return EvalReport(
        mape=mape([r.meas_ms for r in rows], [r.pred_ms for r in rows]),
        qos=q,
        ppw=ppw(q, avg_power),
        avg_power_w=avg_power,
        achieved_rate=achieved,
        required_rate=required,
    )


# ---------------------------------------------------------------------------
# The control loop.


def govern_loop(
    store: EstimatorStore,
    device: SimulatedDevice,
    spec: ModelSpec,
    deadline,
    steps: int,
    *,
    adapt: bool = True,
    state: AdaptationState | None = None,
    policy: str = "greedy",
    deadline_schedule: Sequence[tuple[int, float]] | None = None,
    disturbance_schedule: Sequence[tuple[int, float]] | None = None,
    per_token: bool = False,
    context_start: int = 1,
) -> tuple[EvalReport, list[TraceRow]]:
    """Decide, run, measure, recalibrate, for `steps` inferences or tokens.

    Schedules are (step, value) lists: the deadline or disturbance load
    takes its new value from that step on, so mid-run changes land at the
    next decision.  policy "max" skips the search and pins both processors
    at maximum frequency, the baseline the greedy policy is judged
    against.  In per-token mode each step advances the context length by
    one token and the search is re-run for the new workload.
    """
    if steps < 1:
        raise ValidationError("need at least one step")
    if policy not in ("greedy", "max"):
        raise ValidationError(f"unknown policy {policy!r}")
    t_d = deadline_ms(deadline)
    current_state = state if state is not None else AdaptationState()
    schedule_d = dict(deadline_schedule or ())
    schedule_l = dict(disturbance_schedule or ())
    disturbance = 0.0
    grid = device.grid
    raw_cache: dict[tuple, float] = {}
    rows: list[TraceRow] = []
    deadlines: list[float] = []

    for step in range(steps):
        if step in schedule_d:
            t_d = deadline_ms(schedule_d[step])
        if step in schedule_l:
            disturbance = float(schedule_l[step])
            if disturbance < 0:
                raise ValidationError("disturbance load factor must be non-negative")
        step_spec = spec.with_context(context_start + step) if per_token else spec
        context = context_start + step if per_token else None

        def raw_total(f_c: float, f_g: float) -> float:
            key = (f_c, f_g, context)
            value = raw_cache.get(key)
            if value is None:
                value = estimate_model(store, step_spec, f_c, f_g)[0]
                raw_cache[key] = value
            return value

        def calibrated(f_c: float, f_g: float) -> float:
            return calibrated_estimate(current_state, raw_total(f_c, f_g))[0]

        if policy == "max":
            f_c, f_g = grid.max_pair
            pred = calibrated(f_c, f_g)
            decision = GovernorDecision(
                f_c=f_c,
                f_g=f_g,
                predicted_latency_ms=pred,
                predicted_power_w=device.power(f_c, f_g),
                feasible=pred <= t_d,
                estimator_calls=1,
            )
        else:
            decision = greedy_search(calibrated, grid, t_d, device.power_model)
        try:
            trace = device.run_model(
                step_spec, decision.f_c, decision.f_g, disturbance=disturbance
            )
        except Exception as exc:
            raise GovernError(f"simulator failed at step {step}: {exc}", rows) from exc
        measured = trace.total_ms
        if adapt:
            current_state = record_observation(
                current_state, raw_total(decision.f_c, decision.f_g), measured
            )
        rows.append(
            TraceRow(
                step=step,
                f_c=decision.f_c,
                f_g=decision.f_g,
                pred_ms=decision.predicted_latency_ms,
                meas_ms=measured,
                power_w=trace.avg_power_w,
                qos_flag=measured <= t_d,
                delta_t=current_state.delta_t,
            )
        )
        deadlines.append(t_d)
    return evaluate_trace(rows, deadlines), rows


def save_trace(rows: Sequence[TraceRow], path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.step,
                    repr(r.f_c),
                    repr(r.f_g),
                    repr(r.pred_ms),
                    repr(r.meas_ms),
                    repr(r.power_w),
                    int(r.qos_flag),
                    repr(r.delta_t),
                ]
            )


def load_trace(path) -> list[TraceRow]:
    with open(Path(path), "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise ValidationError(f"unexpected trace header {header}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_COLUMNS):
                raise ValidationError(
                    f"trace line {line_no}: expected {len(TRACE_COLUMNS)} columns"
                )
            rows.append(
                TraceRow(
                    step=int(row[0]),
                    f_c=float(row[1]),
                    f_g=float(row[2]),
                    pred_ms=float(row[3]),
                    meas_ms=float(row[4]),
                    power_w=float(row[5]),
                    qos_flag=bool(int(row[6])),
                    delta_t=float(row[7]),
                )
            )
    return rows
