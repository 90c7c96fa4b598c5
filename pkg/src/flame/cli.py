"""Command-line front end.

Subcommands chain into a pipeline over plain files:

    gen-device -> profile -> fit -> estimate / sweep / govern -> evaluate

All units are explicit everywhere: frequencies in GHz, times in ms,
power in W.  Every artifact is written atomically (temp file + rename).
Randomized subcommands (gen-device, profile, govern) require --seed so
every artifact is reproducible.  Relative output paths resolve under
$FLAME_DATA_DIR when it is set.

Exit codes: 0 success, 2 usage, 3 I/O or source failure, 4 validation or
schema mismatch, 5 fit failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import ModelSpec, ValidationError, validate_model_spec
from .devicesim import (
    SimulatedDevice,
    load_device,
    make_device,
    save_device,
    simulate_model,
)
from .governor import (
    GovernError,
    evaluate_trace,
    govern_loop,
    load_trace,
    save_trace,
)
from .layerfit import FitError, build_estimator_store, load_store, save_store
from .modelest import estimate_model
from .profiler import (
    CampaignError,
    DatasetFormatError,
    SamplingPlan,
    load_dataset,
    run_campaign,
    save_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_FIT = 5

UNITS_NOTE = "Units: frequencies in GHz, times in ms, power in W."

SWEEP_COLUMNS = ("f_c", "f_g", "estimate_ms", "ground_truth_ms", "err_pct")
TIMELINE_COLUMNS = ("layer", "cpu_start_ms", "cpu_end_ms", "gpu_start_ms", "gpu_end_ms")

_DISTURB_RE = re.compile(r"^(?P<load>[0-9.eE+\-]+)@step(?P<step>\d+)$")


class UsageError(ValueError):
    pass


def _out_path(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get("FLAME_DATA_DIR")
    if root and not path.is_absolute():
        path = Path(root) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _atomic_write(path: Path, write_fn) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"'{args.subcommand}' is randomized and requires an explicit --seed")
    return args.seed


def _load_model_spec(path: str) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        spec = ModelSpec.from_dict(json.load(fh))
    validate_model_spec(spec)
    return spec


def _verbose(args, message: str) -> None:
    if args.verbose:
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommand implementations.


def _cmd_gen_device(args) -> int:
    seed = _require_seed(args)
    config = make_device(
        seed=seed,
        cpu_levels=args.cpu_levels,
        gpu_levels=args.gpu_levels,
        cpu_range_ghz=(args.cpu_min, args.cpu_max),
        gpu_range_ghz=(args.gpu_min, args.gpu_max),
        jitter_sigma=args.jitter_sigma,
    )
    out = _out_path(args.out)
    _atomic_write(out, lambda tmp: save_device(config, tmp))
    _verbose(args, f"device '{config.name}' written to {out}")
    print(json.dumps({"device_id": config.name, "out": str(out)}))
    return EXIT_OK


def _cmd_profile(args) -> int:
    seed = _require_seed(args)
    spec = _load_model_spec(args.model)
    device = SimulatedDevice(load_device(args.device))
    plan = SamplingPlan(
        cpu_stride=args.cpu_stride,
        gpu_stride=args.gpu_stride,
        context_stride=args.context_stride,
        iterations=args.iters,
        context_max=args.context_max,
    )
    rng = np.random.default_rng(seed)
    _verbose(args, f"profiling {len(spec.unique_configs())} unique configs")
    dataset = run_campaign(device, spec.unique_configs(), device.grid, plan, rng)
    out = _out_path(args.out)

    def write(tmp: Path) -> None:
        save_dataset(dataset, tmp)
        os.replace(str(tmp) + ".meta.json", str(out) + ".meta.json")

    _atomic_write(out, write)
    _verbose(args, f"{len(dataset)} samples written to {out}")
    print(json.dumps({"samples": len(dataset), "out": str(out)}))
    return EXIT_OK


def _cmd_fit(args) -> int:
    dataset = load_dataset(args.dataset)
    store = build_estimator_store(dataset, regressor=args.regressor)
    out = _out_path(args.out)
    _atomic_write(out, lambda tmp: save_store(store, tmp))
    types = sorted(t.value for t in store.estimators)
    _verbose(args, f"fitted estimators for {types}")
    print(json.dumps({"layer_types": types, "out": str(out)}))
    return EXIT_OK


def _cmd_estimate(args) -> int:
    store = load_store(args.estimators)
    spec = _load_model_spec(args.model)
    total, timeline = estimate_model(store, spec, args.fc, args.fg)
    if args.timeline:
        out = _out_path(args.timeline)

        def write(tmp: Path) -> None:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(TIMELINE_COLUMNS)
                for row in timeline.rows():
                    writer.writerow([row[0]] + [repr(v) for v in row[1:]])

        _atomic_write(out, write)
        _verbose(args, f"timeline written to {out}")
    print(
        json.dumps(
            {"f_c_ghz": args.fc, "f_g_ghz": args.fg, "total_ms": total},
            indent=2,
        )
    )
    return EXIT_OK


def _cmd_sweep(args) -> int:
    store = load_store(args.estimators)
    spec = _load_model_spec(args.model)
    device_config = load_device(args.device) if args.device else None
    if device_config is not None:
        # ground truth is the noiseless law
        device_config = replace(device_config, jitter_sigma=0.0)
        grid = device_config.grid
    else:
        grid = store.grid
    rows = []
    for f_c, f_g in grid.pairs():
        estimate = estimate_model(store, spec, f_c, f_g)[0]
        if device_config is not None:
            truth = simulate_model(spec, f_c, f_g, device_config).total_ms
            err = abs(estimate - truth) / truth * 100.0
            rows.append((f_c, f_g, estimate, truth, err))
        else:
            rows.append((f_c, f_g, estimate, "", ""))
    out = _out_path(args.out)

    def write(tmp: Path) -> None:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_COLUMNS)
            for row in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])

    _atomic_write(out, write)
    _verbose(args, f"{len(rows)} grid points written to {out}")
    print(json.dumps({"points": len(rows), "out": str(out)}))
    return EXIT_OK


def _parse_disturb(values: list[str] | None) -> list[tuple[int, float]]:
    schedule = []
    for text in values or []:
        match = _DISTURB_RE.match(text)
        if not match:
            raise UsageError(f"--disturb expects LOAD@stepN (e.g. 0.3@step250), got {text!r}")
        schedule.append((int(match.group("step")), float(match.group("load"))))
    return schedule


def _load_deadline_schedule(path: str | None) -> list[tuple[int, float]]:
    if not path:
        return []
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValidationError("deadline schedule must be a JSON list of [step, deadline_ms]")
    schedule = []
    for entry in data:
        if not isinstance(entry, list) or len(entry) != 2:
            raise ValidationError(f"bad deadline schedule entry {entry!r}")
        schedule.append((int(entry[0]), float(entry[1])))
    return schedule


def _cmd_govern(args) -> int:
    seed = _require_seed(args)
    store = load_store(args.estimators)
    spec = _load_model_spec(args.model)
    device = SimulatedDevice(load_device(args.device), seed=seed)
    report, rows = govern_loop(
        store,
        device,
        spec,
        args.deadline_ms,
        args.steps,
        adapt=not args.no_adapt,
        policy=args.policy,
        deadline_schedule=_load_deadline_schedule(args.deadline_schedule),
        disturbance_schedule=_parse_disturb(args.disturb),
        per_token=args.per_token,
        context_start=args.context_start,
    )
    out = _out_path(args.out)
    _atomic_write(out, lambda tmp: save_trace(rows, tmp))
    _verbose(args, f"{len(rows)} steps written to {out}")
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    rows = load_trace(args.trace)
    report = evaluate_trace(rows, args.deadline_ms)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flame",
        description="Frequency-aware latency modeling on a synthetic CPU+GPU device. "
        + UNITS_NOTE,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_subcommand(name: str, summary: str) -> argparse.ArgumentParser:
        text = summary + " " + UNITS_NOTE
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--seed", type=int, default=None, help="RNG seed (required when randomized)")
        p.add_argument("--verbose", action="store_true", help="progress messages on stderr")
        return p

    p = add_subcommand("gen-device", "generate a synthetic device config.")
    p.add_argument("--cpu-levels", type=int, default=29, help="CPU frequency level count")
    p.add_argument("--gpu-levels", type=int, default=11, help="GPU frequency level count")
    p.add_argument("--cpu-min", type=float, default=0.1, help="lowest CPU frequency, GHz")
    p.add_argument("--cpu-max", type=float, default=2.2, help="highest CPU frequency, GHz")
    p.add_argument("--gpu-min", type=float, default=0.3, help="lowest GPU frequency, GHz")
    p.add_argument("--gpu-max", type=float, default=1.3, help="highest GPU frequency, GHz")
    p.add_argument("--jitter-sigma", type=float, default=0.03, help="measurement jitter sigma")
    p.add_argument("--out", required=True, help="device JSON path")
    p.set_defaults(func=_cmd_gen_device)

    p = add_subcommand("profile", "run a sparse profiling campaign.")
    p.add_argument("--model", required=True, help="model spec JSON path")
    p.add_argument("--device", required=True, help="device JSON path")
    p.add_argument("--cpu-stride", type=int, default=4, help="CPU level stride")
    p.add_argument("--gpu-stride", type=int, default=4, help="GPU level stride")
    p.add_argument("--context-stride", type=int, default=90, help="transformer context stride")
    p.add_argument("--context-max", type=int, default=1024, help="largest context length")
    p.add_argument("--iters", type=int, default=400, help="measurements averaged per point")
    p.add_argument("--out", required=True, help="dataset CSV path (sidecar written next to it)")
    p.set_defaults(func=_cmd_profile)

    p = add_subcommand("fit", "fit layer estimators from a dataset.")
    p.add_argument("--dataset", required=True, help="dataset CSV path")
    p.add_argument(
        "--regressor",
        choices=("ridge", "tree"),
        default="ridge",
        help="coefficient regressor family",
    )
    p.add_argument("--out", required=True, help="estimator store JSON path")
    p.set_defaults(func=_cmd_fit)

    p = add_subcommand("estimate", "estimate one model at one frequency pair.")
    p.add_argument("--estimators", required=True, help="estimator store JSON path")
    p.add_argument("--model", required=True, help="model spec JSON path")
    p.add_argument("--fc", type=float, required=True, help="CPU frequency, GHz")
    p.add_argument("--fg", type=float, required=True, help="GPU frequency, GHz")
    p.add_argument("--timeline", default=None, help="optional per-layer timeline CSV path")
    p.set_defaults(func=_cmd_estimate)

    p = add_subcommand("sweep", "estimate across the whole frequency grid.")
    p.add_argument("--estimators", required=True, help="estimator store JSON path")
    p.add_argument("--model", required=True, help="model spec JSON path")
    p.add_argument(
        "--device",
        default=None,
        help="device JSON path; adds noiseless ground_truth_ms and err_pct columns",
    )
    p.add_argument("--out", required=True, help="sweep CSV path")
    p.set_defaults(func=_cmd_sweep)

    p = add_subcommand("govern", "run the deadline governor control loop.")
    p.add_argument("--estimators", required=True, help="estimator store JSON path")
    p.add_argument("--device", required=True, help="device JSON path")
    p.add_argument("--model", required=True, help="model spec JSON path")
    p.add_argument("--deadline-ms", type=float, required=True, help="latency budget, ms")
    p.add_argument("--steps", type=int, required=True, help="inference (or token) steps")
    p.add_argument(
        "--disturb",
        action="append",
        default=None,
        metavar="LOAD@stepN",
        help="disturbance load from a step on, e.g. 0.3@step250 (repeatable)",
    )
    p.add_argument(
        "--deadline-schedule",
        default=None,
        help="JSON list of [step, deadline_ms] changes applied mid-run",
    )
    p.add_argument("--policy", choices=("greedy", "max"), default="greedy", help="frequency policy")
    p.add_argument("--no-adapt", action="store_true", help="disable the online corrector")
    p.add_argument("--per-token", action="store_true", help="govern per token, growing context")
    p.add_argument("--context-start", type=int, default=1, help="first token's context length")
    p.add_argument("--out", required=True, help="decision trace CSV path")
    p.set_defaults(func=_cmd_govern)

    p = add_subcommand("evaluate", "aggregate a decision trace into metrics.")
    p.add_argument("--trace", required=True, help="decision trace CSV path")
    p.add_argument("--deadline-ms", type=float, required=True, help="latency budget, ms")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CampaignError, GovernError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (ValidationError, DatasetFormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    entry()
