"""Command-line entry points: run, validate, compare-radii, deviation.

``run`` executes a scenario's Monte Carlo study and writes a result
bundle: a manifest (normalized scenario echo, seeds, versions, file
hash), the aggregate report, a subsample of full traces as line-delimited
JSON, per-step solver diagnostics, and plot-ready CSV series. All numeric
output is decimal with 12 significant digits; a result manifest can be
passed back to ``run`` to reproduce the report exactly.

Exit codes: 0 success, 2 scenario validation failure, 3 runtime
infeasibility, 4 acceptance-threshold miss.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PtmpcError, ScenarioError
from .geometry import min_corridor_width
from .mpc import (MpcConfig, SolverConfig, TerminalSet, QuadraticCost,
                  QuadraticTerminalCost, ZeroInputController)
from .scenario import (build_mpc_config, build_noise, build_plant,
                       build_safe_set, build_tube_params, load_scenario)
from .sim import NoiseModel, monte_carlo, rollout_pair
from .systems import LinearPlant
from .tube import tube_schedule
from .geometry import Box, SafeSet

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_THRESHOLD = 4


def _sig12(value):
    """Round floats (recursively) to 12 significant decimal digits."""
    if isinstance(value, float):
        return float(f"{value:.12g}")
    if isinstance(value, dict):
        return {k: _sig12(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sig12(v) for v in value]
    return value


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(_sig12(payload), indent=2) + "\n")


def _write_csv(path: Path, header: list[str], rows, meta: str | None = None):
    lines = []
    if meta:
        lines.append(f"# {meta}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(f"{v:.12g}" if isinstance(v, float)
                              else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _scenario_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    import scipy
    return {"ptmpc": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(map(str, sys.version_info[:3]))}


def _trace_record(trace, run_index):
    rec = {
        "run": run_index,
        "seed": trace.seed,
        "stochastic": trace.stochastic.tolist(),
        "nominal": trace.nominal.tolist(),
        "inputs": trace.inputs.tolist(),
        "noises": trace.noises.tolist(),
        "deviations": trace.deviations.tolist(),
        "safe": None if trace.safe is None else trace.safe.tolist(),
        "nominal_eroded_ok": None if trace.nominal_eroded_ok is None
        else trace.nominal_eroded_ok.tolist(),
        "fallback_steps": None if trace.fallback_steps is None
        else trace.fallback_steps.tolist(),
    }
    return rec


def run_scenario(path, out_dir=None, overrides=None) -> int:
    """Execute a scenario file; write the result bundle; return exit code."""
    overrides = overrides or {}
    t_start = time.time()
    try:
        scn = load_scenario(path)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    horizon = scn["horizon"]
    if overrides.get("full_horizon"):
        horizon = scn.get("full_horizon", horizon)
    mc = dict(scn["monte_carlo"])
    if overrides.get("runs"):
        mc["runs"] = overrides["runs"]
    if overrides.get("seed") is not None:
        mc["base_seed"] = overrides["seed"]
    if overrides.get("parallelism") is not None:
        mc["parallelism"] = overrides["parallelism"]
    if overrides.get("subsample_traces") is not None:
        mc["subsample_traces"] = overrides["subsample_traces"]
    parallelism = mc["parallelism"] or 1

    out = Path(out_dir) if out_dir else Path(f"results_{scn['name']}")
    out.mkdir(parents=True, exist_ok=True)

    plant = build_plant(scn)
    safe_set = build_safe_set(scn)
    noise = build_noise(scn)
    manifest = {
        "scenario_echo": scn,
        "scenario_file": str(path),
        "scenario_sha256": _scenario_hash(path),
        "overrides": {k: v for k, v in overrides.items() if v},
        "effective_horizon": horizon,
        "effective_monte_carlo": mc,
        "versions": _versions(),
        "status": "running",
    }

    try:
        params = build_tube_params(scn, plant, horizon)
        schedule = tube_schedule(params)
    except PtmpcError as exc:
        print(f"tube construction failed: {exc}", file=sys.stderr)
        manifest["status"] = "tube_invalid"
        manifest["error"] = str(exc)
        _write_json(out / "manifest.json", manifest)
        return EXIT_INFEASIBLE
    config = build_mpc_config(scn, plant, horizon)
    manifest["tube"] = {"epsilon": params.epsilon, "delta_t": params.delta_t,
                        "sigma": params.sigma, "lipschitz": params.lipschitz,
                        "max_radius": schedule.max_radius}
    sha = manifest["scenario_sha256"]
    _write_csv(out / "series_radii.csv", ["t", "radius"],
               [(t, r) for t, r in enumerate(schedule.radii)],
               meta=f"scenario {sha}; t in steps, radius in state units")

    try:
        report, traces = monte_carlo(
            plant, safe_set, schedule, config, scn["initial_state"], noise,
            horizon, runs=mc["runs"], base_seed=mc["base_seed"],
            parallelism=parallelism, keep_traces=mc["subsample_traces"])
    except PtmpcError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        manifest["status"] = "infeasible"
        manifest["error"] = str(exc)
        _write_json(out / "manifest.json", manifest)
        return EXIT_INFEASIBLE

    _write_json(out / "report.json", report.to_dict())
    with (out / "traces.jsonl").open("w") as fh:
        for i, trace in enumerate(traces):
            fh.write(json.dumps(_sig12(_trace_record(trace, i))) + "\n")
    _write_csv(out / "series_deviation.csv",
               ["t", "mean_sq_deviation", "radius"],
               [(t, float(report.mean_sq_deviation[t]), schedule.radii[t])
                for t in range(horizon + 1)],
               meta=f"scenario {sha}; t in steps, deviation in squared "
                    "state units, radius in state units")
    _write_csv(out / "series_cost.csv",
               ["t", "mean_stage_cost_stochastic", "mean_stage_cost_nominal"],
               [(t, float(report.mean_stage_cost_stochastic[t]),
                 float(report.mean_stage_cost_nominal[t]))
                for t in range(horizon)],
               meta=f"scenario {sha}; t in steps, costs dimensionless")
    if traces:
        _write_csv(out / "solver_diagnostics.csv",
                   ["t", "solve_time", "used_fallback", "iterations",
                    "objective"],
                   [(sol.time_index, float(traces[0].solve_times[sol.time_index]),
                     int(sol.used_fallback), sol.iterations,
                     sol.objective) for sol in traces[0].solutions],
                   meta=f"scenario {sha}; first kept run, solve_time in "
                        "seconds")

    status = EXIT_OK
    manifest["status"] = "ok"
    if report.infeasible_runs > 0:
        manifest["status"] = "partial_infeasible"
        status = EXIT_INFEASIBLE
    else:
        target = mc.get("safety_target")
        if target is not None and report.trajectory_safety_rate < target:
            manifest["status"] = "threshold_miss"
            status = EXIT_THRESHOLD
    manifest["runtime_seconds"] = time.time() - t_start
    manifest["summary"] = {
        "trajectory_safety_rate": report.trajectory_safety_rate,
        "tube_containment_rate": report.tube_containment_rate,
        "infeasible_runs": report.infeasible_runs,
        "mean_cost_gap": report.mean_cost_gap,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"{scn['name']}: safety {report.trajectory_safety_rate:.4f}, "
          f"containment {report.tube_containment_rate:.4f}, "
          f"infeasible {report.infeasible_runs}/{mc['runs']} "
          f"-> {out}")
    return status


def compare_radii(path, deltas, out_dir=None, baseline=None,
                  clearance: float = 0.0) -> int:
    """Tabulate peak tube radii across delta values for a scenario.

    The optional ``baseline`` is an importable ``module:function`` called
    as ``f(delta, params)`` returning a radius; without it the column is
    omitted (no external formula is reconstructed here).
    """
    try:
        scn = load_scenario(path)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    plant = build_plant(scn)
    safe_set = build_safe_set(scn)
    horizon = scn["horizon"]

    baseline_fn = None
    if baseline:
        mod, _, attr = baseline.partition(":")
        baseline_fn = getattr(importlib.import_module(mod), attr)

    d_min = math.inf
    pair = scn.get("corridor_pair")
    if pair is not None:
        d_min = min_corridor_width(safe_set, tuple(pair))

    header = ["delta", "max_radius", "radius_over_sqrt_log",
              "corridor_width", "corridor_feasible"]
    if baseline_fn:
        header.append("baseline_radius")
    rows = []
    base_scn = {**scn}
    for delta in deltas:
        tube = dict(scn["tube"])
        tube["delta"] = float(delta)
        base_scn["tube"] = tube
        params = build_tube_params(base_scn, plant, horizon)
        schedule = tube_schedule(params)
        rmax = schedule.max_radius
        ratio = rmax / math.sqrt(math.log(1.0 / delta))
        feasible = int(2.0 * rmax <= d_min - clearance)
        row = [float(delta), rmax, ratio,
               d_min if math.isfinite(d_min) else float("inf"), feasible]
        if baseline_fn:
            row.append(float(baseline_fn(delta, params)))
        rows.append(row)
    out = Path(out_dir) if out_dir else Path(f"results_{scn['name']}")
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "compare_radii.csv", header, rows,
               meta=f"scenario {_scenario_hash(path)}; radii and widths in "
                    "state units")
    for row in rows:
        print(" ".join(f"{v:.6g}" if isinstance(v, float) else str(v)
                       for v in row))
    return EXIT_OK


def _deviation_linear_plant():
    return LinearPlant(a=np.array([[0.9, 0.05], [0.0, 0.85]]),
                       b=np.eye(2), input_set=Box(lower=[-1, -1],
                                                  upper=[1, 1]))


def _deviation_unicycle_plant():
    from .systems import UnicyclePlant
    return UnicyclePlant(input_set=Box(lower=[-2, -2], upper=[2, 2]))


def _saturating_feedback(plant):
    gain = 0.4 * np.ones((plant.input_dim, plant.state_dim))

    def policy(t, state):
        return plant.input_set.clip(-gain @ state)

    return policy


def _mpc_feedback(plant, horizon):
    safe = SafeSet()
    config = MpcConfig(
        window=min(5, horizon),
        terminal_set=TerminalSet(center=np.zeros(plant.state_dim),
                                 radius=100.0),
        terminal_controller=ZeroInputController(plant.input_dim),
        stage_cost=QuadraticCost(q_diag=(1.0,) * plant.state_dim,
                                 r_diag=(0.1,) * plant.input_dim),
        terminal_cost=QuadraticTerminalCost(q_diag=(1.0,) * plant.state_dim),
        solver=SolverConfig(max_iterations=10))
    from .mpc import ControllerState, solve_step
    from .tube import TubeParams

    schedule = tube_schedule(TubeParams(sigma=1e-9, lipschitz=plant.lipschitz,
                                        state_dim=plant.state_dim, delta=0.5,
                                        horizon=horizon))
    holder = {"state": None}

    def policy(t, measured):
        if t == 0 or holder["state"] is None:
            holder["state"] = ControllerState(0, np.asarray(measured, float))
        st = holder["state"]
        st.current_time = t
        sol = solve_step(st, measured, plant, safe, schedule, config)
        u = sol.inputs[0]
        st.nominal_state = plant.transition(st.nominal_state, u)
        st.last_solution = sol
        return u

    return policy


def run_deviation_experiment(plant_kind: str, feedback_kinds, noise_scale: float,
                             horizon: int, runs: int, seed: int,
                             out_dir=None) -> int:
    """Per-step deviation statistics across feedback laws, shared noise.

    For linear plants the autonomous reference recursion ``e <- A e + w``
    is tabulated alongside; its column is bit-identical to every feedback
    column because the paired rollout evolves the deviation exactly that
    way (the feedback only shifts where the pair is centered).
    """
    if plant_kind == "linear":
        plant = _deviation_linear_plant()
    elif plant_kind == "unicycle":
        plant = _deviation_unicycle_plant()
    else:
        print(f"unknown plant kind {plant_kind!r}", file=sys.stderr)
        return EXIT_VALIDATION
    noise = NoiseModel("gaussian", noise_scale) if noise_scale > 0 \
        else NoiseModel("zero")
    x0 = np.full(plant.state_dim, 0.5)

    columns = {}
    for kind in feedback_kinds:
        if kind == "none":
            controller = np.zeros((horizon, plant.input_dim))
        elif kind == "saturating":
            controller = _saturating_feedback(plant)
        elif kind == "mpc":
            controller = _mpc_feedback(plant, horizon)
        else:
            print(f"unknown feedback kind {kind!r}", file=sys.stderr)
            return EXIT_VALIDATION
        devs = np.empty((runs, horizon + 1))
        for i in range(runs):
            trace = rollout_pair(plant, controller, noise, x0, horizon,
                                 seed=seed + i)
            devs[i] = trace.deviations
        columns[kind] = devs.mean(axis=0)

    reference = None
    if isinstance(plant, LinearPlant):
        devs = np.empty((runs, horizon + 1))
        for i in range(runs):
            rng = np.random.default_rng(seed + i)
            from .sim import sample_noise
            ws = sample_noise(noise, plant.state_dim, rng, size=horizon)
            e = np.zeros(plant.state_dim)
            devs[i, 0] = 0.0
            for t in range(horizon):
                e = plant.a @ e + ws[t]
                devs[i, t + 1] = np.linalg.norm(e)
        reference = devs.mean(axis=0)

    header = ["t"] + [f"dev_{k}" for k in feedback_kinds]
    if reference is not None:
        header.append("dev_reference")
    rows = []
    for t in range(horizon + 1):
        row = [t] + [float(columns[k][t]) for k in feedback_kinds]
        if reference is not None:
            row.append(float(reference[t]))
        rows.append(row)
    out = Path(out_dir) if out_dir else Path("results_deviation")
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / f"deviation_{plant_kind}.csv", header, rows,
               meta=f"plant {plant_kind}, shared noise seed {seed}; "
                    "deviations in state units")
    print(f"wrote {out / f'deviation_{plant_kind}.csv'}")
    return EXIT_OK


def validate(path) -> int:
    try:
        scn = load_scenario(path)
    except ScenarioError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"ok: scenario {scn['name']!r} "
          f"(plant {scn['plant']['kind']}, horizon {scn['horizon']}, "
          f"{len(scn['safe_set']['obstacles'])} obstacles)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ptmpc",
        description="Set-erosion stochastic MPC with probabilistic tubes")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario's Monte Carlo study")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--runs", type=int, default=None)
    p_run.add_argument("--parallelism", type=int, default=None)
    p_run.add_argument("--subsample-traces", type=int, default=None)
    p_run.add_argument("--full-horizon", action="store_true")

    p_val = sub.add_parser("validate", help="validate a scenario file")
    p_val.add_argument("scenario")

    p_cmp = sub.add_parser("compare-radii",
                           help="peak tube radius across delta values")
    p_cmp.add_argument("scenario")
    p_cmp.add_argument("--deltas", default="1e-2,1e-4,1e-6")
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--baseline", default=None,
                       help="module:function plug-in for a baseline radius")
    p_cmp.add_argument("--clearance", type=float, default=0.0)

    p_dev = sub.add_parser("deviation",
                           help="feedback-independence deviation experiment")
    p_dev.add_argument("--plant", default="linear",
                       choices=["linear", "unicycle"])
    p_dev.add_argument("--feedbacks", default="none,saturating,mpc")
    p_dev.add_argument("--noise-scale", type=float, default=0.05)
    p_dev.add_argument("--horizon", type=int, default=30)
    p_dev.add_argument("--runs", type=int, default=3)
    p_dev.add_argument("--seed", type=int, default=0)
    p_dev.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_scenario(args.scenario, args.out, overrides={
            "seed": args.seed, "runs": args.runs,
            "parallelism": args.parallelism,
            "subsample_traces": args.subsample_traces,
            "full_horizon": args.full_horizon})
    if args.command == "validate":
        return validate(args.scenario)
    if args.command == "compare-radii":
        deltas = [float(d) for d in args.deltas.split(",") if d]
        return compare_radii(args.scenario, deltas, args.out, args.baseline,
                             args.clearance)
    if args.command == "deviation":
        kinds = [k for k in args.feedbacks.split(",") if k]
        return run_deviation_experiment(args.plant, kinds, args.noise_scale,
                                        args.horizon, args.runs, args.seed,
                                        args.out)
    return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
