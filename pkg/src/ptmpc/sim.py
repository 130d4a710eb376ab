"""Noise models, paired rollouts, and Monte Carlo certification.

A *paired rollout* evolves the stochastic trajectory ``X`` and its nominal
twin ``x`` under the same per-step inputs; noise enters only ``X``. The
deviation ``X - x`` is what the probabilistic tube bounds, and for linear
plants it satisfies an autonomous recursion independent of the feedback
law. For such plants the rollout evaluates that recursion directly
(``e <- A @ e + w``) and reconstructs ``X = x + e``, an algebraically
equivalent evaluation order of the same dynamics; the recorded deviation
vectors are the recursion's values, so the feedback-independence of the
deviation is exact in floating point, not just up to rounding.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleAtStep, ParameterError
from .geometry import SafeSet, is_member_eroded
from .systems import LinearPlant, Plant
from .tube import TubeSchedule

_NOISE_KINDS = ("gaussian", "uniform_ball", "bounded", "zero")


@dataclass(frozen=True)
class NoiseModel:
    """Sub-Gaussian disturbance description with a concrete sampler.

    Kinds and their variance proxies:
      - ``gaussian``: componentwise N(0, scale^2); proxy = scale.
      - ``uniform_ball``: uniform on the ball of radius ``scale``;
        proxy = scale (bounded zero-mean noise of support radius R is
        sub-Gaussian with proxy R).
      - ``bounded``: uniform on the sphere of radius ``scale`` (a generic
        bounded zero-mean family); proxy = scale.
      - ``zero``: deterministic limit; proxy = 0.
    """

    kind: str
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in _NOISE_KINDS:
            raise ParameterError(f"unknown noise kind {self.kind!r}")
        if self.kind == "zero":
            object.__setattr__(self, "scale", 0.0)
        elif self.scale <= 0.0:
            raise ParameterError("noise scale must be positive")

    @property
    def variance_proxy(self) -> float:
        return self.scale


def sample_noise(model: NoiseModel, dim: int, rng: np.random.Generator,
                 size: int | None = None) -> np.ndarray:
    """Draw one (or ``size``) noise vectors; deterministic given ``rng``."""
    if dim < 1:
        raise ParameterError("noise dimension must be positive")
    shape = (dim,) if size is None else (size, dim)
    if model.kind == "zero":
        return np.zeros(shape)
    if model.kind == "gaussian":
        return model.scale * rng.standard_normal(shape)
    d = rng.standard_normal(shape)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    if model.kind == "bounded":
        return model.scale * d
    u = rng.random(shape[:-1] + (1,)) ** (1.0 / dim)
    return model.scale * u * d


@dataclass
class ClosedLoopTrace:
    """Paired stochastic/nominal trajectories with per-step records."""

    stochastic: np.ndarray          # (T+1, n)
    nominal: np.ndarray             # (T+1, n)
    inputs: np.ndarray              # (T, p)
    noises: np.ndarray              # (T, n)
    deviations: np.ndarray          # (T+1,)
    deviation_vectors: np.ndarray | None = None   # (T+1, n)
    seed: int | None = None
    stage_costs_stochastic: np.ndarray | None = None   # (T,)
    stage_costs_nominal: np.ndarray | None = None      # (T,)
    terminal_cost_stochastic: float = 0.0
    terminal_cost_nominal: float = 0.0
    safe: np.ndarray | None = None            # (T+1,) bool, X_t in C
    nominal_eroded_ok: np.ndarray | None = None  # (T+1,) bool, x_t in eroded C
    fallback_steps: np.ndarray | None = None  # (T,) bool
    solve_times: np.ndarray | None = None     # (T,)
    solutions: list = field(default_factory=list)

    def __post_init__(self):
        if not np.array_equal(self.stochastic[0], self.nominal[0]):
            raise ParameterError("paired trajectories must share the initial state")

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    @property
    def cost_stochastic(self) -> float:
        return float(np.sum(self.stage_costs_stochastic)
                     + self.terminal_cost_stochastic)

    @property
    def cost_nominal(self) -> float:
        return float(np.sum(self.stage_costs_nominal)
                     + self.terminal_cost_nominal)

    @property
    def all_safe(self) -> bool:
        return bool(np.all(self.safe))


def _resolve_policy(controller, horizon, input_dim):
    if callable(controller):
        return controller
    seq = np.asarray(controller, dtype=float)
    if seq.shape != (horizon, input_dim):
        raise ParameterError(
            f"input sequence has shape {seq.shape}, expected {(horizon, input_dim)}")

    def policy(t, _state):
        return seq[t]

    return policy


def rollout_pair(plant: Plant, controller, noise: NoiseModel, x0, horizon: int,
                 seed: int | None = None, rng: np.random.Generator | None = None,
                 safe_set: SafeSet | None = None, schedule: TubeSchedule | None = None,
                 stage_cost=None, terminal_cost=None) -> ClosedLoopTrace:
    """Evolve the stochastic/nominal pair under shared inputs.

    ``controller`` is either a fixed ``(horizon, p)`` input sequence or a
    callable ``(t, measured_state) -> input``. Noise is drawn from ``rng``
    (or a generator seeded with ``seed``) and added to the stochastic
    trajectory only. For :class:`LinearPlant` the deviation is evolved as
    ``e <- A @ e + w`` and the stochastic state reconstructed as
    ``x + e``, making the deviation sequence exactly independent of the
    controller.
    """
    x0 = np.asarray(x0, dtype=float)
    if rng is None:
        rng = np.random.default_rng(seed)
    policy = _resolve_policy(controller, horizon, plant.input_dim)
    n = plant.state_dim

    xs = np.empty((horizon + 1, n))
    zs = np.empty((horizon + 1, n))
    es = np.zeros((horizon + 1, n))
    us = np.empty((horizon, plant.input_dim))
    ws = sample_noise(noise, n, rng, size=horizon)
    xs[0] = x0
    zs[0] = x0

    linear = isinstance(plant, LinearPlant)
    for t in range(horizon):
        u = np.asarray(policy(t, zs[t]), dtype=float)
        us[t] = u
        xs[t + 1] = plant.transition(xs[t], u)
        if linear:
            es[t + 1] = plant.a @ es[t] + ws[t]
            zs[t + 1] = xs[t + 1] + es[t + 1]
        else:
            zs[t + 1] = plant.transition(zs[t], u) + ws[t]
            es[t + 1] = zs[t + 1] - xs[t + 1]

    trace = ClosedLoopTrace(stochastic=zs, nominal=xs, inputs=us, noises=ws,
                            deviations=np.linalg.norm(es, axis=1),
                            deviation_vectors=es, seed=seed)
    _annotate_trace(trace, safe_set, schedule, stage_cost, terminal_cost)
    return trace


def _annotate_trace(trace, safe_set, schedule, stage_cost, terminal_cost):
    horizon = trace.horizon
    if safe_set is not None:
        trace.safe = is_member_eroded(safe_set, trace.stochastic, 0.0)
        if schedule is not None:
            radii = np.asarray(schedule.radii)
            margins = np.minimum(safe_set.obstacle_margin(trace.nominal),
                                 safe_set.workspace_margin(trace.nominal))
            trace.nominal_eroded_ok = margins > radii
    if stage_cost is not None:
        ts = np.arange(horizon)
        trace.stage_costs_stochastic = np.asarray(
            stage_cost(trace.stochastic[:-1], trace.inputs, ts), dtype=float)
        trace.stage_costs_nominal = np.asarray(
            stage_cost(trace.nominal[:-1], trace.inputs, ts), dtype=float)
    if terminal_cost is not None:
        trace.terminal_cost_stochastic = float(terminal_cost(trace.stochastic[-1]))
        trace.terminal_cost_nominal = float(terminal_cost(trace.nominal[-1]))


def tube_containment(trace: ClosedLoopTrace, schedule: TubeSchedule) -> bool:
    """Whole-trajectory containment of the deviation in the tube."""
    radii = np.asarray(schedule.radii[:trace.horizon + 1])
    return bool(np.all(trace.deviations <= radii))


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054):
    """Wilson score interval (center, half-width) at confidence z."""
    if trials < 1:
        raise ParameterError("need at least one trial")
    phat = successes / trials
    denom = 1.0 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials
                         + z * z / (4 * trials * trials)) / denom
    return center, half


def derive_run_seed(base_seed: int, run_index: int) -> np.random.SeedSequence:
    """Counter-based per-run seed; independent and individually replayable."""
    return np.random.SeedSequence(base_seed, spawn_key=(run_index,))


@dataclass
class MonteCarloReport:
    """Aggregate safety/containment/deviation/cost statistics."""

    runs: int
    completed_runs: int
    infeasible_runs: int
    trajectory_safety_rate: float
    tube_containment_rate: float
    nominal_eroded_rate: float
    terminal_rate: float
    safety_ci_halfwidth: float
    containment_ci_halfwidth: float
    mean_sq_deviation: np.ndarray          # (T+1,)
    mean_cost_gap: float
    cost_gap_se: float
    mean_cost_stochastic: float
    mean_cost_nominal: float
    mean_stage_cost_stochastic: np.ndarray  # (T,)
    mean_stage_cost_nominal: np.ndarray     # (T,)
    fallback_step_fraction: float
    base_seed: int

    def to_dict(self) -> dict:
        out = {}
        for key, val in self.__dict__.items():
            out[key] = val.tolist() if isinstance(val, np.ndarray) else val
        return out


def _mc_single_run(args):
    (plant, safe_set, schedule, config, x0, noise, horizon,
     base_seed, run_index, keep_trace, warm_start) = args
    # local import: mpc depends on sim types
    from .mpc import run_receding_horizon

    seed_seq = derive_run_seed(base_seed, run_index)
    try:
        trace = run_receding_horizon(
            plant, safe_set, schedule, config, x0, noise, horizon,
            rng=np.random.default_rng(seed_seq), certify=False,
            warm_start=warm_start)
    except InfeasibleAtStep as exc:
        return {"run": run_index, "infeasible": True, "fail_time": exc.time,
                "trace": None}
    rec = {
        "run": run_index,
        "infeasible": False,
        "safe": trace.all_safe,
        "contained": tube_containment(trace, schedule),
        "nominal_eroded": bool(np.all(trace.nominal_eroded_ok)),
        "final_in_terminal": bool(config.terminal_set.contains(
            trace.nominal[-1])),
        "sq_dev": trace.deviations ** 2,
        "cost_gap": trace.cost_stochastic - trace.cost_nominal,
        "cost_stochastic": trace.cost_stochastic,
        "cost_nominal": trace.cost_nominal,
        "stage_costs_stochastic": trace.stage_costs_stochastic,
        "stage_costs_nominal": trace.stage_costs_nominal,
        "fallback_steps": int(np.sum(trace.fallback_steps)),
        "trace": trace if keep_trace else None,
    }
    return rec


def monte_carlo(plant: Plant, safe_set: SafeSet, schedule: TubeSchedule,
                config, x0, noise: NoiseModel, horizon: int, runs: int,
                base_seed: int, parallelism: int = 1,
                keep_traces: int = 0):
    """Run ``runs`` independent closed-loop rollouts and aggregate.

    Per-run seeds derive from ``(base_seed, run_index)``, so the report is
    identical for any parallelism degree. Runs aborted by infeasibility
    are counted separately and conservatively scored unsafe and
    uncontained. Returns ``(report, traces)`` where ``traces`` holds the
    first ``keep_traces`` runs' full traces.
    """
    if runs < 1:
        raise ParameterError("need at least one run")
    # All runs share the identical time-zero program (X_0 = x_0), so its
    # solution is computed once and passed to every run as a warm start;
    # the per-run solves remain exact and deterministic.
    from dataclasses import replace

    from .mpc import ControllerState, certify_terminal_invariance, solve_step
    if config.window < horizon:
        certify_terminal_invariance(plant, config)
    x0 = np.asarray(x0, dtype=float)
    boosted = replace(config, solver=replace(
        config.solver,
        max_iterations=max(60, 4 * config.solver.max_iterations)))
    try:
        warm = solve_step(ControllerState(0, x0), x0, plant, safe_set,
                          schedule, boosted).inputs
    except InfeasibleAtStep:
        # the time-zero program is seed-independent, so its infeasibility
        # is shared by every run; report them all without re-solving
        records = [{"run": i, "infeasible": True, "trace": None}
                   for i in range(runs)]
        return _aggregate(records, runs, horizon, base_seed), []
    jobs = [(plant, safe_set, schedule, config, x0, noise, horizon,
             base_seed, i, i < keep_traces, warm) for i in range(runs)]
    if parallelism and parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(_mc_single_run, jobs,
                                    chunksize=max(1, runs // (8 * parallelism))))
    else:
        records = [_mc_single_run(j) for j in jobs]
    records.sort(key=lambda r: r["run"])
    report = _aggregate(records, runs, horizon, base_seed)
    traces = [r["trace"] for r in records if r["trace"] is not None]
    return report, traces


def _aggregate(records, runs, horizon, base_seed) -> MonteCarloReport:
    completed = [r for r in records if not r["infeasible"]]
    n_inf = runs - len(completed)
    n_safe = sum(r["safe"] for r in completed)
    n_cont = sum(r["contained"] for r in completed)
    _, half_safe = wilson_interval(n_safe, runs)
    _, half_cont = wilson_interval(n_cont, runs)

    if completed:
        sq_dev = np.mean([r["sq_dev"] for r in completed], axis=0)
        gaps = np.array([r["cost_gap"] for r in completed])
        gap_se = float(np.std(gaps, ddof=1) / math.sqrt(len(gaps))) \
            if len(gaps) > 1 else 0.0
        total_steps = len(completed) * horizon
        report = MonteCarloReport(
            runs=runs,
            completed_runs=len(completed),
            infeasible_runs=n_inf,
            trajectory_safety_rate=n_safe / runs,
            tube_containment_rate=n_cont / runs,
            nominal_eroded_rate=sum(r["nominal_eroded"]
                                    for r in completed) / runs,
            terminal_rate=sum(r["final_in_terminal"]
                              for r in completed) / runs,
            safety_ci_halfwidth=half_safe,
            containment_ci_halfwidth=half_cont,
            mean_sq_deviation=sq_dev,
            mean_cost_gap=float(np.mean(gaps)),
            cost_gap_se=gap_se,
            mean_cost_stochastic=float(np.mean([r["cost_stochastic"]
                                                for r in completed])),
            mean_cost_nominal=float(np.mean([r["cost_nominal"]
                                             for r in completed])),
            mean_stage_cost_stochastic=np.mean(
                [r["stage_costs_stochastic"] for r in completed], axis=0),
            mean_stage_cost_nominal=np.mean(
                [r["stage_costs_nominal"] for r in completed], axis=0),
            fallback_step_fraction=sum(r["fallback_steps"] for r in completed)
            / total_steps,
            base_seed=base_seed,
        )
        return report
    else:
        report = MonteCarloReport(
            runs=runs, completed_runs=0, infeasible_runs=n_inf,
            trajectory_safety_rate=0.0, tube_containment_rate=0.0,
            nominal_eroded_rate=0.0, terminal_rate=0.0,
            safety_ci_halfwidth=half_safe, containment_ci_halfwidth=half_cont,
            mean_sq_deviation=np.zeros(horizon + 1), mean_cost_gap=0.0,
            cost_gap_se=0.0, mean_cost_stochastic=0.0, mean_cost_nominal=0.0,
            mean_stage_cost_stochastic=np.zeros(horizon),
            mean_stage_cost_nominal=np.zeros(horizon),
            fallback_step_fraction=0.0, base_seed=base_seed)
    return report
