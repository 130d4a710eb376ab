"""Receding-horizon controller for the eroded-safety surrogate program.

At each step the controller solves, by direct single shooting with an
escalating quadratic penalty, the deterministic program

    min over inputs   sum_k stage(z_k, u_k, t+k) + terminal(z_m)
    s.t.  z rolled out noise-free from the measured state,
          x~ rolled out noise-free from the nominal state,
          x~_k inside the safe set eroded by the tube radius at t+k,
          x~_m inside the terminal ball, u_k inside the input box.

The objective uses the certainty-equivalent prediction ``z`` (started
from the measured stochastic state); the safety and terminal constraints
bind the nominal prediction ``x~`` (started from the noise-free nominal
recursion). Feasibility is decided by exact membership tests on the
rolled-out nominal prediction, never by the penalty value itself, so the
optimizer quality affects performance but not the certificate.

Recursive feasibility follows the sliding-window construction: the
previous optimum shifted by one step, extended by a terminal-set
invariant input, is always available as a verified fallback candidate
(and as the warm start).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (InfeasibleAtStep, ParameterError, TerminalSetError)
from .geometry import SafeSet, is_member_eroded
from .sim import ClosedLoopTrace, NoiseModel, _annotate_trace, sample_noise
from .systems import Plant
from .tube import TubeSchedule


# ----------------------------------------------------------------------
# Costs and terminal controllers (picklable callables for Monte Carlo)
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedL1Cost:
    """state_weight * |x|_1 + input_weight * |u|_1, batched."""

    state_weight: float = 1.0
    input_weight: float = 0.1

    def __call__(self, x, u, t):
        return self.state_weight * np.sum(np.abs(x), axis=-1) \
            + self.input_weight * np.sum(np.abs(u), axis=-1)

    def lipschitz_bound(self, state_dim: int) -> float:
        # |x|_1 is sqrt(n)-Lipschitz in the Euclidean norm
        return self.state_weight * math.sqrt(state_dim)


@dataclass(frozen=True)
class NormTerminalCost:
    """weight * |x - center|_2, batched."""

    weight: float = 1.0
    center: tuple = ()

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.center:
            x = x - np.asarray(self.center)
        return self.weight * np.linalg.norm(x, axis=-1)

    def lipschitz_bound(self, state_dim: int) -> float:
        return self.weight


@dataclass(frozen=True)
class QuadraticCost:
    """x' diag(q) x + u' diag(r) u, batched."""

    q_diag: tuple
    r_diag: tuple

    def __call__(self, x, u, t):
        q = np.asarray(self.q_diag)
        r = np.asarray(self.r_diag)
        return np.sum(q * x * x, axis=-1) + np.sum(r * u * u, axis=-1)


@dataclass(frozen=True)
class QuadraticTerminalCost:
    q_diag: tuple

    def __call__(self, x):
        return np.sum(np.asarray(self.q_diag) * np.asarray(x) ** 2, axis=-1)


@dataclass(frozen=True)
class ZeroInputController:
    """Terminal controller that applies no correction (stabilizer only)."""

    input_dim: int = 2

    def __call__(self, state):
        return np.zeros(self.input_dim)


@dataclass(frozen=True)
class HeadingLevelController:
    """Terminal controller for the unicycle: cancel the turn command and
    replace it by pure heading leveling toward the stabilizer reference.

    With zero velocity correction the position norm is non-increasing
    (the embedded velocity law never points outward), and the replaced
    turn rate contracts the heading error, so every centered ball is
    forward invariant. Gains must keep the command inside the input box
    on the terminal ball; the invariance certificate verifies that.
    """

    plant: object
    k_level: float = 0.05

    def __call__(self, state):
        w_st = self.plant.stabilizer(state)[..., 1]
        err = state[..., 2] - self.plant.theta_ref
        u2 = -w_st - self.k_level * err
        u1 = np.zeros_like(u2)
        return np.stack([u1, u2], axis=-1)


# ----------------------------------------------------------------------
# Configuration records
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TerminalSet:
    """Ball in state space: {x : |x - center| <= radius}."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if not self.radius > 0.0:
            raise ParameterError("terminal radius must be positive")
        object.__setattr__(self, "center", c)

    def margin(self, x) -> np.ndarray:
        """radius - distance to center (nonnegative inside)."""
        return self.radius - np.linalg.norm(
            np.asarray(x, dtype=float) - self.center, axis=-1)

    def contains(self, x):
        m = self.margin(x)
        return m >= 0.0 if np.ndim(m) else bool(m >= 0.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        n = self.center.shape[0]
        d = rng.standard_normal((size, n))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        u = rng.random((size, 1)) ** (1.0 / n)
        return self.center + self.radius * u * d


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the projected-gradient penalty solver.

    ``margin_buffer`` tightens the penalized constraints (not the exact
    verification), leaving headroom so the shifted candidate at the next
    step clears the slightly larger radii. ``input_blocks`` enables move
    blocking: the decision variables are that many constant input blocks
    spanning the window (None = one block per step).
    """

    max_iterations: int = 60
    penalty_weight: float = 100.0
    penalty_growth: float = 5.0
    convergence_tol: float = 1e-4
    rel_improvement_tol: float = 1e-3
    min_iterations: int = 2
    fd_step: float = 1e-6
    gradient_mode: str = "finite-difference"
    restoration: bool = True
    step_init: float = 1.0
    step_shrink: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 16
    margin_buffer: float = 0.0
    input_blocks: int | None = None
    replan_period: int = 1

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ParameterError("max_iterations must be nonnegative")
        if self.penalty_weight <= 0.0 or self.penalty_growth <= 1.0:
            raise ParameterError("penalty weight > 0 and growth > 1 required")
        for name in ("convergence_tol", "rel_improvement_tol", "fd_step",
                     "step_init", "step_shrink", "armijo"):
            if getattr(self, name) <= 0.0:
                raise ParameterError(f"{name} must be positive")
        if self.gradient_mode not in ("finite-difference", "analytic-if-available"):
            raise ParameterError("unknown gradient mode")
        if self.margin_buffer < 0.0:
            raise ParameterError("margin_buffer must be nonnegative")
        if self.input_blocks is not None and self.input_blocks < 1:
            raise ParameterError("input_blocks must be positive")
        if self.replan_period < 1:
            raise ParameterError("replan_period must be positive")


@dataclass(frozen=True)
class MpcConfig:
    window: int
    terminal_set: TerminalSet
    terminal_controller: object
    stage_cost: object
    terminal_cost: object
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.window < 1:
            raise ParameterError("prediction window must be >= 1")


@dataclass(frozen=True)
class MpcSolution:
    inputs: np.ndarray           # (m, p)
    predicted_ce: np.ndarray     # (m+1, n) from the measured state
    predicted_nominal: np.ndarray  # (m+1, n) from the nominal state
    objective: float
    feasible: bool
    used_fallback: bool
    time_index: int
    iterations: int = 0
    merit_history: tuple = ()    # ((penalty weight, (accepted merits...)), ...)
    diagnostics: str = ""


@dataclass
class ControllerState:
    current_time: int
    nominal_state: np.ndarray
    last_solution: MpcSolution | None = None
    warm_start: np.ndarray | None = None   # initial guess when no history


# ----------------------------------------------------------------------
# Core rollout / verification helpers
# ----------------------------------------------------------------------


def _rollout(plant: Plant, x0: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Noise-free rollout; ``inputs`` may carry leading batch dims."""
    inputs = np.asarray(inputs, dtype=float)
    m = inputs.shape[-2]
    batch = inputs.shape[:-2]
    states = np.empty(batch + (m + 1, plant.state_dim))
    states[..., 0, :] = x0
    x = np.broadcast_to(x0, batch + (plant.state_dim,))
    for k in range(m):
        x = plant.transition(x, inputs[..., k, :])
        states[..., k + 1, :] = x
    return states


def _objective(config: MpcConfig, ce_states, inputs, t0: int):
    m = inputs.shape[-2]
    ts = t0 + np.arange(m)
    stage = config.stage_cost(ce_states[..., :-1, :], inputs, ts)
    return np.sum(stage, axis=-1) + config.terminal_cost(ce_states[..., -1, :])


def _constraint_margins(safe_set: SafeSet, config: MpcConfig, nominal_states,
                        radii: np.ndarray):
    """Eroded-set margins (>0 feasible) and terminal margin (>=0 feasible)."""
    set_margin = np.minimum(safe_set.obstacle_margin(nominal_states),
                            safe_set.workspace_margin(nominal_states))
    eroded = set_margin - radii
    terminal = config.terminal_set.margin(nominal_states[..., -1, :])
    return eroded, terminal


def _verify_inputs(plant: Plant, inputs: np.ndarray) -> bool:
    lo, hi = plant.input_set.lower, plant.input_set.upper
    return bool(np.all(inputs >= lo) and np.all(inputs <= hi))


def verify_plan(plant: Plant, safe_set: SafeSet, config: MpcConfig,
                nominal_start: np.ndarray, inputs: np.ndarray,
                radii: np.ndarray, states: np.ndarray | None = None):
    """Exact feasibility check of an input plan against the eroded sets,
    the terminal ball, and the input box.

    Returns ``(feasible, nominal_states, diagnostics)`` where diagnostics
    is ``None`` or ``(constraint, index, margin)`` for the worst violation.
    ``states`` may carry an already-computed nominal rollout of ``inputs``
    from ``nominal_start``.
    """
    if states is None:
        states = _rollout(plant, nominal_start, inputs)
    eroded, terminal = _constraint_margins(safe_set, config, states, radii)
    diag = None
    if np.any(eroded <= 0.0):
        k = int(np.argmin(eroded))
        diag = ("eroded_set", k, float(eroded[k]))
    elif terminal < 0.0:
        diag = ("terminal_set", inputs.shape[0], float(terminal))
    elif not _verify_inputs(plant, inputs):
        diag = ("input_set", None, None)
    return diag is None, states, diag


# ----------------------------------------------------------------------
# Penalty solver (direct single shooting, projected gradient)
# ----------------------------------------------------------------------


def _block_map(window: int, blocks: int | None):
    """Indices mapping window steps onto contiguous decision blocks."""
    if blocks is None or blocks >= window:
        return np.arange(window)
    sizes = np.full(blocks, window // blocks)
    sizes[:window % blocks] += 1
    return np.repeat(np.arange(blocks), sizes)


class _ShootingProblem:
    """Batched evaluation of objective + penalty over block variables."""

    def __init__(self, plant, safe_set, config, measured, nominal, radii, t0):
        self.plant = plant
        self.safe_set = safe_set
        self.config = config
        self.measured = measured
        self.nominal = nominal
        self.radii = radii
        self.t0 = t0
        self.window = len(radii) - 1
        self.idx = _block_map(self.window, config.solver.input_blocks)
        self.n_blocks = int(self.idx[-1]) + 1
        self.buffer = config.solver.margin_buffer

    def expand(self, v):
        return v[..., self.idx, :]

    def compress(self, inputs):
        v = np.zeros(inputs.shape[:-2] + (self.n_blocks, self.plant.input_dim))
        for b in range(self.n_blocks):
            v[..., b, :] = inputs[..., self.idx == b, :].mean(axis=-2)
        return v

    def merit(self, v, mu):
        """Objective plus mu-weighted squared constraint violations.

        The certainty-equivalent and nominal predictions share one batched
        rollout (stacked starting states) to halve the per-step overhead.
        """
        inputs = self.expand(np.asarray(v))
        batch = inputs.shape[:-2]
        m = inputs.shape[-2]
        n = self.plant.state_dim
        x = np.empty(batch + (2, n))
        x[..., 0, :] = self.measured
        x[..., 1, :] = self.nominal
        states = np.empty(batch + (2, m + 1, n))
        states[..., 0, :] = x
        ins = inputs[..., None, :, :]
        for k in range(m):
            x = self.plant.transition(x, ins[..., k, :])
            states[..., k + 1, :] = x
        ce = states[..., 0, :, :]
        nom = states[..., 1, :, :]
        obj = _objective(self.config, ce, inputs, self.t0)
        eroded, terminal = _constraint_margins(self.safe_set, self.config,
                                               nom, self.radii)
        viol = np.maximum(0.0, self.buffer - eroded)
        tviol = np.maximum(0.0, self.buffer - terminal)
        return obj + mu * (np.sum(viol * viol, axis=-1) + tviol * tviol)

    def merit_and_grad(self, v, mu):
        """Central-difference gradient over block variables, batched."""
        h = self.config.solver.fd_step
        nb, p = v.shape
        base = v[None]
        eye = np.eye(nb * p).reshape(nb * p, nb, p)
        batch = np.concatenate([base, v + h * eye, v - h * eye], axis=0)
        vals = self.merit(batch, mu)
        f0 = float(vals[0])
        grad = (vals[1:1 + nb * p] - vals[1 + nb * p:]) / (2 * h)
        return f0, grad.reshape(nb, p)


def _penalty_solve(problem: _ShootingProblem, v0: np.ndarray):
    """Escalating-penalty projected gradient descent from ``v0``.

    Returns ``(inputs, iterations, merit_history)``. Iterations are
    counted per gradient evaluation; the merit is nonincreasing across
    accepted iterates within each penalty phase.
    """
    cfg = problem.config.solver
    box = problem.plant.input_set
    v = box.clip(v0)
    mu = cfg.penalty_weight
    iters = 0
    history = []
    phase = []

    def plan_feasible(vv):
        inputs = problem.expand(vv)
        ok, _, _ = verify_plan(problem.plant, problem.safe_set, problem.config,
                               problem.nominal, inputs, problem.radii)
        return ok

    while iters < cfg.max_iterations:
        f, g = problem.merit_and_grad(v, mu)
        iters += 1
        if not phase:
            phase = [f]
        gnorm = float(np.max(np.abs(g)))
        if gnorm < 1e-300:
            break
        step = cfg.step_init / max(1.0, gnorm)
        accepted = False
        f_new = f
        for _ in range(cfg.max_backtracks):
            v_new = box.clip(v - step * g)
            f_new = float(problem.merit(v_new[None], mu)[0])
            decrease = float(np.sum(g * (v - v_new)))
            if f_new <= f - cfg.armijo * decrease:
                accepted = True
                break
            step *= cfg.step_shrink
        if accepted:
            v = v_new
            phase.append(f_new)
        proj_grad = float(np.max(np.abs(v - box.clip(v - g))))
        settled = (not accepted) \
            or proj_grad <= cfg.convergence_tol * max(1.0, abs(f_new)) \
            or (f - f_new) <= cfg.rel_improvement_tol * max(1.0, abs(f))
        if settled and (iters >= cfg.min_iterations or not accepted):
            if plan_feasible(v):
                break
            # converged but infeasible: raise the constraint weight
            history.append((mu, tuple(phase)))
            phase = []
            mu *= cfg.penalty_growth
    if phase:
        history.append((mu, tuple(phase)))
    return problem.expand(v), iters, tuple(history)


# ----------------------------------------------------------------------
# Controller operations
# ----------------------------------------------------------------------


def effective_window(config: MpcConfig, horizon: int, t: int) -> int:
    """Prediction length min(m, T - t); shrinks near the horizon end."""
    if t >= horizon:
        raise ParameterError(f"controller time {t} at or past horizon {horizon}")
    return min(config.window, horizon - t)


def shifted_candidate(state: ControllerState, plant: Plant, config: MpcConfig,
                      window: int, with_states: bool = False):
    """Sliding-window candidate for the current step, if one exists.

    Drops the consumed first input of the previous feasible solution and,
    when the window has not started shrinking, appends the terminal
    controller's input at the previous predicted terminal state. With
    ``with_states`` also returns the candidate's nominal prediction,
    reusing the previous solution's states (the shifted rollout revisits
    them identically) when the controller's nominal state matches; the
    reuse avoids re-rolling long windows on fallback steps.
    """
    prev = state.last_solution
    if prev is None or not prev.feasible:
        return (None, None) if with_states else None
    m_prev = prev.inputs.shape[0]
    if window == m_prev:
        u_f = np.asarray(config.terminal_controller(prev.predicted_nominal[-1]),
                         dtype=float)
        u_f = plant.input_set.clip(u_f)
        inputs = np.vstack([prev.inputs[1:], u_f[None]])
    elif window == m_prev - 1:
        inputs = prev.inputs[1:].copy()
    else:
        return (None, None) if with_states else None
    if not with_states:
        return inputs
    states = None
    if np.array_equal(state.nominal_state, prev.predicted_nominal[1]):
        tail = prev.predicted_nominal[1:]
        if window == m_prev:
            appended = plant.transition(prev.predicted_nominal[-1], inputs[-1])
            states = np.vstack([tail, appended[None]])
        else:
            states = tail.copy()
    return inputs, states


def solve_step(state: ControllerState, measured_state, plant: Plant,
               safe_set: SafeSet, schedule: TubeSchedule,
               config: MpcConfig) -> MpcSolution:
    """Solve the surrogate program at the controller's current time.

    The returned solution's inputs lie in the input box; feasibility is
    the result of exact membership verification of the rolled-out nominal
    prediction. If the penalty solver fails to produce a verified plan
    and a previous solution exists, the shifted candidate is returned
    with ``used_fallback`` set; if both are verified the one with the
    lower certainty-equivalent objective wins.
    """
    t = state.current_time
    measured = np.asarray(measured_state, dtype=float)
    window = effective_window(config, schedule.horizon, t)
    radii = np.asarray(schedule.radii[t:t + window + 1])

    fallback, fallback_states = shifted_candidate(state, plant, config,
                                                  window, with_states=True)
    if fallback is not None:
        warm = fallback
    elif state.warm_start is not None \
            and state.warm_start.shape == (window, plant.input_dim):
        warm = np.asarray(state.warm_start, dtype=float)
    else:
        warm = np.zeros((window, plant.input_dim))

    candidates = []
    iterations = 0
    history = ()
    if config.solver.max_iterations > 0:
        problem = _ShootingProblem(plant, safe_set, config, measured,
                                   state.nominal_state, radii, t)
        v0 = problem.compress(warm)
        solved, iterations, history = _penalty_solve(problem, v0)
        candidates.append((solved, False, None))
    if fallback is not None and config.solver.restoration:
        candidates.append((fallback, True, fallback_states))
    if not candidates:
        candidates.append((warm, False, None))

    best = None
    first_diag = None
    for inputs, is_fallback, known_states in candidates:
        inputs = plant.input_set.clip(inputs)
        ok, nominal_states, diag = verify_plan(plant, safe_set, config,
                                               state.nominal_state, inputs,
                                               radii, states=known_states)
        if not ok:
            if first_diag is None:
                first_diag = diag
            continue
        ce_states = _rollout(plant, measured, inputs)
        obj = float(_objective(config, ce_states, inputs, t))
        cand = MpcSolution(inputs=inputs, predicted_ce=ce_states,
                           predicted_nominal=nominal_states, objective=obj,
                           feasible=True, used_fallback=is_fallback,
                           time_index=t, iterations=iterations,
                           merit_history=history)
        if best is None or obj < best.objective:
            best = cand
    if best is not None:
        return best
    constraint, index, margin = first_diag if first_diag else ("unknown", None, None)
    raise InfeasibleAtStep(t, constraint, index, margin,
                           detail="no verified plan and no feasible fallback")


def verify_recursive_feasibility(plant: Plant, safe_set: SafeSet,
                                 schedule: TubeSchedule, config: MpcConfig,
                                 solution: MpcSolution, t: int) -> bool:
    """Check the sliding-window candidate built from ``solution`` at t+1.

    This is the executable content of the recursive-feasibility theorem:
    the shifted plan (with the terminal-controller extension when the
    window is not yet shrinking) must satisfy the eroded-set, terminal,
    and input constraints at time t+1 exactly.
    """
    if not solution.feasible:
        raise ParameterError("recursive feasibility requires a feasible solution")
    if t + 1 >= schedule.horizon:
        return True
    window = effective_window(config, schedule.horizon, t + 1)
    probe_state = ControllerState(current_time=t + 1,
                                  nominal_state=solution.predicted_nominal[1],
                                  last_solution=solution)
    candidate = shifted_candidate(probe_state, plant, config, window)
    if candidate is None:
        return False
    radii = np.asarray(schedule.radii[t + 1:t + 1 + window + 1])
    ok, _, _ = verify_plan(plant, safe_set, config,
                           solution.predicted_nominal[1], candidate, radii)
    return ok


def certify_terminal_invariance(plant: Plant, config: MpcConfig,
                                samples: int = 256, seed: int = 0) -> None:
    """Sampled check that the terminal controller keeps the ball invariant.

    Raises :class:`TerminalSetError` on the first witness state whose
    successor leaves the terminal set or whose command leaves the input
    box; controllers must not rely on clamping for invariance.
    """
    rng = np.random.default_rng(seed)
    states = config.terminal_set.sample(rng, samples)
    inputs = np.asarray([config.terminal_controller(s) for s in states])
    lo, hi = plant.input_set.lower, plant.input_set.upper
    bad = ~np.all((inputs >= lo) & (inputs <= hi), axis=-1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise TerminalSetError(
            f"terminal controller output {inputs[i]} outside the input box "
            f"at sampled state {states[i]}")
    successors = plant.transition(states, inputs)
    inside = config.terminal_set.contains(successors)
    if not np.all(inside):
        i = int(np.argmax(~inside))
        raise TerminalSetError(
            f"terminal set not invariant: sampled state {states[i]} maps to "
            f"{successors[i]} outside the ball")


def run_receding_horizon(plant: Plant, safe_set: SafeSet,
                         schedule: TubeSchedule, config: MpcConfig, x0,
                         noise: NoiseModel, horizon: int,
                         seed: int | None = None,
                         rng: np.random.Generator | None = None,
                         certify: bool = True,
                         warm_start: np.ndarray | None = None) -> ClosedLoopTrace:
    """Closed-loop run: solve, apply the first input to both systems.

    The nominal state evolves only through the noise-free transition with
    the applied inputs; the stochastic state receives the sampled noise.
    With ``replan_period > 1`` in the solver config, the optimizer budget
    is spent only every that many steps; in between, the verified shifted
    candidate is executed (the recursive-feasibility construction), which
    preserves the safety certificate at a fraction of the compute.
    ``warm_start`` seeds the first solve (useful to share work across
    Monte Carlo runs, which all face the identical time-zero program).
    On infeasibility the partial trace is attached to the raised
    exception as ``partial_trace``.
    """
    if horizon != schedule.horizon:
        raise ParameterError("schedule horizon must match the run horizon")
    x0 = np.asarray(x0, dtype=float)
    if rng is None:
        rng = np.random.default_rng(seed)
    if certify and config.window < horizon:
        certify_terminal_invariance(plant, config)
    if not is_member_eroded(safe_set, x0, schedule.radii[0]):
        raise InfeasibleAtStep(0, "eroded_set", 0,
                               float(np.minimum(safe_set.obstacle_margin(x0),
                                                safe_set.workspace_margin(x0))
                                     - schedule.radii[0]),
                               detail="initial state outside the eroded set")

    n, p = plant.state_dim, plant.input_dim
    xs = np.empty((horizon + 1, n))      # nominal
    zs = np.empty((horizon + 1, n))      # stochastic
    us = np.empty((horizon, p))
    ws = sample_noise(noise, n, rng, size=horizon)
    fallback = np.zeros(horizon, dtype=bool)
    times = np.zeros(horizon)
    solutions = []
    xs[0] = x0
    zs[0] = x0
    state = ControllerState(current_time=0, nominal_state=x0,
                            warm_start=warm_start)
    period = config.solver.replan_period
    lazy_config = replace(config, solver=replace(config.solver,
                                                 max_iterations=0))

    def partial(tt):
        trace = ClosedLoopTrace(
            stochastic=zs[:tt + 1].copy(), nominal=xs[:tt + 1].copy(),
            inputs=us[:tt].copy(), noises=ws[:tt].copy(),
            deviations=np.linalg.norm(zs[:tt + 1] - xs[:tt + 1], axis=1),
            seed=seed, fallback_steps=fallback[:tt].copy(),
            solve_times=times[:tt].copy(), solutions=solutions)
        return trace

    for t in range(horizon):
        cfg_t = config if (t % period == 0
                           or state.last_solution is None) else lazy_config
        tic = time.perf_counter()
        try:
            try:
                sol = solve_step(state, zs[t], plant, safe_set, schedule, cfg_t)
            except InfeasibleAtStep:
                if cfg_t is config:
                    raise
                # the skipped-optimizer candidate failed; spend the budget
                sol = solve_step(state, zs[t], plant, safe_set, schedule,
                                 config)
        except InfeasibleAtStep as exc:
            exc.partial_trace = partial(t)
            raise
        times[t] = time.perf_counter() - tic
        fallback[t] = sol.used_fallback
        solutions.append(sol)
        u = sol.inputs[0]
        us[t] = u
        xs[t + 1] = plant.transition(xs[t], u)
        zs[t + 1] = plant.transition(zs[t], u) + ws[t]
        state = ControllerState(current_time=t + 1, nominal_state=xs[t + 1],
                                last_solution=sol)

    trace = ClosedLoopTrace(
        stochastic=zs, nominal=xs, inputs=us, noises=ws,
        deviations=np.linalg.norm(zs - xs, axis=1), seed=seed,
        fallback_steps=fallback, solve_times=times, solutions=solutions)
    _annotate_trace(trace, safe_set, schedule, config.stage_cost,
                    config.terminal_cost)
    return trace
