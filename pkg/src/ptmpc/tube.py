"""Probabilistic-tube radii, deviation bounds, and the cost-gap bound.

The tube radius ``r(t)`` bounds, with probability at least ``1 - delta``
simultaneously over the whole horizon, the distance between a stochastic
trajectory and its nominal twin driven by the same inputs. Eroding the
safe set by ``r(t)`` therefore converts the trajectory-level chance
constraint into a deterministic constraint on the nominal trajectory.

Two branches exist depending on the open-loop Lipschitz constant ``L``:
a saturating expression for ``L < 1`` and a geometrically growing one for
``L >= 1``. Both contain ``0/0`` geometric ratios at ``L == 1``; there the
analytic limit of the underlying geometric sum is substituted, and the
``L >= 1`` branch is selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ParameterError


def _tail_factor(epsilon: float, state_dim: int, log_term: float) -> float:
    # eps1*n + eps2*log(...), with eps1, eps2 derived from the user-chosen
    # epsilon in (0, 1).
    eps_sq = epsilon * epsilon
    eps1 = -math.log1p(-eps_sq) / eps_sq
    eps2 = 2.0 / eps_sq
    return eps1 * state_dim + eps2 * log_term


@dataclass(frozen=True)
class TubeParams:
    """Inputs of the tube-radius formula.

    ``delta_t`` (the window-splitting integer) only enters the ``L < 1``
    branch; it is ignored for ``L >= 1``.
    """

    sigma: float
    lipschitz: float
    state_dim: int
    delta: float
    horizon: int
    epsilon: float = 0.7
    delta_t: int = 1

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ParameterError("sigma must be positive")
        if self.lipschitz < 0.0:
            raise ParameterError("lipschitz must be nonnegative")
        if self.state_dim < 1:
            raise ParameterError("state_dim must be a positive integer")
        if not 0.0 < self.delta < 1.0:
            raise ParameterError("delta must lie in (0, 1)")
        if self.horizon < 1:
            raise ParameterError("horizon must be a positive integer")
        if not 0.0 < self.epsilon < 1.0:
            raise ParameterError("epsilon must lie in (0, 1)")
        if self.delta_t < 1:
            raise ParameterError("delta_t must be a positive integer")


def pt_radius(params: TubeParams, t: int) -> float:
    """Tube radius at time index ``t`` (0 <= t <= horizon).

    Pure and deterministic. The branch is selected by ``params.lipschitz``:
    strictly below one uses the saturating expression, one or above the
    geometric one (with limit substitution exactly at one).
    """
    if t < 0 or t > params.horizon:
        raise ParameterError(f"time index {t} outside [0, {params.horizon}]")
    L = params.lipschitz
    sigma = params.sigma
    n = params.state_dim
    T = params.horizon

    if L < 1.0:
        dt = params.delta_t
        Lsq = L * L
        g1 = (1.0 - L ** (2 * t)) / (1.0 - Lsq)
        if dt == 1:
            g2 = 0.0
        elif L == 0.0:
            g2 = 1.0 if dt == 2 else math.inf
        else:
            g2 = (L ** (-2 * (dt - 1)) - 1.0) / (L ** -2 - 1.0)
        # log(2T / (delta * dt)) split to stay finite for tiny delta
        log_term = math.log(2.0 * T) - math.log(params.delta) - math.log(dt)
        return sigma * (math.sqrt(g1) + math.sqrt(g2)) \
            * math.sqrt(_tail_factor(params.epsilon, n, log_term))

    g3 = float(T) if L == 1.0 else (L ** (-2 * T) - 1.0) / (L ** -2 - 1.0)
    log_term = -math.log(params.delta)
    return L ** t * sigma \
        * math.sqrt(g3 * _tail_factor(params.epsilon, n, log_term))


@dataclass(frozen=True)
class TubeSchedule:
    """Per-step erosion radii ``radii[t]``, t = 0..horizon."""

    radii: tuple[float, ...]
    params: TubeParams

    def __post_init__(self):
        if len(self.radii) != self.params.horizon + 1:
            raise ParameterError("schedule length must equal horizon + 1")
        for r in self.radii:
            if not (math.isfinite(r) and r >= 0.0):
                raise ParameterError("tube radii must be finite and nonnegative")

    @property
    def horizon(self) -> int:
        return self.params.horizon

    @property
    def max_radius(self) -> float:
        return max(self.radii)

    def __getitem__(self, t: int) -> float:
        return self.radii[t]


def tube_schedule(params: TubeParams) -> TubeSchedule:
    """Evaluate :func:`pt_radius` over the whole horizon."""
    return TubeSchedule(
        radii=tuple(pt_radius(params, t) for t in range(params.horizon + 1)),
        params=params,
    )


def optimize_tube_params(params: TubeParams,
                         epsilons=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                         delta_ts=None) -> TubeParams:
    """Grid-search epsilon (and delta_t when L < 1) minimizing the peak radius.

    The tube is valid for every choice, so tightening is free. Candidate
    grids producing non-finite radii (overflow for small L with large
    delta_t) are skipped.
    """
    if delta_ts is None:
        delta_ts = range(1, params.horizon + 1) if params.lipschitz < 1.0 else (1,)
    best = None
    best_peak = math.inf
    for eps in epsilons:
        for dt in delta_ts:
            cand = replace(params, epsilon=float(eps), delta_t=int(dt))
            try:
                peak = max(pt_radius(cand, t) for t in range(params.horizon + 1))
            except (OverflowError, ValueError):
                continue
            if math.isfinite(peak) and peak < best_peak:
                best, best_peak = cand, peak
    if best is None:
        raise ParameterError("no finite tube radius on the search grid")
    return best


def mean_sq_deviation_bound(sigma: float, lipschitz: float, state_dim: int,
                            t: int) -> float:
    """Bound on the mean squared nominal deviation at time ``t``.

    Evaluated by accumulating the recursion ``b <- L^2 b + n sigma^2`` from
    ``b = 0``, so the recursion identity holds bit-exactly; the closed form
    is ``n sigma^2 (L^{2t} - 1)/(L^2 - 1)`` with limit ``n sigma^2 t`` at
    ``L == 1``.
    """
    if t < 0:
        raise ParameterError("time index must be nonnegative")
    if sigma < 0.0 or lipschitz < 0.0 or state_dim < 1:
        raise ParameterError("invalid deviation-bound parameters")
    bound = 0.0
    for _ in range(t):
        bound = lipschitz * lipschitz * bound + state_dim * sigma * sigma
    return bound


def cost_gap_bound(sigma: float, lipschitz: float, state_dim: int,
                   cost_lipschitz: float, horizon: int) -> float:
    """Bound on the expected cost gap between stochastic and nominal runs.

    Sum over t = 0..horizon of the square root of the per-step mean-square
    deviation bound scaled by the cost Lipschitz constant.
    """
    if horizon < 1:
        raise ParameterError("horizon must be a positive integer")
    if cost_lipschitz < 0.0:
        raise ParameterError("cost_lipschitz must be nonnegative")
    total = 0.0
    msd = 0.0
    for t in range(horizon + 1):
        if t > 0:
            msd = lipschitz * lipschitz * msd + state_dim * sigma * sigma
        total += math.sqrt(cost_lipschitz * cost_lipschitz * msd)
    return total
