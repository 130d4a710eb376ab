"""Tube radius formula, deviation bound, and cost-gap bound."""

import math

import mpmath
import pytest

from ptmpc.errors import ParameterError
from ptmpc.tube import (TubeParams, cost_gap_bound, mean_sq_deviation_bound,
                        optimize_tube_params, pt_radius, tube_schedule)

mpmath.mp.dps = 50


def oracle_radius(sigma, lipschitz, n, delta, horizon, epsilon, delta_t, t):
    """Independent transcription of the radius formula in 50-digit arithmetic.

    Written as single expressions per branch, deliberately not sharing any
    code with the library implementation.
    """
    sg = mpmath.mpf(sigma)
    L = mpmath.mpf(lipschitz)
    eps = mpmath.mpf(epsilon)
    dl = mpmath.mpf(delta)
    e1 = -mpmath.log(1 - eps ** 2) / eps ** 2
    e2 = 2 / eps ** 2
    if L < 1:
        first = mpmath.sqrt((1 - L ** (2 * t)) / (1 - L ** 2))
        if delta_t == 1:
            second = mpmath.mpf(0)
        else:
            second = mpmath.sqrt((L ** (-2 * (delta_t - 1)) - 1)
                                 / (L ** -2 - 1))
        tail = mpmath.sqrt(e1 * n + e2 * mpmath.log(2 * horizon / (dl * delta_t)))
        return float(sg * (first + second) * tail)
    geom = mpmath.mpf(horizon) if L == 1 \
        else (L ** (-2 * horizon) - 1) / (L ** -2 - 1)
    return float(L ** t * sg * mpmath.sqrt(geom * (e1 * n + e2 * mpmath.log(1 / dl))))


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


class TestPtRadius:
    def test_matches_oracle_both_branches_spot(self):
        p = TubeParams(sigma=0.1, lipschitz=0.5, state_dim=3, delta=1e-3,
                       horizon=30, epsilon=0.5, delta_t=1)
        got = pt_radius(p, 30)
        want = oracle_radius(0.1, 0.5, 3, 1e-3, 30, 0.5, 1, 30)
        assert rel_err(got, want) < 1e-12

        p2 = TubeParams(sigma=0.2, lipschitz=1.08, state_dim=4, delta=1e-4,
                        horizon=40, epsilon=0.6, delta_t=5)
        got = pt_radius(p2, 17)
        want = oracle_radius(0.2, 1.08, 4, 1e-4, 40, 0.6, 5, 17)
        assert rel_err(got, want) < 1e-12

    def test_sigma_vanishing_limit(self):
        p = TubeParams(sigma=1e-300, lipschitz=0.7, state_dim=2, delta=0.01,
                       horizon=10)
        assert pt_radius(p, 10) < 1e-290

    def test_unit_lipschitz_uses_analytic_limit(self):
        sigma, n, delta, horizon = 0.3, 4, 1e-3, 25
        p = TubeParams(sigma=sigma, lipschitz=1.0, state_dim=n, delta=delta,
                       horizon=horizon, epsilon=0.5)
        e1 = -math.log(1 - 0.25) / 0.25
        e2 = 2 / 0.25
        expected = sigma * math.sqrt(horizon * (e1 * n + e2 * math.log(1 / delta)))
        for t in (0, 7, 25):
            assert pt_radius(p, t) == pytest.approx(expected, rel=1e-12)

    def test_delta_t_one_drops_second_term_exactly(self):
        p = TubeParams(sigma=1.0, lipschitz=0.5, state_dim=1, delta=0.1,
                       horizon=5, epsilon=0.5, delta_t=1)
        # at t=0 the first geometric term is zero too, so the radius is 0
        assert pt_radius(p, 0) == 0.0

    def test_zero_lipschitz(self):
        p = TubeParams(sigma=0.1, lipschitz=0.0, state_dim=2, delta=0.1,
                       horizon=8, delta_t=1)
        assert pt_radius(p, 3) > 0.0
        p2 = TubeParams(sigma=0.1, lipschitz=0.0, state_dim=2, delta=0.1,
                        horizon=8, delta_t=2)
        assert math.isfinite(pt_radius(p2, 3))

    def test_time_bounds_checked(self):
        p = TubeParams(sigma=0.1, lipschitz=0.9, state_dim=2, delta=0.1,
                       horizon=10)
        with pytest.raises(ParameterError):
            pt_radius(p, 11)
        with pytest.raises(ParameterError):
            pt_radius(p, -1)

    @pytest.mark.parametrize("lipschitz", [0.6, 1.15])
    def test_monotone_in_sigma_n_and_delta(self, lipschitz):
        base = dict(lipschitz=lipschitz, delta=1e-3, horizon=20, epsilon=0.6,
                    delta_t=2)
        t = 12
        radii = [pt_radius(TubeParams(sigma=s, state_dim=3, **base), t)
                 for s in (0.05, 0.1, 0.2, 0.4)]
        assert all(a < b for a, b in zip(radii, radii[1:]))
        radii = [pt_radius(TubeParams(sigma=0.1, state_dim=n, **base), t)
                 for n in (1, 2, 4, 8)]
        assert all(a < b for a, b in zip(radii, radii[1:]))
        radii = [pt_radius(TubeParams(sigma=0.1, state_dim=3,
                                      lipschitz=lipschitz, delta=d,
                                      horizon=20, epsilon=0.6, delta_t=2), t)
                 for d in (1e-6, 1e-4, 1e-2, 0.3)]
        assert all(a > b for a, b in zip(radii, radii[1:]))

    def test_sqrt_log_growth_in_horizon(self):
        # for L < 1 the radius at fixed t grows at most like sqrt(log T)
        def peak(horizon):
            p = TubeParams(sigma=0.1, lipschitz=0.9, state_dim=3, delta=1e-3,
                           horizon=horizon)
            return pt_radius(p, 10)

        for t1, t2 in ((50, 200), (200, 800), (800, 3200)):
            growth = peak(t2) / peak(t1)
            allowed = math.sqrt(math.log(2 * t2) / math.log(2 * t1))
            assert growth <= allowed + 1e-9


class TestSchedule:
    def test_degenerate_horizon(self):
        p = TubeParams(sigma=0.1, lipschitz=0.5, state_dim=2, delta=0.1,
                       horizon=1)
        sched = tube_schedule(p)
        assert len(sched.radii) == 2
        assert sched.radii[0] == pt_radius(p, 0)

    def test_nondecreasing_for_expansive_plants(self):
        p = TubeParams(sigma=0.1, lipschitz=1.2, state_dim=3, delta=1e-2,
                       horizon=15)
        sched = tube_schedule(p)
        assert all(a <= b for a, b in zip(sched.radii, sched.radii[1:]))

    def test_matches_pointwise(self):
        p = TubeParams(sigma=0.2, lipschitz=0.8, state_dim=2, delta=1e-3,
                       horizon=12, epsilon=0.4, delta_t=3)
        sched = tube_schedule(p)
        for t in range(13):
            assert sched.radii[t] == pt_radius(p, t)

    def test_grid_search_never_worse_than_default(self):
        p = TubeParams(sigma=0.1, lipschitz=0.9, state_dim=3, delta=1e-3,
                       horizon=30)
        best = optimize_tube_params(p)
        peak_default = max(tube_schedule(p).radii)
        peak_best = max(tube_schedule(best).radii)
        assert peak_best <= peak_default

    def test_grid_search_ignores_delta_t_for_expansive(self):
        p = TubeParams(sigma=0.1, lipschitz=1.1, state_dim=3, delta=1e-3,
                       horizon=20)
        best = optimize_tube_params(p)
        assert best.delta_t == 1


class TestDeviationBound:
    def test_zero_at_time_zero(self):
        assert mean_sq_deviation_bound(0.5, 0.9, 4, 0) == 0.0

    def test_unit_lipschitz_linear_growth(self):
        assert mean_sq_deviation_bound(0.1, 1.0, 2, 10) == \
            pytest.approx(0.2, rel=1e-12)

    def test_recursion_holds_bit_exactly(self):
        sigma, lipschitz, n = 0.37, 0.83, 3
        for t in range(0, 40, 7):
            b0 = mean_sq_deviation_bound(sigma, lipschitz, n, t)
            b1 = mean_sq_deviation_bound(sigma, lipschitz, n, t + 1)
            assert b1 == lipschitz * lipschitz * b0 + n * sigma * sigma

    def test_closed_form_agreement(self):
        sigma, lipschitz, n, t = 0.2, 0.7, 5, 18
        closed = n * sigma ** 2 * (lipschitz ** (2 * t) - 1) \
            / (lipschitz ** 2 - 1)
        assert mean_sq_deviation_bound(sigma, lipschitz, n, t) == \
            pytest.approx(closed, rel=1e-12)


class TestCostGapBound:
    def test_zero_noise(self):
        assert cost_gap_bound(0.0, 0.8, 3, 2.0, 10) == 0.0

    def test_unit_lipschitz_closed_form(self):
        sigma, n, lc, horizon = 0.3, 2, 1.5, 12
        expected = lc * sigma * math.sqrt(n) \
            * sum(math.sqrt(t) for t in range(horizon + 1))
        assert cost_gap_bound(sigma, 1.0, n, lc, horizon) == \
            pytest.approx(expected, rel=1e-12)

    def test_termwise_oracle(self):
        # L=0.5, n=1, sigma=1, L_c=1, T=3: independent term-by-term sum
        expected = sum(math.sqrt((0.25 ** t - 1) / (0.25 - 1))
                       for t in range(4))
        assert cost_gap_bound(1.0, 0.5, 1, 1.0, 3) == \
            pytest.approx(expected, rel=1e-12)


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(sigma=0.0), dict(delta=0.0), dict(delta=1.0),
        dict(epsilon=0.0), dict(epsilon=1.0), dict(delta_t=0),
        dict(lipschitz=-0.1), dict(horizon=0), dict(state_dim=0),
    ])
    def test_bad_params_rejected(self, kwargs):
        base = dict(sigma=0.1, lipschitz=0.9, state_dim=2, delta=0.1,
                    horizon=10, epsilon=0.5, delta_t=1)
        base.update(kwargs)
        with pytest.raises(ParameterError):
            TubeParams(**base)
