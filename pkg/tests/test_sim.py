"""Noise models, paired rollouts, and Monte Carlo aggregation."""

import numpy as np
import pytest

from ptmpc.errors import ParameterError
from ptmpc.geometry import Box, SafeSet, disk
from ptmpc.mpc import (MpcConfig, QuadraticCost, QuadraticTerminalCost,
                       SolverConfig, TerminalSet, ZeroInputController)
from ptmpc.sim import (NoiseModel, monte_carlo, rollout_pair, sample_noise,
                       tube_containment, wilson_interval)
from ptmpc.systems import LinearPlant, UnicyclePlant
from ptmpc.tube import TubeParams, tube_schedule


def scalar_plant(gain=0.5):
    return LinearPlant(a=[[gain]], b=[[1.0]],
                       input_set=Box(lower=[-1], upper=[1]))


class TestSampleNoise:
    def test_zero_model(self):
        rng = np.random.default_rng(0)
        model = NoiseModel("zero")
        assert np.array_equal(sample_noise(model, 3, rng), np.zeros(3))
        assert model.variance_proxy == 0.0

    def test_gaussian_mean_within_clt_band(self):
        rng = np.random.default_rng(1)
        model = NoiseModel("gaussian", 0.3)
        draws = sample_noise(model, 2, rng, size=1_000_000)
        band = 4 * 0.3 / np.sqrt(1_000_000)
        assert np.all(np.abs(draws.mean(axis=0)) < band)
        assert model.variance_proxy == 0.3

    def test_uniform_ball_support(self):
        rng = np.random.default_rng(2)
        model = NoiseModel("uniform_ball", 0.5)
        draws = sample_noise(model, 3, rng, size=20_000)
        norms = np.linalg.norm(draws, axis=1)
        assert np.all(norms <= 0.5 + 1e-12)
        assert norms.max() > 0.45   # fills the ball
        assert model.variance_proxy == 0.5

    def test_bounded_sphere_support(self):
        rng = np.random.default_rng(3)
        model = NoiseModel("bounded", 0.2)
        draws = sample_noise(model, 4, rng, size=5000)
        assert np.allclose(np.linalg.norm(draws, axis=1), 0.2)

    def test_deterministic_given_rng_state(self):
        model = NoiseModel("gaussian", 1.0)
        a = sample_noise(model, 3, np.random.default_rng(7), size=5)
        b = sample_noise(model, 3, np.random.default_rng(7), size=5)
        assert np.array_equal(a, b)

    def test_invalid_kind_and_scale(self):
        with pytest.raises(ParameterError):
            NoiseModel("cauchy", 1.0)
        with pytest.raises(ParameterError):
            NoiseModel("gaussian", 0.0)


class TestRolloutPair:
    def test_zero_noise_trajectories_coincide(self):
        plant = UnicyclePlant(input_set=Box(lower=[-2, -2], upper=[2, 2]))
        seq = np.tile([0.5, -0.3], (15, 1))
        trace = rollout_pair(plant, seq, NoiseModel("zero"),
                             [1.0, 2.0, 0.3], 15, seed=0)
        assert np.array_equal(trace.stochastic, trace.nominal)
        assert np.all(trace.deviations == 0.0)

    def test_shared_initial_state(self):
        plant = scalar_plant()
        trace = rollout_pair(plant, np.zeros((5, 1)),
                             NoiseModel("gaussian", 0.1), [2.0], 5, seed=1)
        assert trace.stochastic[0] == trace.nominal[0]
        assert trace.deviations[0] == 0.0

    def test_linear_deviation_equals_autonomous_recursion(self):
        plant = LinearPlant(a=[[0.9, 0.1], [0.0, 0.8]], b=np.eye(2),
                            input_set=Box(lower=[-1, -1], upper=[1, 1]))
        noise = NoiseModel("gaussian", 0.05)

        def feedback(t, state):
            return plant.input_set.clip(-0.4 * state)

        trace = rollout_pair(plant, feedback, noise, [1.0, -0.5], 20, seed=9)
        # independent recursion from the same noise realizations
        e = np.zeros(2)
        for t in range(20):
            e = plant.a @ e + trace.noises[t]
            assert np.array_equal(trace.deviation_vectors[t + 1], e)
            assert trace.deviations[t + 1] == np.linalg.norm(e)

    def test_linear_deviation_independent_of_feedback_bit_exact(self):
        plant = LinearPlant(a=[[0.9, 0.1], [0.0, 0.8]], b=np.eye(2),
                            input_set=Box(lower=[-1, -1], upper=[1, 1]))
        noise = NoiseModel("gaussian", 0.05)
        zero = np.zeros((20, 2))

        def saturating(t, state):
            return plant.input_set.clip(-0.7 * state)

        t1 = rollout_pair(plant, zero, noise, [1.0, -0.5], 20, seed=4)
        t2 = rollout_pair(plant, saturating, noise, [1.0, -0.5], 20, seed=4)
        assert np.array_equal(t1.noises, t2.noises)
        assert np.array_equal(t1.deviation_vectors, t2.deviation_vectors)
        assert np.array_equal(t1.deviations, t2.deviations)

    def test_nonlinear_per_step_contraction_inequality(self):
        plant = UnicyclePlant(input_set=Box(lower=[-2, -2], upper=[2, 2]),
                              lipschitz=1.04)
        noise = NoiseModel("gaussian", 0.04)
        seq = np.tile([1.0, 0.5], (25, 1))
        trace = rollout_pair(plant, seq, noise, [1.5, 2.0, 0.4], 25, seed=3)
        for t in range(25):
            lhs = np.linalg.norm(trace.stochastic[t + 1] - trace.noises[t]
                                 - trace.nominal[t + 1])
            rhs = plant.lipschitz * trace.deviations[t]
            assert lhs <= rhs + 1e-12

    def test_fixed_sequence_shape_checked(self):
        plant = scalar_plant()
        with pytest.raises(ParameterError):
            rollout_pair(plant, np.zeros((4, 2)), NoiseModel("zero"),
                         [1.0], 4)

    def test_containment_helper(self):
        plant = scalar_plant()
        trace = rollout_pair(plant, np.zeros((10, 1)),
                             NoiseModel("gaussian", 0.1), [1.0], 10, seed=2)
        params = TubeParams(sigma=0.1, lipschitz=0.5, state_dim=1, delta=0.1,
                            horizon=10)
        assert tube_containment(trace, tube_schedule(params)) in (True, False)


class TestWilson:
    def test_interval_basics(self):
        center, half = wilson_interval(95, 100)
        assert 0.85 < center < 0.95
        assert 0.0 < half < 0.1

    def test_degenerate_counts(self):
        center, half = wilson_interval(0, 50)
        assert center > 0.0
        center, half = wilson_interval(50, 50)
        assert center < 1.0


def tiny_mpc_setup():
    plant = LinearPlant(a=[[0.9, 0.05], [0.0, 0.85]], b=np.eye(2),
                        input_set=Box(lower=[-1, -1], upper=[1, 1]))
    safe = SafeSet(obstacles=(disk([1.0, 0.45], 0.15),))
    params = TubeParams(sigma=0.02, lipschitz=plant.lipschitz, state_dim=2,
                        delta=0.05, horizon=12)
    schedule = tube_schedule(params)
    config = MpcConfig(
        window=5,
        terminal_set=TerminalSet(center=[0.0, 0.0], radius=0.6),
        terminal_controller=ZeroInputController(2),
        stage_cost=QuadraticCost(q_diag=(1.0, 1.0), r_diag=(0.1, 0.1)),
        terminal_cost=QuadraticTerminalCost(q_diag=(2.0, 2.0)),
        solver=SolverConfig(max_iterations=25, margin_buffer=0.005))
    return plant, safe, schedule, config


class TestMonteCarlo:
    def test_single_zero_noise_run_matches_nominal_safety(self):
        plant, safe, schedule, config = tiny_mpc_setup()
        report, traces = monte_carlo(plant, safe, schedule, config,
                                     [1.8, 0.9], NoiseModel("zero"), 12,
                                     runs=1, base_seed=0, keep_traces=1)
        assert report.trajectory_safety_rate == float(traces[0].all_safe)
        assert report.tube_containment_rate == 1.0

    def test_parallelism_invariance(self):
        plant, safe, schedule, config = tiny_mpc_setup()
        args = (plant, safe, schedule, config, [1.8, 0.9],
                NoiseModel("gaussian", 0.02), 12)
        r1, _ = monte_carlo(*args, runs=12, base_seed=5, parallelism=1)
        r2, _ = monte_carlo(*args, runs=12, base_seed=5, parallelism=2)
        d1, d2 = r1.to_dict(), r2.to_dict()
        assert d1 == d2

    def test_seed_changes_results(self):
        plant, safe, schedule, config = tiny_mpc_setup()
        args = (plant, safe, schedule, config, [1.8, 0.9],
                NoiseModel("gaussian", 0.02), 12)
        r1, _ = monte_carlo(*args, runs=6, base_seed=5)
        r2, _ = monte_carlo(*args, runs=6, base_seed=6)
        assert not np.array_equal(r1.mean_sq_deviation, r2.mean_sq_deviation)

    def test_infeasible_runs_counted_not_dropped(self):
        plant, safe, schedule, config = tiny_mpc_setup()
        # initial state already inside the inflated obstacle at t=0
        report, _ = monte_carlo(plant, safe, schedule, config, [1.0, 0.45],
                                NoiseModel("gaussian", 0.02), 12, runs=4,
                                base_seed=3)
        assert report.infeasible_runs == 4
        assert report.completed_runs == 0
        assert report.trajectory_safety_rate == 0.0
