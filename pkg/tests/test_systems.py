"""Plants, the Lipschitz estimator, and the quadrotor stabilizer design."""

import numpy as np
import pytest

from ptmpc.errors import (DimensionError, DomainError, InputSetError,
                          ParameterError)
from ptmpc.geometry import Box
from ptmpc.systems import (LinearPlant, QuadrotorPlant, UnicyclePlant,
                           design_quadrotor_stabilizer, estimate_gain_at_scale,
                           estimate_lipschitz, step_nominal)


def unit_box(dim, half=1.0):
    return Box(lower=-half * np.ones(dim), upper=half * np.ones(dim))


@pytest.fixture(scope="module")
def unicycle():
    return UnicyclePlant(input_set=Box(lower=[-2, -2], upper=[2, 2]))


@pytest.fixture(scope="module")
def quadrotor_design():
    return design_quadrotor_stabilizer()


@pytest.fixture(scope="module")
def quadrotor(quadrotor_design):
    gain, transform, _ = quadrotor_design
    return QuadrotorPlant(input_set=Box(lower=[-3, -3], upper=[3, 3]),
                          gain=gain, transform=transform)


class TestStepNominal:
    def test_linear_example(self):
        plant = LinearPlant(a=[[0.5]], b=[[1.0]], input_set=unit_box(1, 2.0))
        out = step_nominal(plant, np.array([2.0]), np.array([1.0]))
        assert out == pytest.approx([2.0])

    def test_unicycle_origin_fixed_point(self, unicycle):
        x0 = np.zeros(3)
        out = step_nominal(unicycle, x0, np.zeros(2))
        assert np.array_equal(out, x0)

    def test_quadrotor_hover_fixed_point(self, quadrotor):
        # gravity feedforward cancels gravity exactly at zero tilt
        out = step_nominal(quadrotor, np.zeros(6), np.zeros(2))
        assert np.allclose(out, np.zeros(6), atol=1e-12)

    def test_pure_function_bit_exact(self, unicycle):
        x = np.array([1.3, -0.4, 0.7])
        u = np.array([0.5, -1.0])
        a = step_nominal(unicycle, x, u)
        b = step_nominal(unicycle, x, u)
        assert np.array_equal(a, b)

    def test_dimension_mismatch_rejected(self, unicycle):
        with pytest.raises(DimensionError):
            step_nominal(unicycle, np.zeros(4), np.zeros(2))
        with pytest.raises(DimensionError):
            step_nominal(unicycle, np.zeros(3), np.zeros(3))

    def test_input_outside_box_rejected(self, unicycle):
        with pytest.raises(InputSetError):
            step_nominal(unicycle, np.zeros(3), np.array([2.5, 0.0]))

    def test_batched_transition_matches_single(self, unicycle):
        rng = np.random.default_rng(0)
        xs = rng.normal(size=(40, 3))
        us = rng.uniform(-2, 2, size=(40, 2))
        batched = unicycle.transition(xs, us)
        for i in range(40):
            assert np.array_equal(batched[i],
                                  unicycle.transition(xs[i], us[i]))


class TestEstimateLipschitz:
    def test_contractive_linear_converges_from_below(self):
        plant = LinearPlant(a=0.5 * np.eye(2), b=np.zeros((2, 1)),
                            input_set=Box(lower=[0], upper=[0]))
        est = estimate_lipschitz(plant, unit_box(2), samples=4000, seed=1)
        assert 0.45 <= est <= 0.5 * (1 + 1e-9)

    def test_rotation_estimates_one(self):
        plant = LinearPlant(a=[[0.0, 1.0], [-1.0, 0.0]], b=np.zeros((2, 1)),
                            input_set=Box(lower=[0], upper=[0]))
        est = estimate_lipschitz(plant, unit_box(2), samples=2000, seed=2)
        assert est == pytest.approx(1.0, rel=1e-6)

    def test_never_exceeds_certified_on_linear(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            a = rng.normal(size=(3, 3)) * 0.5
            plant = LinearPlant(a=a, b=np.zeros((3, 1)),
                                input_set=Box(lower=[0], upper=[0]))
            est = estimate_lipschitz(plant, unit_box(3), 2000, seed=3)
            assert est <= plant.lipschitz * (1 + 1e-9)

    def test_degenerate_domain_rejected(self, unicycle):
        dom = Box(lower=[0, 0, 0], upper=[1, 0, 1])
        with pytest.raises(DomainError):
            estimate_lipschitz(unicycle, dom, 100, seed=0)

    def test_needs_two_samples(self, unicycle):
        with pytest.raises(ParameterError):
            estimate_lipschitz(unicycle, unit_box(3), 1, seed=0)

    def test_reproducible_given_seed(self, unicycle):
        dom = Box(lower=[-2, -2, -3], upper=[4, 4, 3])
        a = estimate_lipschitz(unicycle, dom, 500, seed=42)
        b = estimate_lipschitz(unicycle, dom, 500, seed=42)
        assert a == b


class TestScenarioPlants:
    def test_unicycle_estimate_below_certified_bound(self):
        # scenario workspace probing stays below the certified constant the
        # tube consumes; the honest estimate exceeds one (the map expands
        # laterally under nonzero velocity commands, a nonholonomic floor),
        # which is why the expansive branch of the radius formula is used
        plant = UnicyclePlant(input_set=Box(lower=[-2, -2], upper=[2, 2]),
                              theta_ref=-2.12, lipschitz=1.035)
        dom = Box(lower=[-4.0, -2.0, -4.5], upper=[6.0, 5.5, 4.0])
        est = estimate_lipschitz(plant, dom, samples=20_000, seed=42)
        assert 1.0 < est <= plant.lipschitz

    def test_unicycle_coarse_gain_near_paper_scale(self):
        # at tube-scale separations the map's measured gain is close to one,
        # the regime sampling-based estimates report
        plant = UnicyclePlant(input_set=Box(lower=[-2, -2], upper=[2, 2]),
                              theta_ref=-2.12)
        dom = Box(lower=[-4.0, -2.0, -4.5], upper=[6.0, 5.5, 4.0])
        est = estimate_gain_at_scale(plant, dom, (0.2, 2.0), 20_000, seed=7)
        assert 0.9 <= est <= 1.05

    def test_quadrotor_estimate_below_certified_bound(self, quadrotor_design):
        gain, _, _ = design_quadrotor_stabilizer(
            q_diag=(0.4, 0.4, 0.3, 0.3, 0.3, 0.1), r_diag=(4, 4))
        plant = QuadrotorPlant(input_set=Box(lower=[-3, -3], upper=[3, 3]),
                               gain=gain, transform=np.eye(6), lipschitz=1.011)
        dom = Box(lower=[-0.4, -0.4, -0.30, -1.5, -1.5, -1.5],
                  upper=[1.6, 1.2, 0.30, 1.5, 1.5, 1.5])
        est = estimate_lipschitz(plant, dom, samples=20_000, seed=42)
        assert 1.0 < est <= plant.lipschitz


class TestQuadrotorDesign:
    def test_transform_preserves_positions(self, quadrotor_design):
        _, transform, _ = quadrotor_design
        assert np.allclose(transform[:2], np.eye(6)[:2], atol=1e-12)

    def test_contraction_below_one_at_hover(self, quadrotor_design):
        _, _, contraction = quadrotor_design
        assert contraction < 1.0

    def test_contraction_equals_spectral_radius(self, quadrotor_design):
        # the eigen-balanced metric achieves the best possible gain
        gain, transform, contraction = quadrotor_design
        from ptmpc.systems import _quadrotor_hover_linearization
        a_c, b_c = _quadrotor_hover_linearization(9.8, 0.25, 0.035, 0.141)
        j_cl = np.eye(6) + 0.001 * a_c + (0.001 * b_c) @ gain
        rho = np.abs(np.linalg.eigvals(j_cl)).max()
        assert contraction == pytest.approx(rho, rel=1e-6)

    def test_transformed_plant_contracts_near_hover(self, quadrotor):
        # honest probing of the realization over a gentle envelope stays
        # below one: the transformed coordinates expose the contraction
        dom = Box(lower=-0.05 * np.ones(6), upper=0.05 * np.ones(6))
        est = estimate_lipschitz(quadrotor, dom, samples=4000, seed=5)
        assert est < 1.0

    def test_round_trip_coordinates(self, quadrotor):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(10, 6))
        z = quadrotor.from_physical(x)
        assert np.allclose(quadrotor.to_physical(z), x, atol=1e-10)
        assert np.allclose(z[:, :2], x[:, :2], atol=1e-12)

    def test_physical_constants_validated(self):
        with pytest.raises(ParameterError):
            QuadrotorPlant(input_set=Box(lower=[-3, -3], upper=[3, 3]),
                           gain=np.zeros((2, 6)), transform=np.eye(6),
                           mass=0.0)


class TestPlantValidation:
    def test_linear_certified_constant_is_spectral_norm(self):
        a = np.array([[0.3, 0.9], [0.0, 0.4]])
        plant = LinearPlant(a=a, b=np.eye(2), input_set=unit_box(2))
        assert plant.lipschitz == pytest.approx(np.linalg.norm(a, 2))

    def test_input_box_dimension_checked(self):
        with pytest.raises(DimensionError):
            LinearPlant(a=np.eye(2), b=np.eye(2), input_set=unit_box(3))

    def test_bounded_input_set_required(self):
        with pytest.raises(ParameterError):
            Box(lower=[0.0], upper=[np.inf])
