"""Discrete-time plants: benchmark vehicles, linear systems, Lipschitz probes.

Plants are immutable after construction and safe to share across concurrent
rollouts. ``transition`` accepts batched states/inputs (any leading shape)
and is a pure function of its arguments.

The unicycle and planar-quadrotor plants embed their stabilizing feedback
in the transition map, so the externally applied input is an additive
correction bounded by the plant's input box. The quadrotor is expressed in
linearly transformed state coordinates (a constant realization matrix
whose first two rows preserve the physical plane positions); the transform
is chosen so that the stabilized map is a contraction in the plain
Euclidean norm of the realization, which the tube machinery requires.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError, DomainError, InputSetError, ParameterError
from .geometry import Box


class Plant:
    """Base interface: a transition map with an input box and a Lipschitz bound.

    Attributes:
        state_dim: dimension of the state vector.
        input_dim: dimension of the input vector.
        input_set: admissible input box (nonempty, bounded).
        lipschitz: certified or estimated bound on
            ``||f(x,u) - f(y,u)|| / ||x - y||`` over the operating domain.
    """

    state_dim: int
    input_dim: int
    input_set: Box
    lipschitz: float

    def transition(self, state: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ParameterError("state and input dimensions must be positive")
        if self.input_set.dim != self.input_dim:
            raise DimensionError("input box dimension mismatch")
        if self.lipschitz < 0.0:
            raise ParameterError("lipschitz bound must be nonnegative")


@dataclass(frozen=True)
class LinearPlant(Plant):
    """x+ = A x + B u, with the exact Lipschitz constant sigma_max(A)."""

    a: np.ndarray
    b: np.ndarray
    input_set: Box
    lipschitz: float = field(init=False)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_2d(np.asarray(self.b, dtype=float))
        if a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
            raise DimensionError("A must be square and B conformable")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lipschitz",
                           float(np.linalg.norm(a, 2)))
        self._check()

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    @property
    def input_dim(self) -> int:
        return self.b.shape[1]

    def transition(self, state, inputs):
        state = np.asarray(state, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        return state @ self.a.T + inputs @ self.b.T


@dataclass(frozen=True)
class UnicyclePlant(Plant):
    """Planar unicycle with an embedded smooth posture stabilizer.

    State ``[px, py, theta]`` with the heading kept unwrapped (a real
    number); wrapping the angle would make the transition discontinuous at
    the seam and the Lipschitz machinery meaningless there. The embedded
    stabilizer is bounded with bounded gradients:

        v_st  = -k_v * <h, p> / (1 + rho / rho_v)
        w_st  = -k_w * (h x p) / (c0 + rho) - k_h * (theta - theta_ref)

    where ``h`` is the heading vector and ``rho = |p|``. The heading is
    damped toward the fixed approach bearing ``theta_ref`` (default 0);
    strong uniform heading damping is what keeps the map's Lipschitz
    estimate low, and the reference keeps the mission heading force-free.
    The total velocity and turn rate applied are ``v_st + u1`` and
    ``w_st + u2``.
    """

    input_set: Box
    step_size: float = 0.1
    k_v: float = 0.3
    rho_v: float = 2.5
    k_w: float = 0.3
    c0: float = 1.5
    k_h: float = 6.0
    theta_ref: float = 0.0
    lipschitz: float = 1.03

    state_dim = 3
    input_dim = 2

    def __post_init__(self):
        if self.step_size <= 0.0:
            raise ParameterError("step size must be positive")
        self._check()

    def stabilizer(self, state) -> np.ndarray:
        """Stabilizing (velocity, turn-rate) pair for each state."""
        state = np.asarray(state, dtype=float)
        px, py, th = state[..., 0], state[..., 1], state[..., 2]
        ch, sh = np.cos(th), np.sin(th)
        rho = np.hypot(px, py)
        dot = ch * px + sh * py
        cross = ch * py - sh * px
        v = -self.k_v * dot / (1.0 + rho / self.rho_v)
        w = -self.k_w * cross / (self.c0 + rho) \
            - self.k_h * (th - self.theta_ref)
        return np.stack([v, w], axis=-1)

    def transition(self, state, inputs):
        state = np.asarray(state, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        th = state[..., 2]
        st = self.stabilizer(state)
        v = st[..., 0] + inputs[..., 0]
        w = st[..., 1] + inputs[..., 1]
        step = np.stack([v * np.cos(th), v * np.sin(th), w], axis=-1)
        return state + self.step_size * step


@dataclass(frozen=True)
class QuadrotorPlant(Plant):
    """Planar quadrotor in contraction-adapted state coordinates.

    The physical state is ``[px, pz, theta, vx, vz, thetadot]``; the plant
    state is ``z = W x`` for a constant invertible ``W`` whose first two
    rows are the identity on the positions, so obstacle projections onto
    coordinates (0, 1) remain the physical plane. The embedded stabilizer
    is an affine LQR law ``K x + [m g, 0]`` (thrust feedforward cancels
    gravity at hover, making the origin a fixed point).

    Use :func:`design_quadrotor_stabilizer` to produce consistent
    ``(gain, transform)`` pairs.
    """

    input_set: Box
    gain: np.ndarray
    transform: np.ndarray
    step_size: float = 0.001
    gravity: float = 9.8
    arm_length: float = 0.25
    inertia: float = 0.035
    mass: float = 0.141
    lipschitz: float = 1.0

    state_dim = 6
    input_dim = 2

    def __post_init__(self):
        for name in ("step_size", "gravity", "arm_length", "inertia", "mass"):
            if getattr(self, name) <= 0.0:
                raise ParameterError(f"{name} must be strictly positive")
        gain = np.asarray(self.gain, dtype=float)
        w = np.asarray(self.transform, dtype=float)
        if gain.shape != (2, 6) or w.shape != (6, 6):
            raise DimensionError("gain must be 2x6 and transform 6x6")
        if not np.allclose(w[:2], np.eye(6)[:2], atol=1e-9):
            raise ParameterError("transform must preserve position rows")
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "transform", w)
        object.__setattr__(self, "_transform_inv", np.linalg.inv(w))
        object.__setattr__(self, "_identity", bool(np.array_equal(w, np.eye(6))))
        self._check()

    def to_physical(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z if self._identity else z @ self._transform_inv.T

    def from_physical(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x if self._identity else x @ self.transform.T

    def stabilizer(self, z) -> np.ndarray:
        """Affine LQR feedback (thrust, torque) with hover feedforward."""
        x = self.to_physical(z)
        out = x @ self.gain.T
        out = out + np.array([self.mass * self.gravity, 0.0])
        return out

    def _bracket(self, x, thrust, torque):
        th, vx, vz, om = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        ch, sh = np.cos(th), np.sin(th)
        out = np.empty_like(x)
        out[..., 0] = vx * ch - vz * sh
        out[..., 1] = vx * sh + vz * ch
        out[..., 2] = om
        out[..., 3] = vz * om - self.gravity * sh
        out[..., 4] = -vx * om - self.gravity * ch + thrust / self.mass
        out[..., 5] = (self.arm_length / self.inertia) * torque
        return out

    def transition(self, state, inputs):
        z = np.asarray(state, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        x = self.to_physical(z)
        fb = x @ self.gain.T
        thrust = fb[..., 0] + self.mass * self.gravity + inputs[..., 0]
        torque = fb[..., 1] + inputs[..., 1]
        rate = self._bracket(x, thrust, torque)
        if not self._identity:
            rate = rate @ self.transform.T
        return z + self.step_size * rate


def step_nominal(plant: Plant, state, inputs) -> np.ndarray:
    """One noise-free step with full validation (single state only).

    Inputs outside the plant's box are an error here; callers that want
    clamping (the MPC solver) must clamp before stepping.
    """
    state = np.asarray(state, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if state.shape != (plant.state_dim,):
        raise DimensionError(
            f"state has shape {state.shape}, expected ({plant.state_dim},)")
    if inputs.shape != (plant.input_dim,):
        raise DimensionError(
            f"input has shape {inputs.shape}, expected ({plant.input_dim},)")
    if not plant.input_set.contains(inputs):
        raise InputSetError(f"input {inputs} outside the admissible box")
    out = plant.transition(state, inputs)
    if out.shape != (plant.state_dim,):
        raise DimensionError("transition returned a wrong-dimension state")
    return out


def estimate_lipschitz(plant: Plant, domain: Box, samples: int,
                       seed: int) -> float:
    """Sampled lower bound on the state-Lipschitz constant over ``domain``.

    Uses both random pairs drawn from the domain and small-offset pairs
    (finite-difference probing of the local Jacobian gain), with inputs
    sampled from the plant's input box. The returned value is a lower
    bound on the true constant; the sampling seed makes it reproducible.
    """
    if samples < 2:
        raise ParameterError("need at least two samples")
    if domain.dim != plant.state_dim:
        raise DimensionError("domain dimension mismatch")
    if np.any(domain.widths <= 0.0):
        raise DomainError("estimation domain has zero volume")

    rng = np.random.default_rng(seed)
    n_pairs = samples // 2
    n_probe = samples - n_pairs

    best = 0.0
    if n_pairs > 0:
        x = domain.sample(rng, n_pairs)
        y = domain.sample(rng, n_pairs)
        u = plant.input_set.sample(rng, n_pairs)
        sep = np.linalg.norm(x - y, axis=-1)
        keep = sep > 1e-12
        if np.any(keep):
            num = np.linalg.norm(plant.transition(x[keep], u[keep])
                                 - plant.transition(y[keep], u[keep]), axis=-1)
            best = max(best, float(np.max(num / sep[keep])))
    if n_probe > 0:
        x = domain.sample(rng, n_probe)
        d = rng.standard_normal((n_probe, plant.state_dim))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        h = 1e-5 * max(1.0, float(np.mean(domain.widths)))
        u = plant.input_set.sample(rng, n_probe)
        num = np.linalg.norm(plant.transition(x + h * d, u)
                             - plant.transition(x, u), axis=-1)
        best = max(best, float(np.max(num / h)))
    return best


def estimate_gain_at_scale(plant: Plant, domain: Box, separation: tuple,
                           samples: int, seed: int) -> float:
    """Max transition gain over pairs at a fixed separation scale.

    Unlike :func:`estimate_lipschitz` this deliberately excludes
    infinitesimal probing; it measures how strongly the map can expand
    pairs whose distance lies in ``separation = (low, high)``, which is
    the regime a tube of comparable width exercises.
    """
    if samples < 2:
        raise ParameterError("need at least two samples")
    lo, hi = separation
    if not 0.0 < lo <= hi:
        raise ParameterError("separation bounds must satisfy 0 < lo <= hi")
    rng = np.random.default_rng(seed)
    x = domain.sample(rng, samples)
    d = rng.standard_normal((samples, plant.state_dim))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    r = lo + (hi - lo) * rng.random(samples)
    y = x + r[:, None] * d
    u = plant.input_set.sample(rng, samples)
    num = np.linalg.norm(plant.transition(x, u) - plant.transition(y, u),
                         axis=-1)
    return float(np.max(num / r))


def _quadrotor_hover_linearization(g, l, j, m):
    a = np.zeros((6, 6))
    a[0, 3] = 1.0
    a[1, 4] = 1.0
    a[2, 5] = 1.0
    a[3, 2] = -g
    b = np.zeros((6, 2))
    b[4, 0] = 1.0 / m
    b[5, 1] = l / j
    return a, b


def _real_eigen_blocks(mat):
    """Real block eigen-decomposition T, blocks with J = T B T^-1.

    ``blocks`` lists column-index groups of T: singletons for real
    eigenvalues, pairs (real part, imag part) for complex-conjugate pairs,
    so B is block diagonal with rotation-scaling 2x2 blocks.
    """
    lam, vec = np.linalg.eig(mat)
    done: set[int] = set()
    cols = []
    blocks = []
    for i in np.argsort(-np.abs(lam)):
        if i in done:
            continue
        if abs(lam[i].imag) < 1e-12:
            cols.append(vec[:, i].real)
            blocks.append([len(cols) - 1])
            done.add(i)
        else:
            partner = None
            for k in range(len(lam)):
                if k not in done and k != i \
                        and abs(lam[k] - lam[i].conjugate()) < 1e-9:
                    partner = k
                    break
            if partner is None:
                raise ParameterError("unpaired complex eigenvalue")
            cols.append(vec[:, i].real)
            cols.append(vec[:, i].imag)
            blocks.append([len(cols) - 2, len(cols) - 1])
            done.update((i, partner))
    return np.stack(cols, axis=1), blocks


def design_quadrotor_stabilizer(step_size: float = 0.001, gravity: float = 9.8,
                                arm_length: float = 0.25, inertia: float = 0.035,
                                mass: float = 0.141,
                                q_diag=(10.0, 10.0, 1.0, 3.0, 3.0, 0.1),
                                r_diag=(1.0, 1.0)):
    """LQR gain plus a contraction-adapted realization for the quadrotor.

    Returns ``(gain, transform, contraction)`` where ``gain`` is the 2x6
    feedback matrix applied to the physical state, ``transform`` is the
    6x6 realization matrix ``W`` (rows 0-1 exactly the position identity),
    and ``contraction`` is the closed-loop linearized gain
    ``sigma_max(W (I + eta(A + BK)) W^-1)`` at hover, which this
    construction makes equal to the closed-loop spectral radius (the best
    any fixed metric can achieve).

    The metric comes from the eigenvector balancing of the closed loop:
    in eigen-coordinates the linearized map is block diagonal with
    rotation-scaling blocks whose gain is exactly the eigenvalue modulus.
    Per-block scale factors are then chosen (a small linear program) so
    the inverse Gram matrix has an identity position block, which is the
    algebraic condition allowing ``W`` to keep the physical positions as
    the first two coordinates.
    """
    from scipy.optimize import linprog

    a_c, b_c = _quadrotor_hover_linearization(gravity, arm_length, inertia, mass)
    a_d = np.eye(6) + step_size * a_c
    b_d = step_size * b_c
    q = np.diag(np.asarray(q_diag, dtype=float))
    r = np.diag(np.asarray(r_diag, dtype=float))
    p_are = scipy.linalg.solve_discrete_are(a_d, b_d, q, r)
    gain = -np.linalg.solve(r + b_d.T @ p_are @ b_d, b_d.T @ p_are @ a_d)
    j_cl = a_d + b_d @ gain

    t_mat, blocks = _real_eigen_blocks(j_cl)
    grams = [t_mat[:2, b] @ t_mat[:2, b].T for b in blocks]
    nb = len(blocks)
    a_eq = np.array([[g[0, 0] for g in grams],
                     [g[1, 1] for g in grams],
                     [g[0, 1] for g in grams]])
    b_eq = np.array([1.0, 1.0, 0.0])
    # maximize the smallest block weight subject to the position-block
    # normalization; strictly positive weights keep the transform finite
    cost = np.zeros(nb + 1)
    cost[-1] = -1.0
    res = linprog(cost,
                  A_ub=np.hstack([-np.eye(nb), np.ones((nb, 1))]),
                  b_ub=np.zeros(nb),
                  A_eq=np.hstack([a_eq, np.zeros((3, 1))]), b_eq=b_eq,
                  bounds=[(None, None)] * (nb + 1))
    if not res.success or res.x[-1] <= 1e-12:
        raise ParameterError("no positive block scaling; adjust LQR weights")
    weights = res.x[:nb]
    scale = np.ones(t_mat.shape[1])
    for bi, blk in enumerate(blocks):
        for ci in blk:
            scale[ci] = math.sqrt(weights[bi])
    w0 = np.linalg.inv(t_mat * scale)
    p = w0.T @ w0
    p = 0.5 * (p + p.T)
    p_sqrt = scipy.linalg.sqrtm(p).real
    m_rows = np.linalg.inv(p_sqrt)[:2, :]
    o = np.vstack([m_rows, scipy.linalg.null_space(m_rows).T])
    w = o @ p_sqrt
    w[:2] = 0.0
    w[0, 0] = w[1, 1] = 1.0
    contraction = float(np.linalg.norm(w @ j_cl @ np.linalg.inv(w), 2))
    return gain, w, contraction
