"""Safe sets as obstacle complements, with exact erosion queries.

A safe set is the complement of a union of inflatable obstacles (disks and
axis-aligned rectangles), optionally intersected with a workspace box.
Eroding the safe set by a ball of radius ``r`` is implemented exactly as
inflating every obstacle by ``r`` (and shrinking the workspace by ``r``),
so membership in the eroded set reduces to inflated-distance tests.

Obstacles constrain a 2-D projection of the state (the position
coordinates); remaining state dimensions are unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{x : lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise DimensionError("box bounds must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ParameterError("box bounds must be finite")
        if np.any(hi < lo):
            raise ParameterError("box upper bound below lower bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def clip(self, x) -> np.ndarray:
        """Project ``x`` (any leading batch shape) onto the box."""
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return self.lower + rng.random(shape) * self.widths

    def inner_margin(self, x) -> np.ndarray:
        """Distance from ``x`` to the box boundary, negative outside.

        For points inside the box this is the exact Euclidean distance to
        the complement; outside it is the (negated) largest per-axis
        deficit, which has the correct sign.
        """
        x = np.asarray(x, dtype=float)
        deficit = np.minimum(x - self.lower, self.upper - x)
        return np.min(deficit, axis=-1)


@dataclass(frozen=True)
class Obstacle:
    """A disk or axis-aligned rectangle blocking a 2-D state projection.

    Fields:
        kind: "disk" or "rect".
        center: disk center (disk only).
        radius: disk radius (disk only), > 0.
        lower/upper: rectangle corners (rect only), ordered.
        dims: indices of the two state coordinates the obstacle constrains.
    """

    kind: str
    dims: tuple[int, int] = (0, 1)
    center: np.ndarray | None = None
    radius: float = 0.0
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if len(self.dims) != 2:
            raise ParameterError("obstacle projection must cover exactly 2 dims")
        if self.kind == "disk":
            c = np.asarray(self.center, dtype=float)
            if c.shape != (2,):
                raise DimensionError("disk center must be a 2-vector")
            if not self.radius > 0.0:
                raise ParameterError("disk radius must be positive")
            object.__setattr__(self, "center", c)
        elif self.kind == "rect":
            lo = np.asarray(self.lower, dtype=float)
            hi = np.asarray(self.upper, dtype=float)
            if lo.shape != (2,) or hi.shape != (2,):
                raise DimensionError("rectangle corners must be 2-vectors")
            if np.any(hi <= lo):
                raise ParameterError("rectangle corners must be ordered")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        else:
            raise ParameterError(f"unknown obstacle kind {self.kind!r}")

    def margin(self, states: np.ndarray) -> np.ndarray:
        """Signed distance from projected states to this obstacle.

        Positive outside (Euclidean distance to the obstacle), zero on the
        boundary, negative inside (penetration depth).
        """
        states = np.asarray(states, dtype=float)
        p = states[..., list(self.dims)]
        if self.kind == "disk":
            return np.linalg.norm(p - self.center, axis=-1) - self.radius
        closest = np.clip(p, self.lower, self.upper)
        outside = np.linalg.norm(p - closest, axis=-1)
        deficit = np.minimum(p - self.lower, self.upper - p)
        inside_depth = np.min(deficit, axis=-1)
        return np.where(outside > 0.0, outside, -np.maximum(inside_depth, 0.0))


def disk(center, radius, dims=(0, 1)) -> Obstacle:
    return Obstacle(kind="disk", center=np.asarray(center, float),
                    radius=float(radius), dims=tuple(dims))


def rect(lower, upper, dims=(0, 1)) -> Obstacle:
    return Obstacle(kind="rect", lower=np.asarray(lower, float),
                    upper=np.asarray(upper, float), dims=tuple(dims))


@dataclass(frozen=True)
class SafeSet:
    """Complement of an obstacle union, optionally bounded by a workspace.

    ``workspace_dims`` selects the state coordinates the workspace box
    constrains (defaults to the box's leading dimensions).
    """

    obstacles: tuple[Obstacle, ...] = ()
    workspace: Box | None = None
    workspace_dims: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.workspace is not None and not self.workspace_dims:
            object.__setattr__(self, "workspace_dims",
                               tuple(range(self.workspace.dim)))

    def obstacle_margin(self, states) -> np.ndarray:
        """Min over obstacles of the signed distance (inf if none)."""
        states = np.asarray(states, dtype=float)
        if not self.obstacles:
            return np.full(states.shape[:-1], np.inf)
        margins = [ob.margin(states) for ob in self.obstacles]
        return np.min(margins, axis=0)

    def workspace_margin(self, states) -> np.ndarray:
        """Depth inside the workspace box (inf when no workspace is set)."""
        states = np.asarray(states, dtype=float)
        if self.workspace is None:
            return np.full(states.shape[:-1], np.inf)
        proj = states[..., list(self.workspace_dims)]
        return self.workspace.inner_margin(proj)


def signed_margin(safe_set: SafeSet, state) -> np.ndarray | float:
    """Largest erosion radius for which ``state`` is still a member.

    Negative inside an obstacle (negated penetration depth) or outside the
    workspace. Consistent with :func:`is_member_eroded`:
    ``signed_margin(s, x) > r`` implies ``is_member_eroded(s, x, r)``, and
    the two coincide except exactly on the workspace boundary, where the
    workspace test is inclusive.
    """
    state = np.asarray(state, dtype=float)
    m = np.minimum(safe_set.obstacle_margin(state),
                   safe_set.workspace_margin(state))
    return float(m) if state.ndim == 1 else m


def is_member_eroded(safe_set: SafeSet, state, erosion: float):
    """Exact membership of ``state`` in the safe set eroded by ``erosion``.

    A state is a member iff its projection is at Euclidean distance
    strictly greater than ``erosion`` from every obstacle and, when a
    workspace is set, at depth at least ``erosion`` inside it.
    """
    if erosion < 0.0:
        raise ParameterError("erosion must be nonnegative")
    state = np.asarray(state, dtype=float)
    ok = (safe_set.obstacle_margin(state) > erosion) \
        & (safe_set.workspace_margin(state) >= erosion)
    return bool(ok) if state.ndim == 1 else ok


def min_corridor_width(safe_set: SafeSet, pair: tuple[int, int]) -> float:
    """Width of the gap between two disk obstacles (center gap minus radii).

    Nonpositive values indicate overlapping or tangent disks (no corridor).
    """
    a, b = (safe_set.obstacles[pair[0]], safe_set.obstacles[pair[1]])
    if a.kind != "disk" or b.kind != "disk":
        raise ParameterError("corridor width is defined for disk pairs")
    return float(np.linalg.norm(a.center - b.center) - a.radius - b.radius)
