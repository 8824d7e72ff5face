"""Continuous sampled-time systems, disturbance boxes and color maps.

Vector fields and growth bounds are vectorized over leading axes: states
have shape (..., n), inputs (..., m), disturbances (..., n).
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import IntegrationDivergedError

logger = logging.getLogger(__name__)

RK4_SUBSTEPS = 5


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size == 0:
            raise ValueError(f"box bounds must be non-empty vectors of equal length, got {lo} and {hi}")
        if np.any(lo > hi):
            raise ValueError(f"box lower bound exceeds upper bound: {lo} > {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.size

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self):
        return 0.5 * (self.hi - self.lo)

    def contains(self, x, tol=0.0):
        """Closed membership, vectorized over leading axes."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def is_subset_of(self, other):
        return bool(np.all(other.lo <= self.lo) and np.all(self.hi <= other.hi))

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def to_list(self):
        return [self.lo.tolist(), self.hi.tolist()]

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __repr__(self):
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


@dataclass(frozen=True, eq=False)
class SampledSystem:
    state_dim: int
    input_dim: int
    vector_field: object
    w_normal: Box
    w_high: Box
    tau: float
    growth_bound: object
    name: str = "system"


@dataclass(frozen=True, eq=False)
class ColorMap:
    """Ordered color regions; the first region containing a point wins.

    Region and obstacle boxes are half-open, [lo, hi), matching the grid
    cells they are meant to be aligned with.
    """

    regions: tuple = ()
    default_color: int = 0
    obstacle_boxes: tuple = ()

    def __post_init__(self):
        regions = tuple((tuple(boxes), int(color)) for boxes, color in self.regions)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "obstacle_boxes", tuple(self.obstacle_boxes))

    @property
    def colors(self):
        return sorted({self.default_color} | {color for _, color in self.regions})

    @property
    def max_color(self):
        return max(self.colors)


def _in_boxes(boxes, x):
    inside = np.zeros(x.shape[:-1], dtype=bool)
    for box in boxes:
        inside |= np.all((x >= box.lo) & (x < box.hi), axis=-1)
    return inside


def color_of(cmap, x):
    """Color of one point (int) or of an array of points (int array)."""
    x = np.asarray(x, dtype=float)
    colors = np.full(x.shape[:-1], cmap.default_color, dtype=np.int64)
    assigned = np.zeros(x.shape[:-1], dtype=bool)
    for boxes, color in cmap.regions:
        hit = _in_boxes(boxes, x) & ~assigned
        colors[hit] = color
        assigned |= hit
    return int(colors) if colors.ndim == 0 else colors


def is_obstacle(cmap, x):
    x = np.asarray(x, dtype=float)
    hit = _in_boxes(cmap.obstacle_boxes, x)
    return bool(hit) if hit.ndim == 0 else hit


def _rk4(rhs, x, tau, substeps):
    h = tau / substeps
    for _ in range(substeps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def integrate_nominal(sys, x, u, w, tau=None, substeps=RK4_SUBSTEPS):
    """Classical RK4 solution of x' = f(x, u, w) over [0, tau].

    u and w are held constant over the sampling period.
    """
    tau = sys.tau if tau is None else tau
    if tau <= 0:
        raise ValueError(f"sampling period must be positive, got {tau}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    x_next = _rk4(lambda z: sys.vector_field(z, u, w), x, tau, substeps)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationDivergedError(f"integration of {sys.name} produced a non-finite state")
    return x_next


def integrate_growth(sys, r0, u, w_radius, tau=None, substeps=RK4_SUBSTEPS):
    """Radius of the attainable box after tau, same scheme as the nominal flow."""
    tau = sys.tau if tau is None else tau
    u = np.asarray(u, dtype=float)
    w_radius = np.asarray(w_radius, dtype=float)
    r = _rk4(lambda z: sys.growth_bound(z, u, w_radius), np.asarray(r0, dtype=float), tau, substeps)
    if not np.all(np.isfinite(r)):
        raise IntegrationDivergedError(f"growth bound of {sys.name} produced a non-finite radius")
    return r


def validate_problem(sys, cmap, samples=1000, seed=0, strict=True):
    """Check the problem tuple; returns a list of error messages, empty when ok.

    With strict=False an equal pair of disturbance boxes is accepted (the
    abstraction then simply has no disturbance edges).
    """
    errors = []
    n = sys.state_dim
    for label, box in (("w_normal", sys.w_normal), ("w_high", sys.w_high)):
        if box.dim != n:
            errors.append(f"{label} has dimension {box.dim}, expected {n}")
    if not errors:
        if not sys.w_normal.is_subset_of(sys.w_high):
            errors.append("w_normal is not contained in w_high")
        elif strict and sys.w_normal == sys.w_high:
            errors.append("w_high must strictly contain w_normal in at least one component")
    if not sys.tau > 0:
        errors.append(f"sampling period must be positive, got {sys.tau}")

    colors = [cmap.default_color] + [color for _, color in cmap.regions]
    bad = [c for c in colors if not isinstance(c, (int, np.integer)) or c < 0]
    if bad:
        errors.append(f"colors must be nonnegative integers, got {bad}")
    for boxes, color in cmap.regions:
        for box in boxes:
            if box.dim != n:
                errors.append(f"region box {box} of color {color} has dimension {box.dim}, expected {n}")
    for box in cmap.obstacle_boxes:
        if box.dim != n:
            errors.append(f"obstacle box {box} has dimension {box.dim}, expected {n}")
    if errors:
        return errors

    rng = np.random.default_rng(seed)
    w_max = sys.w_high.radius
    r = rng.uniform(0.0, 1.0, size=(samples, n))
    wr = rng.uniform(0.0, 1.0, size=(samples, n)) * w_max
    dw = rng.uniform(0.0, 1.0, size=(samples, n)) * w_max
    u = rng.uniform(-1.0, 1.0, size=(samples, sys.input_dim))
    base = sys.growth_bound(r, u, wr)
    # cooperative: component i may not drop when another component j grows;
    # the diagonal is unconstrained
    j = rng.integers(0, n, size=samples)
    bumped = r.copy()
    bumped[np.arange(samples), j] += rng.uniform(0.0, 0.5, size=samples)
    off_diagonal = np.arange(n)[None, :] != j[:, None]
    if np.any((sys.growth_bound(bumped, u, wr) < base - 1e-12) & off_diagonal):
        errors.append("growth bound is not monotone in the off-diagonal radius components")
    if np.any(sys.growth_bound(r, u, wr + dw) < base - 1e-12):
        errors.append("growth bound is not monotone in the disturbance radius")

    w = sys.w_normal.sample(rng, samples)
    if not np.all(sys.w_high.contains(w, tol=1e-12)):
        errors.append("sampled w_normal points fall outside w_high")
    return errors


@dataclass(frozen=True)
class Unicycle:
    """Kinematic unicycle; x = (position, position, heading), u = (speed, turn rate)."""

    def field(self, x, u, w):
        return np.stack(
            [
                u[..., 0] * np.cos(x[..., 2]) + w[..., 0],
                u[..., 0] * np.sin(x[..., 2]) + w[..., 1],
                u[..., 1] + w[..., 2] + 0.0 * x[..., 2],
            ],
            axis=-1,
        )

    def growth_bound(self, r, u, w_radius):
        speed = np.abs(u[..., 0])
        return np.stack(
            [
                speed * r[..., 2] + w_radius[..., 0],
                speed * r[..., 2] + w_radius[..., 1],
                w_radius[..., 2] + 0.0 * r[..., 2],
            ],
            axis=-1,
        )


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """x' = A x + B u + w with the Metzler growth bound r' = M(A) r + w_radius."""

    A: np.ndarray
    B: np.ndarray
    metzler: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f"incompatible shapes A{A.shape}, B{B.shape}")
        metzler = np.abs(A)
        np.fill_diagonal(metzler, np.diag(A))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "metzler", metzler)

    def field(self, x, u, w):
        return x @ self.A.T + u @ self.B.T + w

    def growth_bound(self, r, u, w_radius):
        return r @ self.metzler.T + w_radius + 0.0 * u[..., :1]


def unicycle_system(d=0.5, tau=0.3, w_nominal=0.05):
    """Unicycle with velocity disturbances on the position components only."""
    dynamics = Unicycle()
    return SampledSystem(
        state_dim=3,
        input_dim=2,
        vector_field=dynamics.field,
        w_normal=Box([-w_nominal, -w_nominal, 0.0], [w_nominal, w_nominal, 0.0]),
        w_high=Box([-d, -d, 0.0], [d, d, 0.0]),
        tau=tau,
        growth_bound=dynamics.growth_bound,
        name="unicycle",
    )


def linear_system(A, B, w_normal, w_high, tau=0.3, name="linear"):
    dynamics = LinearDynamics(A, B)
    return SampledSystem(
        state_dim=dynamics.A.shape[0],
        input_dim=dynamics.B.shape[1],
        vector_field=dynamics.field,
        w_normal=w_normal,
        w_high=w_high,
        tau=tau,
        growth_bound=dynamics.growth_bound,
        name=name,
    )
