"""Trajectory integration, backward exit detection, Jacobians and boundary cycles.

Characteristics solve dX/ds = V, dV/ds = -iota grad(phi)(X) per species.  A
field handle supplies grad(phi) (and its Jacobian for variational runs);
handles built from Poisson solutions or plain callables share the interface.
Time may run backward; fields are frozen in time within one handle, which
also realizes the negative-time extension (the initial-data field continues
for s < 0 unchanged).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .geometry import INFINITE_EXIT, ConvexDomain
from .phase_grid import C_MU

__all__ = [
    "FieldHandle",
    "TrajectoryState",
    "ExitRecord",
    "NTDecomposition",
    "CycleSequence",
    "FieldDecayBounds",
    "advance",
    "backward_exit",
    "nt_decompose",
    "jacobian_dX_dv",
    "jacobian_fd",
    "diffuse_velocity",
    "build_cycles",
    "escape_probability",
]


class FieldHandle:
    """grad(phi) evaluations for the trajectory integrator.

    `at(x)` returns grad(phi); `jacobian_at(x)` its 3x3 derivative (the
    potential Hessian).  The handle is time independent: within a fixed
    iterate the field is frozen, and for s < 0 the same values continue.
    """

    def __init__(
        self,
        fn: Callable,
        jac: Optional[Callable] = None,
        fd_step: float = 1e-5,
        is_zero: bool = False,
    ):
        self._fn = fn
        self._jac = jac
        self._fd = fd_step
        self.is_zero = is_zero  # lets exit detection take the exact chord path

    def at(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._fn(np.asarray(x, dtype=float)), dtype=float)

    def jacobian_at(self, x: np.ndarray) -> np.ndarray:
        if self._jac is not None:
            return np.asarray(self._jac(np.asarray(x, dtype=float)), dtype=float)
        h = self._fd
        out = np.empty((3, 3))
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            out[:, a] = (self.at(x + e) - self.at(x - e)) / (2.0 * h)
        return out

    @classmethod
    def zero(cls) -> "FieldHandle":
        return cls(lambda x: np.zeros(np.shape(x)), lambda x: np.zeros((3, 3)), is_zero=True)

    @classmethod
    def from_poisson(cls, solution) -> "FieldHandle":
        # solution.field_at returns -grad(phi); hessian_at returns Hess(phi)
        return cls(lambda x: -solution.field_at(x), solution.hessian_at)


@dataclass(frozen=True)
class TrajectoryState:
    s: float
    X: np.ndarray
    V: np.ndarray
    species: int  # +1 or -1; acceleration is -species * grad(phi)

    def __post_init__(self):
        if self.species not in (1, -1):
            raise ValueError("species must be +1 or -1")


@dataclass(frozen=True)
class ExitRecord:
    """Backward exit data; `margin` is n(x_b) . v_b, negative off grazing."""

    t_b: float
    x_b: Optional[np.ndarray]
    v_b: Optional[np.ndarray]
    margin: float
    xi_residual: float
    infinite: bool = False


@dataclass(frozen=True)
class NTDecomposition:
    x_n: float
    x_par_point: np.ndarray
    x_par_chart: np.ndarray
    v_n: float
    v_par: np.ndarray
    normal: np.ndarray


@dataclass
class CycleSequence:
    """Backward bounce chain: absolute times t_1 > t_2 > ..., boundary points
    and the freshly sampled outgoing velocities (n . v_j > 0)."""

    times: list
    points: list
    velocities: list
    margins: list
    weights: list
    k_reached: int
    rejections: int


@dataclass(frozen=True)
class FieldDecayBounds:
    """Decay envelopes: sup_t e^{lam1 t}|E|_inf <= delta1 and the gradient
    analogue (lam2, delta2)."""

    lam1: float
    delta1: float
    lam2: float
    delta2: float

    def __post_init__(self):
        for name in ("lam1", "delta1", "lam2", "delta2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def jacobian_hypothesis_ok(self, eps: float) -> bool:
        return self.delta2 + self.lam2 + eps <= 1.0


def _acceleration(field: FieldHandle, x: np.ndarray, species: int) -> np.ndarray:
    return -float(species) * field.at(x)


def _rk4_step(x: np.ndarray, v: np.ndarray, species: int, field: FieldHandle, ds: float):
    a1 = _acceleration(field, x, species)
    k1x, k1v = v, a1
    a2 = _acceleration(field, x + 0.5 * ds * k1x, species)
    k2x, k2v = v + 0.5 * ds * k1v, a2
    a3 = _acceleration(field, x + 0.5 * ds * k2x, species)
    k3x, k3v = v + 0.5 * ds * k2v, a3
    a4 = _acceleration(field, x + ds * k3x, species)
    k4x, k4v = v + ds * k3v, a4
    xn = x + ds / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    vn = v + ds / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return xn, vn


def advance(state: TrajectoryState, field: FieldHandle, ds: float) -> TrajectoryState:
    """One classical 4th-order step; ds may be negative (backward time)."""
    xn, vn = _rk4_step(state.X, state.V, state.species, field, ds)
    return TrajectoryState(s=state.s + ds, X=xn, V=vn, species=state.species)


def _step_size(domain: ConvexDomain, v: np.ndarray, a: np.ndarray, max_frac: float = 0.1) -> float:
    R = domain.bounding_radius
    speed = float(np.linalg.norm(v))
    acc = float(np.linalg.norm(a))
    scale = max(speed, math.sqrt(acc * R), 1e-8)
    return max_frac * R / scale


def backward_exit(
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    max_time: Optional[float] = None,
    refine_tol: Optional[float] = None,
    max_step: Optional[float] = None,
) -> ExitRecord:
    """First backward boundary crossing of the characteristic through (t, x, v).

    Marches backward with per-step sign checks of the level set and refines
    the crossing by bisection inside the bracketing step; convexity plus the
    0.1 R / speed step cap rule out undetected exit-and-reentry.  Returns
    elapsed time t_b >= 0, the exit point and velocity, and the grazing
    margin n(x_b) . v_b.  `max_step` caps the marching step (convergence
    studies tie it to an external step size).
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    R = domain.bounding_radius
    tol = refine_tol if refine_tol is not None else 1e-10 * R
    xi0 = float(domain.xi(x))
    if xi0 > domain.boundary_tol:
        raise ValueError("backward_exit expects a start inside the closure")
    if abs(xi0) <= domain.boundary_tol:
        n0 = domain.outward_normal(x)
        nv0 = float(np.dot(n0, v))
        if nv0 < 0.0:
            # incoming boundary point: the backward trajectory exits at once
            return ExitRecord(
                t_b=0.0, x_b=x.copy(), v_b=v.copy(), margin=nv0, xi_residual=abs(xi0)
            )
        if nv0 == 0.0:
            raise ValueError("boundary start requires nonzero normal velocity")
    if max_time is None:
        max_time = 1e3 * R

    a0 = _acceleration(field, x, species)
    if np.linalg.norm(v) < 1e-14 and np.linalg.norm(a0) < 1e-14:
        return ExitRecord(
            t_b=INFINITE_EXIT, x_b=None, v_b=None, margin=0.0, xi_residual=0.0, infinite=True
        )

    if field.is_zero:
        # straight-line chord, exact
        t_exit, xb = domain.ray_exit(x, -v)
        if not math.isfinite(t_exit):
            return ExitRecord(
                t_b=INFINITE_EXIT, x_b=None, v_b=None, margin=0.0, xi_residual=0.0, infinite=True
            )
        n = domain.outward_normal(xb)
        return ExitRecord(
            t_b=float(t_exit),
            x_b=xb,
            v_b=v.copy(),
            margin=float(np.dot(n, v)),
            xi_residual=abs(float(domain.xi(xb))),
        )

    elapsed = 0.0
    cx, cv = x.copy(), v.copy()
    while elapsed < max_time:
        ds = _step_size(domain, cv, _acceleration(field, cx, species))
        if max_step is not None:
            ds = min(ds, max_step)
        nx, nv = _rk4_step(cx, cv, species, field, -ds)
        if float(domain.xi(nx)) >= 0.0:
            # bracketing step: bisect the substep length from the inside anchor
            lo, hi = 0.0, ds
            bx, bv = nx, nv
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                mx, mv = _rk4_step(cx, cv, species, field, -mid)
                if float(domain.xi(mx)) >= 0.0:
                    hi = mid
                    bx, bv = mx, mv
                else:
                    lo = mid
                if abs(float(domain.xi(bx))) <= tol:
                    break
            t_b = elapsed + hi
            n = domain.outward_normal(bx)
            return ExitRecord(
                t_b=t_b,
                x_b=bx,
                v_b=bv,
                margin=float(np.dot(n, bv)),
                xi_residual=abs(float(domain.xi(bx))),
            )
        cx, cv = nx, nv
        elapsed += ds
    return ExitRecord(
        t_b=INFINITE_EXIT, x_b=None, v_b=None, margin=0.0, xi_residual=0.0, infinite=True
    )


def nt_decompose(
    domain: ConvexDomain,
    X: np.ndarray,
    V: np.ndarray,
    collar: Optional[float] = None,
) -> NTDecomposition:
    """Normal-tangential split near the boundary.

    x_n is the distance to the boundary, v_n = V . (-n) the inward-oriented
    normal speed; tangential parts are chart coordinates in the footpoint
    frame.
    """
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    if float(domain.xi(X)) > domain.boundary_tol:
        raise ValueError("point is outside the domain closure")
    cw = collar if collar is not None else 0.5 * domain.bounding_radius
    near = domain.nearest_boundary(X)
    if near.distance > cw:
        raise ValueError(
            f"point is outside the boundary collar: distance {near.distance:.3e} > {cw:.3e}"
        )
    frame = domain.tangent_frame(near.point)
    n = frame.normal
    return NTDecomposition(
        x_n=float(near.distance),
        x_par_point=near.point,
        x_par_chart=np.array([float(np.dot(X - near.point, frame.tau1)),
                              float(np.dot(X - near.point, frame.tau2))]),
        v_n=float(np.dot(V, -n)),
        v_par=np.array([float(np.dot(V, frame.tau1)), float(np.dot(V, frame.tau2))]),
        normal=n,
    )


def _integrate_to(
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    s: float,
    n_steps: Optional[int] = None,
):
    """Fixed-step RK4 flow from time t to time s (s < t), failing on exit."""
    span = t - s
    if n_steps is None:
        ds0 = _step_size(domain, v, _acceleration(field, x, species))
        n_steps = max(1, int(math.ceil(span / ds0)))
    ds = span / n_steps
    cx, cv = np.asarray(x, float).copy(), np.asarray(v, float).copy()
    for _ in range(n_steps):
        cx, cv = _rk4_step(cx, cv, species, field, -ds)
        if float(domain.xi(cx)) >= 0.0:
            raise ValueError("trajectory left the domain inside the requested span")
    return cx, cv, n_steps


def jacobian_dX_dv(
    s: float,
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    n_steps: Optional[int] = None,
) -> tuple[np.ndarray, float]:
    """d X(s; t, x, v) / d v by integrating the variational equations.

    Free transport gives -(t-s) Id with determinant -(t-s)^3; small fields
    perturb both at O(delta).  Raises if the base trajectory exits (s, t).
    """
    if s >= t:
        raise ValueError("requires s < t")
    span = t - s
    if n_steps is None:
        ds0 = _step_size(domain, v, _acceleration(field, x, species))
        n_steps = max(1, int(math.ceil(span / ds0)))
    ds = span / n_steps

    cx = np.asarray(x, float).copy()
    cv = np.asarray(v, float).copy()
    Y = np.zeros((3, 3))
    W = np.eye(3)

    def rates(px, pv, pY, pW):
        acc = _acceleration(field, px, species)
        dA = -float(species) * field.jacobian_at(px)  # d(acceleration)/dx
        return pv, acc, pW, dA @ pY

    for _ in range(n_steps):
        k1 = rates(cx, cv, Y, W)
        k2 = rates(cx - 0.5 * ds * k1[0], cv - 0.5 * ds * k1[1], Y - 0.5 * ds * k1[2], W - 0.5 * ds * k1[3])
        k3 = rates(cx - 0.5 * ds * k2[0], cv - 0.5 * ds * k2[1], Y - 0.5 * ds * k2[2], W - 0.5 * ds * k2[3])
        k4 = rates(cx - ds * k3[0], cv - ds * k3[1], Y - ds * k3[2], W - ds * k3[3])
        cx = cx - ds / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        cv = cv - ds / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Y = Y - ds / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        W = W - ds / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        if float(domain.xi(cx)) >= 0.0:
            raise ValueError("trajectory left the domain inside (s, t)")
    return Y, float(np.linalg.det(Y))


def jacobian_fd(
    s: float,
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    eps: float = 1e-6,
    n_steps: Optional[int] = None,
) -> np.ndarray:
    """Central-difference check of the variational Jacobian."""
    v = np.asarray(v, dtype=float)
    if n_steps is None:
        ds0 = _step_size(domain, v, _acceleration(field, np.asarray(x, float), species))
        n_steps = max(1, int(math.ceil((t - s) / ds0)))
    out = np.empty((3, 3))
    for a in range(3):
        e = np.zeros(3)
        e[a] = eps
        xp, _, _ = _integrate_to(t, x, v + e, species, field, domain, s, n_steps)
        xm, _, _ = _integrate_to(t, x, v - e, species, field, domain, s, n_steps)
        out[:, a] = (xp - xm) / (2.0 * eps)
    return out


def diffuse_velocity(
    rng: np.random.Generator, normal: np.ndarray, frame_tau: Optional[tuple] = None
) -> np.ndarray:
    """One draw from the boundary probability measure c_mu mu(v)(n.v) dv.

    The outgoing normal component is Rayleigh(1), tangential components are
    standard normal; `normal` is the outward unit normal at the point.
    """
    n = np.asarray(normal, dtype=float)
    if frame_tau is None:
        trial = np.zeros(3)
        trial[int(np.argmin(np.abs(n)))] = 1.0
        t1 = trial - np.dot(trial, n) * n
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
    else:
        t1, t2 = frame_tau
    vn = math.sqrt(-2.0 * math.log(1.0 - rng.random()))
    g1, g2 = rng.normal(), rng.normal()
    return vn * n + g1 * t1 + g2 * t2


def build_cycles(
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    k: int,
    field: FieldHandle,
    domain: ConvexDomain,
    rng: Optional[np.random.Generator] = None,
    sampler: Optional[Callable] = None,
    max_rejections: int = 1000,
) -> CycleSequence:
    """Backward bounce chain with freshly sampled boundary velocities.

    The first leg uses the given velocity; each subsequent leg starts from
    the previous exit point with a velocity drawn by `sampler(x, n, rng)`
    (default: the diffuse measure).  Sampled velocities must be outgoing;
    incoming draws are rejected and counted.  The chain stops after k legs
    or at the first nonpositive bounce time.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    times, points, velocities, margins, weights = [], [], [], [], []
    rejections = 0
    ct, cx, cv = float(t), np.asarray(x, float), np.asarray(v, float)
    for leg in range(k):
        rec = backward_exit(ct, cx, cv, species, field, domain)
        if rec.infinite:
            break
        t_next = ct - rec.t_b
        times.append(t_next)
        points.append(rec.x_b)
        margins.append(rec.margin)
        if t_next <= 0.0:
            break
        n = domain.outward_normal(rec.x_b)
        for _ in range(max_rejections):
            if sampler is None:
                vnew = diffuse_velocity(rng, n)
            else:
                vnew = np.asarray(sampler(rec.x_b, n, rng), dtype=float)
            if float(np.dot(n, vnew)) > 0.0:
                break
            rejections += 1
        else:
            raise RuntimeError("sampler kept producing incoming velocities")
        velocities.append(vnew)
        weights.append(1.0)
        ct, cx, cv = t_next, rec.x_b, vnew
    k_reached = sum(1 for s_ in times if s_ > 0.0)
    return CycleSequence(
        times=times,
        points=points,
        velocities=velocities,
        margins=margins,
        weights=weights,
        k_reached=k_reached,
        rejections=rejections,
    )


def escape_probability(
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    k: int,
    M: int,
    field: FieldHandle,
    domain: ConvexDomain,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte Carlo estimate of the chance the chain survives k sampled bounces.

    Estimates the product-measure integral of 1_{t_{k+1} > 0}: the first leg
    is deterministic in the given velocity, then k boundary velocities are
    drawn from the diffuse measure.  Returns (estimate, standard error).
    t <= 0 short-circuits to exactly (0, 0).
    """
    if M < 1:
        raise ValueError("M must be positive")
    if t <= 0.0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(M):
        seq = build_cycles(t, x, v, species, k + 1, field, domain, rng=rng)
        if len(seq.times) == k + 1 and seq.times[-1] > 0.0:
            hits += 1
    p = hits / M
    stderr = math.sqrt(max(p * (1.0 - p), 0.0) / M)
    return p, stderr
