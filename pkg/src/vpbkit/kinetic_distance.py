"""Kinetic distance weights and their transport diagnostics.

The regularized distance grades how non-grazing the last backward boundary
contact was: chi((t - t_b + eps)/eps) |n(x_b) . v_b| plus the complementary
cutoff branch.  Because (t_b, x_b, v_b) ride along the characteristics, the
weight is invariant under the Vlasov operator, which is what makes it usable
inside velocity integrals near the boundary.  The legacy collar weight
alpha_tilde and its velocity-lemma ratio are kept for comparison sweeps, and
inverse-moment quadratures expose the integrable alpha^(-sigma) singularity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .characteristics import FieldHandle, TrajectoryState, advance, backward_exit
from .geometry import ConvexDomain

__all__ = [
    "AlphaParams",
    "AlphaTildeValue",
    "VelocityLemmaReport",
    "chi",
    "alpha",
    "transport_residual",
    "alpha_tilde",
    "velocity_lemma_residual",
    "alpha_inverse_moment",
    "weighted_inverse_moment",
]


def chi(tau: float) -> float:
    """Cubic smoothstep cutoff: 0 below 0, 1 above 1, peak slope 1.5 at 1/2."""
    if tau <= 0.0:
        return 0.0
    if tau >= 1.0:
        return 1.0
    return tau * tau * (3.0 - 2.0 * tau)


@dataclass(frozen=True)
class AlphaParams:
    """Regularization time eps and the cutoff profile used by alpha.

    Any replacement cutoff must vanish below 0, saturate to 1 above 1, and
    keep its slope inside [0, 4]; the constructor spot-checks this on a
    sample grid.
    """

    eps: float = 0.1
    cutoff: Callable = chi

    def __post_init__(self):
        if not self.eps > 0.0:
            raise ValueError("eps must be positive")
        taus = np.linspace(-0.5, 1.5, 81)
        vals = np.array([float(self.cutoff(t)) for t in taus])
        if abs(vals[0]) > 1e-12 or abs(vals[-1] - 1.0) > 1e-12:
            raise ValueError("cutoff must be 0 below tau=0 and 1 above tau=1")
        slopes = np.diff(vals) / np.diff(taus)
        if slopes.min() < -1e-9 or slopes.max() > 4.0 + 1e-9:
            raise ValueError("cutoff slope must stay within [0, 4]")


def alpha(
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    params: Optional[AlphaParams] = None,
    max_step: Optional[float] = None,
) -> float:
    """Regularized kinetic distance at the phase point (t, x, v).

    A saturated history (t >= t_b) returns |n(x_b) . v_b| exactly; exits
    older than the time origin blend into the cutoff branch, and an infinite
    exit (stationary trajectory) is its pure limit alpha = 1.
    """
    p = params if params is not None else AlphaParams()
    rec = backward_exit(t, x, v, species, field, domain, max_step=max_step)
    if rec.infinite:
        return 1.0
    c = float(p.cutoff((float(t) - rec.t_b + p.eps) / p.eps))
    return c * abs(rec.margin) + (1.0 - c)


def transport_residual(
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    params: Optional[AlphaParams] = None,
    ds: float = 1e-2,
    span: float = 0.5,
    n_samples: int = 8,
) -> float:
    """Max drift of alpha along one backward flow segment.

    The segment is integrated with uniform RK4 steps of size <= ds and alpha
    is re-evaluated at ~n_samples intermediate states with the exit marcher
    capped at the same step.  The reference value at (t, x, v) uses a 10x
    finer march: with equal steps the discrete exit map is exactly invariant
    under the discrete flow and the truncation error cancels to roundoff, so
    the fine reference is what exposes the integrator order.  Free transport
    returns roundoff, smooth fields O(ds^4).
    """
    ref = alpha(t, x, v, species, field, domain, params, max_step=0.1 * ds)
    n_total = max(1, int(math.ceil(span / ds)))
    h = span / n_total
    stride = max(1, n_total // max(1, n_samples))
    state = TrajectoryState(
        s=float(t), X=np.asarray(x, dtype=float), V=np.asarray(v, dtype=float), species=species
    )
    worst = 0.0
    for i in range(1, n_total + 1):
        state = advance(state, field, -h)
        if float(domain.xi(state.X)) >= 0.0:
            raise ValueError("segment leaves the domain; shorten span")
        if i % stride == 0 or i == n_total:
            val = alpha(state.s, state.X, state.V, species, field, domain, params, max_step=ds)
            worst = max(worst, abs(val - ref))
    return worst


@dataclass(frozen=True)
class AlphaTildeValue:
    """Collar weight value; `clamped` marks a negative radicand forced to 0."""

    value: float
    clamped: bool

    def __float__(self) -> float:
        return self.value


def alpha_tilde(
    x: np.ndarray,
    v: np.ndarray,
    domain: ConvexDomain,
    field: Optional[FieldHandle] = None,
    species: int = 1,
) -> AlphaTildeValue:
    """Legacy collar weight built from the level set.

    Radicand: xi^2 + |v . grad xi|^2 - 2 (v . Hess xi . v) xi, minus the
    footpoint term 2 (E . grad xi)(xbar) xi when a field handle is given
    (E is the acceleration -species grad(phi)).  field=None is the
    zero-Neumann variant with that term dropped.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    xi = float(domain.xi(x))
    g = domain.grad_xi(x)
    H = domain.hess_xi(x)
    rad = xi * xi + float(np.dot(v, g)) ** 2 - 2.0 * float(v @ H @ v) * xi
    if field is not None:
        foot = domain.nearest_boundary(x).point
        e_acc = -float(species) * field.at(foot)
        rad -= 2.0 * float(np.dot(e_acc, domain.grad_xi(foot))) * xi
    if rad < 0.0:
        return AlphaTildeValue(value=0.0, clamped=True)
    return AlphaTildeValue(value=math.sqrt(rad), clamped=False)


@dataclass(frozen=True)
class VelocityLemmaReport:
    residual: float
    n_samples: int
    n_excluded: int


def velocity_lemma_residual(
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    span: float = 0.3,
    n_samples: int = 32,
    fd_step: float = 1e-4,
    neumann: bool = True,
    floor: float = 1e-10,
) -> VelocityLemmaReport:
    """Velocity-lemma ratio max |d/ds alpha_tilde^2| / ((1+|V|+1/|V|) alpha_tilde^2).

    Samples a backward flow segment; the s-derivative is a central difference
    along the flow.  Points where the weight sits below the floor (or the
    speed vanishes) are excluded and counted.  With neumann=True the weight
    drops its footpoint field term, matching the tangential-field setting;
    finiteness of the ratio is the check.
    """
    tilde_field = None if neumann else field
    state = TrajectoryState(
        s=float(t), X=np.asarray(x, dtype=float), V=np.asarray(v, dtype=float), species=species
    )
    h = span / n_samples
    worst = 0.0
    excluded = 0
    for _ in range(n_samples):
        state = advance(state, field, -h)
        if float(domain.xi(state.X)) >= 0.0:
            raise ValueError("segment leaves the domain; shorten span")
        w0 = float(alpha_tilde(state.X, state.V, domain, tilde_field, species))
        speed = float(np.linalg.norm(state.V))
        if w0 <= floor or speed < 1e-12:
            excluded += 1
            continue
        sp = advance(state, field, fd_step)
        sm = advance(state, field, -fd_step)
        wp = float(alpha_tilde(sp.X, sp.V, domain, tilde_field, species)) ** 2
        wm = float(alpha_tilde(sm.X, sm.V, domain, tilde_field, species)) ** 2
        dw = (wp - wm) / (2.0 * fd_step)
        den = (1.0 + speed + 1.0 / speed) * w0 * w0
        worst = max(worst, abs(dw) / den)
    return VelocityLemmaReport(residual=worst, n_samples=n_samples, n_excluded=excluded)


def _midpoint_nodes(extent: float, n_grid: int) -> tuple[np.ndarray, float]:
    h = 2.0 * extent / n_grid
    ax = -extent + (np.arange(n_grid) + 0.5) * h
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1), h


def alpha_inverse_moment(
    sigma: float,
    n_cut: float,
    t: float,
    x: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    params: Optional[AlphaParams] = None,
    n_grid: int = 24,
) -> float:
    """Midpoint quadrature of alpha(t, x, u)^(-sigma) over the ball |u| <= n_cut.

    The integrand carries an integrable |u|^(-sigma) singularity in the
    free-transport regime; slow nodes fall on the cutoff branch alpha = 1,
    so every evaluation is finite.  sigma = 0 returns the ball volume.
    """
    if not 0.0 <= sigma < 1.0:
        raise ValueError("sigma must lie in [0, 1)")
    nodes, h = _midpoint_nodes(float(n_cut), n_grid)
    keep = np.einsum("ij,ij->i", nodes, nodes) <= float(n_cut) ** 2
    total = 0.0
    for u in nodes[keep]:
        total += alpha(t, x, u, species, field, domain, params) ** (-sigma)
    return total * h**3


def weighted_inverse_moment(
    sigma: float,
    kappa: float,
    v_center: np.ndarray,
    n_cut: float,
    t: float,
    x: np.ndarray,
    species: int,
    field: FieldHandle,
    domain: ConvexDomain,
    params: Optional[AlphaParams] = None,
    n_grid: int = 24,
    u_max: Optional[float] = None,
    c_gauss: float = 0.25,
) -> float:
    """Outer-region moment with the collision-kernel factor.

    Integrates exp(-c |v-u|^2) / |v-u|^(2-kappa) alpha(t,x,u)^(-sigma) over
    the shell n_cut <= |u| <= u_max (default n_cut + 6, beyond which the
    Gaussian tail is negligible).  Finite for kappa in (0, 2].
    """
    if not 0.0 < kappa <= 2.0:
        raise ValueError("kappa must lie in (0, 2]")
    if not 0.0 <= sigma < 1.0:
        raise ValueError("sigma must lie in [0, 1)")
    v_center = np.asarray(v_center, dtype=float)
    hi = float(u_max) if u_max is not None else float(n_cut) + 6.0
    nodes, h = _midpoint_nodes(hi, n_grid)
    r2 = np.einsum("ij,ij->i", nodes, nodes)
    keep = (r2 >= float(n_cut) ** 2) & (r2 <= hi * hi)
    total = 0.0
    for u in nodes[keep]:
        d = u - v_center
        dn = float(np.linalg.norm(d))
        if dn < 1e-12:
            continue  # removable cell; measure-zero coincidence with v
        w = math.exp(-c_gauss * dn * dn) / dn ** (2.0 - kappa)
        total += w * alpha(t, x, u, species, field, domain, params) ** (-sigma)
    return total * h**3
