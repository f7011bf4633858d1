"""Velocity-space grids, Maxwellian weights, and boundary-flux quadrature.

The velocity domain is the cube [-v_max, v_max]^3 with a uniform midpoint
grid: kernels and half-space integrals need arbitrary pointwise evaluation
and plane-split cells, which uniform nodes make uniform-cost.  The global
Maxwellian is mu(v) = (2 pi)^{-3/2} exp(-|v|^2/2) and the Gaussian growth
weight is w_theta(v) = exp(theta |v|^2).

Half-space flux integrals (the diffuse-reflection building block) treat
cells straddling the plane n.u = 0 exactly: each cell contributes the smooth
factor at its center times the closed-form cell average of (n.u)_+, obtained
from the piecewise-polynomial law of a sum of independent uniforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product
from typing import Optional, Union

import numpy as np
from scipy.special import erf

__all__ = [
    "C_MU",
    "VelocityGrid",
    "WeightParams",
    "DistributionPair",
    "maxwellian",
    "integrate_velocity",
    "halfspace_flux",
    "signed_flux",
]

# Normalization of the diffuse-reflection profile: C_MU * int_{n.v>0} mu (n.v) dv = 1.
C_MU = math.sqrt(2.0 * math.pi)

_MOMENTS = ("1", "v1", "v2", "v3", "|v|^2", "|v|^4", "energy")


def maxwellian(v, vartheta: float = 0.0):
    """Return (mu, sqrt(mu), w_vartheta) at velocity points v of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    s2 = np.einsum("...i,...i->...", v, v)
    mu = (2.0 * math.pi) ** (-1.5) * np.exp(-0.5 * s2)
    return mu, np.sqrt(mu), np.exp(vartheta * s2)


@dataclass(frozen=True)
class WeightParams:
    """Gaussian weight exponents, 0 < vartheta_tilde < vartheta < 1/4."""

    vartheta: float = 0.1
    vartheta_tilde: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.vartheta_tilde < self.vartheta < 0.25):
            raise ValueError(
                "weight exponents must satisfy 0 < vartheta_tilde < vartheta < 1/4, "
                f"got vartheta={self.vartheta}, vartheta_tilde={self.vartheta_tilde}"
            )


class VelocityGrid:
    """Uniform midpoint grid on [-v_max, v_max]^3.

    Node centers along each axis sit at -v_max + (j + 1/2) h, so the grid is
    symmetric under v -> -v and under each axis reflection, and no node lies
    on a coordinate plane.
    """

    def __init__(self, v_max: float = 6.0, n: int = 32):
        if v_max <= 0 or n < 2:
            raise ValueError(f"need v_max > 0 and n >= 2, got {v_max}, {n}")
        self.v_max = float(v_max)
        self.n = int(n)
        self.h = 2.0 * self.v_max / self.n
        self.cell_volume = self.h**3
        self.axis = -self.v_max + (np.arange(self.n) + 0.5) * self.h
        self.shape = (self.n, self.n, self.n)

    @cached_property
    def eps_trunc(self) -> float:
        """Maxwellian tail mass outside the box (reported, not corrected)."""
        p1 = erf(self.v_max / math.sqrt(2.0))
        return 1.0 - p1**3

    @cached_property
    def components(self):
        """Meshgrid velocity components (V1, V2, V3), each of grid shape."""
        return np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")

    @cached_property
    def nodes(self) -> np.ndarray:
        """All nodes as an (n^3, 3) array, C-ordered to match .ravel()."""
        V1, V2, V3 = self.components
        return np.stack([V1.ravel(), V2.ravel(), V3.ravel()], axis=1)

    @cached_property
    def speed2(self) -> np.ndarray:
        V1, V2, V3 = self.components
        return V1**2 + V2**2 + V3**2

    @cached_property
    def mu(self) -> np.ndarray:
        return (2.0 * math.pi) ** (-1.5) * np.exp(-0.5 * self.speed2)

    @cached_property
    def sqrt_mu(self) -> np.ndarray:
        return np.sqrt(self.mu)

    def weight(self, vartheta: float) -> np.ndarray:
        return np.exp(vartheta * self.speed2)

    def moment_array(self, moment) -> np.ndarray:
        """Resolve a polynomial moment tag (or pass an array through)."""
        if isinstance(moment, np.ndarray):
            return moment
        if moment is None or moment == "1" or moment == 1:
            return np.ones(self.shape)
        V = self.components
        if moment in ("v1", "v2", "v3"):
            return V[int(moment[1]) - 1]
        if moment == "|v|^2":
            return self.speed2
        if moment == "|v|^4":
            return self.speed2**2
        if moment == "energy":  # the normalized energy mode (|v|^2 - 3)/2
            return 0.5 * (self.speed2 - 3.0)
        raise ValueError(f"unknown moment tag {moment!r}; known: {_MOMENTS}")


def integrate_velocity(grid: VelocityGrid, g: np.ndarray, moment=None) -> float:
    """Midpoint quadrature of g * moment over the velocity grid."""
    m = grid.moment_array(moment)
    return float(np.sum(g * m)) * grid.cell_volume


def _gauss_cell_moments(lo: np.ndarray, hi: np.ndarray):
    """Exact integrals of t^k exp(-t^2/2), k = 0..3, over [lo, hi].

    Recurrence I_k = [-t^(k-1) exp(-t^2/2)] + (k-1) I_{k-2}; empty or
    inverted intervals contribute zero.
    """
    hi = np.maximum(hi, lo)
    rt2 = math.sqrt(2.0)
    e_lo = np.exp(-0.5 * lo**2)
    e_hi = np.exp(-0.5 * hi**2)
    i0 = math.sqrt(math.pi / 2.0) * (erf(hi / rt2) - erf(lo / rt2))
    i1 = e_lo - e_hi
    i2 = lo * e_lo - hi * e_hi + i0
    i3 = lo**2 * e_lo - hi**2 * e_hi + 2.0 * i1
    return i0, i1, i2, i3


def halfspace_flux(grid: VelocityGrid, g: np.ndarray, normal) -> float:
    """Quadrature of g(u) sqrt(mu(u)) (n.u) over the half space {n.u > 0}.

    The grid is sliced into pencils along the axis where |n| is largest; in
    each cell of a pencil, g is replaced by its three-point quadratic
    interpolant and the product (quadratic) x (n.u) x Gaussian is integrated
    exactly over the positive part of the cell, so plane-cut cells enter
    with their exact positive fraction and the flux converges at fourth
    order.  Multiplying the Maxwellian flux halfspace_flux(sqrt_mu, n) by
    C_MU gives 1.
    """
    n = np.asarray(normal, dtype=float)
    nn = float(np.linalg.norm(n))
    if not math.isclose(nn, 1.0, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError(f"normal must be a unit vector, |n| = {nn}")
    d = int(np.argmax(np.abs(n)))  # pencil axis, |n_d| >= 1/sqrt(3)
    gd = np.moveaxis(np.asarray(g, dtype=float), d, -1)
    ax = grid.axis
    h = grid.h
    nd = n[d]
    na, nb = (n[i] for i in range(3) if i != d)

    # transverse part: smooth factors at pencil centers, offsets w = n_perp.u_perp
    ua = ax[:, None]
    ub = ax[None, :]
    w = na * ua + nb * ub
    trans = (2.0 * math.pi) ** (-0.75) * np.exp(-0.25 * (ua**2 + ub**2))

    # in-pencil quadratic pieces from zero-extended neighbors
    gm = np.concatenate([np.zeros_like(gd[..., :1]), gd[..., :-1]], axis=-1)
    gp = np.concatenate([gd[..., 1:], np.zeros_like(gd[..., :1])], axis=-1)
    c1 = (gp - gm) / (2.0 * h)
    c2 = (gp - 2.0 * gd + gm) / (2.0 * h**2)

    # positive part of each cell along the pencil: (n.u) > 0 <=> nd t > -w
    t = ax[None, None, :]
    cell_lo = np.broadcast_to(t - 0.5 * h, gd.shape).copy()
    cell_hi = np.broadcast_to(t + 0.5 * h, gd.shape).copy()
    tstar = -w[..., None] / nd
    if nd > 0:
        np.maximum(cell_lo, tstar, out=cell_lo)
    else:
        np.minimum(cell_hi, tstar, out=cell_hi)

    # exact moments M_k = int_cell+ t^k e^{-t^2/4} dt via tau = t/sqrt(2)
    rt2 = math.sqrt(2.0)
    i0, i1, i2, i3 = _gauss_cell_moments(cell_lo / rt2, cell_hi / rt2)
    M = (rt2 * i0, 2.0 * i1, 2.0 * rt2 * i2, 4.0 * i3)

    # integrand (c0 + c1 d + c2 d^2)(w + nd t), d = t - t_j, in powers of t
    a0 = gd - c1 * t + c2 * t**2
    a1 = c1 - 2.0 * c2 * t
    wl = w[..., None]
    pencil = (
        (a0 * wl) * M[0]
        + (a0 * nd + a1 * wl) * M[1]
        + (a1 * nd + c2 * wl) * M[2]
        + (c2 * nd) * M[3]
    )
    return float(np.sum(trans * np.sum(pencil, axis=-1))) * h * h


def signed_flux(grid: VelocityGrid, g: np.ndarray, normal) -> float:
    """Full signed moment int g sqrt(mu) (n.u) du (zero for diffuse traces)."""
    n = np.asarray(normal, dtype=float)
    return halfspace_flux(grid, g, n) - halfspace_flux(grid, g, -n)


class DistributionPair:
    """Two-species perturbation (f_plus, f_minus) on a common grid layout.

    The species sign convention is charge q = diag(1, -1) acting on the
    stacked pair and source sign q1 = (1, -1); ``signs`` exposes them in
    species order (+, -).  Arrays may carry leading mesh axes; the trailing
    axes index velocity.
    """

    signs = (1.0, -1.0)

    def __init__(self, plus: np.ndarray, minus: np.ndarray):
        plus = np.asarray(plus, dtype=float)
        minus = np.asarray(minus, dtype=float)
        if plus.shape != minus.shape:
            raise ValueError(f"species shapes differ: {plus.shape} vs {minus.shape}")
        self.plus = plus
        self.minus = minus

    @classmethod
    def zeros(cls, shape) -> "DistributionPair":
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def shape(self):
        return self.plus.shape

    def species(self):
        """Iterate (sign, values) over (+, -)."""
        return zip(self.signs, (self.plus, self.minus))

    def stack(self) -> np.ndarray:
        return np.stack([self.plus, self.minus])

    def copy(self) -> "DistributionPair":
        return DistributionPair(self.plus.copy(), self.minus.copy())

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.plus)) and np.all(np.isfinite(self.minus)))

    # element-wise arithmetic, for Picard increments and diagnostics
    def __add__(self, other):
        return DistributionPair(self.plus + other.plus, self.minus + other.minus)

    def __sub__(self, other):
        return DistributionPair(self.plus - other.plus, self.minus - other.minus)

    def __mul__(self, a: float):
        return DistributionPair(self.plus * a, self.minus * a)

    __rmul__ = __mul__

    def max_abs(self) -> float:
        if self.plus.size == 0:
            return 0.0
        return max(float(np.abs(self.plus).max()), float(np.abs(self.minus).max()))
