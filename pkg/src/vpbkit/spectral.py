"""Null-space structure of the linearized operator and hydrodynamic projections.

The six-dimensional kernel is spanned by the species masses, momentum and
energy directions.  The tabulated spanning set is orthonormal except for the
energy vector, whose raw squared norm evaluates to 3/2 by direct Gaussian
moments; the basis is therefore orthonormalized numerically and the raw Gram
matrix kept for audit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collision import KernelTables, apply_K_batch
from .field import PoissonSolution, SpatialMesh, solve_poisson
from .phase_grid import C_MU, DistributionPair, VelocityGrid, halfspace_flux

__all__ = [
    "BETA_A",
    "BETA_B",
    "BETA_C",
    "NullBasis",
    "HydroMoments",
    "build_null_basis",
    "project_P",
    "p_gamma",
    "beta_residual",
    "c1_constant",
    "TestFunctions",
    "build_test_functions",
    "coercivity_gap",
    "coercivity_gap_batch",
]

# moment-matching constants for the weak-formulation test functions:
# int (|v|^2 - BETA_A)((|v|^2 - 3)/(2 sqrt 2)) v_i^2 mu = 0
# int (v_i^2 - BETA_B) mu = 0
# int (|v|^2 - BETA_C) v_i^2 mu = 0
BETA_A = 10.0
BETA_B = 1.0
BETA_C = 5.0


def _pair_inner(grid: VelocityGrid, f: DistributionPair, g: DistributionPair) -> float:
    return float(
        (np.sum(f.plus * g.plus) + np.sum(f.minus * g.minus)) * grid.h**3
    )


@dataclass(frozen=True)
class NullBasis:
    """Orthonormalized kernel basis with the raw spanning set retained.

    `raw` stacks the tabulated spanning vectors as (6, 2, N, N, N); `vectors`
    holds the orthonormalized set obtained by the (triangular) Cholesky
    change of basis `transform`, so span is unchanged.  `raw_gram` is kept
    for audit; its (5, 5) entry is the energy direction's squared norm 3/2.
    """

    grid: VelocityGrid
    raw: np.ndarray
    vectors: np.ndarray
    raw_gram: np.ndarray
    transform: np.ndarray

    @property
    def raw_c_norm_sq(self) -> float:
        return float(self.raw_gram[5, 5])


def build_null_basis(grid: VelocityGrid) -> NullBasis:
    smu = grid.sqrt_mu
    vx = grid.nodes.reshape(grid.shape + (3,))
    zero = np.zeros_like(smu)
    raw = np.empty((6, 2) + grid.shape)
    raw[0] = np.stack([smu, zero])
    raw[1] = np.stack([zero, smu])
    for i in range(3):
        comp = vx[..., i] / np.sqrt(2.0) * smu
        raw[2 + i] = np.stack([comp, comp])
    energy = (grid.speed2 - 3.0) / (2.0 * np.sqrt(2.0)) * smu
    raw[5] = np.stack([energy, energy])

    flat = raw.reshape(6, -1)
    gram = (flat @ flat.T) * grid.h**3
    chol = np.linalg.cholesky(gram)
    # rows of inv(chol) give the triangular change of basis
    transform = np.linalg.inv(chol)
    vectors = (transform @ flat).reshape(raw.shape)
    return NullBasis(grid=grid, raw=raw, vectors=vectors, raw_gram=gram, transform=transform)


@dataclass(frozen=True)
class HydroMoments:
    """Coefficients of Pf in the raw (tabulated) spanning set."""

    a_plus: float
    a_minus: float
    b: np.ndarray
    c: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.a_plus, self.a_minus], self.b, [self.c]])


def project_P(
    basis: NullBasis, f: DistributionPair
) -> tuple[HydroMoments, DistributionPair, DistributionPair]:
    """Split f = Pf + (I - P)f and report the raw-basis moments.

    Moments solve the raw Gram system, so reconstruction uses the tabulated
    vectors directly and P is idempotent to solver precision.
    """
    grid = basis.grid
    fflat = np.stack([f.plus, f.minus]).reshape(-1)
    rhs = basis.raw.reshape(6, -1) @ fflat * grid.h**3
    m = np.linalg.solve(basis.raw_gram, rhs)
    pf_flat = m @ basis.raw.reshape(6, -1)
    pf = pf_flat.reshape((2,) + grid.shape)
    proj = DistributionPair(plus=pf[0].copy(), minus=pf[1].copy())
    rem = DistributionPair(plus=f.plus - pf[0], minus=f.minus - pf[1])
    moments = HydroMoments(a_plus=float(m[0]), a_minus=float(m[1]), b=m[2:5].copy(), c=float(m[5]))
    return moments, proj, rem


def p_gamma(
    grid: VelocityGrid, f: DistributionPair, normal: np.ndarray
) -> DistributionPair:
    """Diffuse boundary projection at one boundary point.

    Per species the trace is c_mu sqrt(mu)(v) times the outgoing half-space
    flux int_{n.u>0} f sqrt(mu) (n.u) du; with f = sqrt(mu) in both slots
    this reproduces f up to the half-flux quadrature error.
    """
    smu = grid.sqrt_mu
    zp = C_MU * halfspace_flux(grid, f.plus, normal)
    zm = C_MU * halfspace_flux(grid, f.minus, normal)
    return DistributionPair(plus=zp * smu, minus=zm * smu)


def beta_residual(grid: VelocityGrid, kind: str, beta: float, axis: int = 0) -> float:
    """Gaussian moment integral whose root defines the beta constant.

    kind="a": int (|v|^2 - beta)((|v|^2 - 3)/(2 sqrt 2)) v_i^2 mu dv
    kind="b": int (v_i^2 - beta) mu dv
    kind="c": int (|v|^2 - beta) v_i^2 mu dv
    """
    vx = grid.nodes.reshape(grid.shape + (3,))
    vi2 = vx[..., axis] ** 2
    v2 = grid.speed2
    if kind == "a":
        integrand = (v2 - beta) * (v2 - 3.0) / (2.0 * np.sqrt(2.0)) * vi2
    elif kind == "b":
        integrand = vi2 - beta
    elif kind == "c":
        integrand = (v2 - beta) * vi2
    else:
        raise ValueError("kind must be 'a', 'b' or 'c'")
    return float(np.sum(integrand * grid.mu) * grid.h**3)


def c1_constant(grid: VelocityGrid) -> float:
    """-int (|v|^2 - beta_a) v_1^2 mu dv; evaluates to 5 at beta_a = 10."""
    vx = grid.nodes.reshape(grid.shape + (3,))
    integrand = -(grid.speed2 - BETA_A) * vx[..., 0] ** 2
    return float(np.sum(integrand * grid.mu) * grid.h**3)


@dataclass
class TestFunctions:
    """Weak-formulation test functions assembled from solved potentials.

    psi_a is stored as a species pair of full phase arrays; the nine b1 and
    six b2 components are assembled on demand to keep memory flat.  Shapes
    are (n_x, N, N, N) with spatial rows following mesh.points.
    """

    grid: VelocityGrid
    mesh: SpatialMesh
    psi_a_plus: np.ndarray
    psi_a_minus: np.ndarray
    psi_c: np.ndarray
    grad_a_plus: np.ndarray
    grad_a_minus: np.ndarray
    grad_b: np.ndarray  # (3 solves, n_x, 3 components)
    grad_c: np.ndarray
    potentials: dict

    def psi_b1(self, i: int, j: int) -> np.ndarray:
        vx = self.grid.nodes.reshape(self.grid.shape + (3,))
        vel = (vx[..., i] ** 2 - BETA_B) * self.grid.sqrt_mu
        return self.grad_b[j][:, j][:, None, None, None] * vel[None]

    def psi_b2(self, i: int, j: int) -> np.ndarray:
        if i == j:
            raise ValueError("psi_b2 is defined for distinct axes")
        vx = self.grid.nodes.reshape(self.grid.shape + (3,))
        vel = self.grid.speed2 * vx[..., i] * vx[..., j] * self.grid.sqrt_mu
        return self.grad_b[i][:, j][:, None, None, None] * vel[None]


def build_test_functions(
    grid: VelocityGrid,
    mesh: SpatialMesh,
    a_plus: np.ndarray,
    a_minus: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    method: str = "auto",
) -> TestFunctions:
    """Solve the moment potentials and assemble the test functions.

    a_plus/a_minus feed Neumann solves (each must be neutral: a
    SolvabilityError propagates otherwise), b columns and c feed Dirichlet
    solves.  b is (n_x, 3).
    """
    sol_ap = solve_poisson(mesh, a_plus, bc="neumann", method=method)
    sol_am = solve_poisson(mesh, a_minus, bc="neumann", method=method)
    sols_b = [
        solve_poisson(mesh, np.ascontiguousarray(b[:, j]), bc="dirichlet", method=method)
        for j in range(3)
    ]
    sol_c = solve_poisson(mesh, c, bc="dirichlet", method=method)

    pts = mesh.points
    grad_ap = -sol_ap.field_at(pts)
    grad_am = -sol_am.field_at(pts)
    grad_b = np.stack([-s.field_at(pts) for s in sols_b])
    grad_c = -sol_c.field_at(pts)

    vx = grid.nodes.reshape(grid.shape + (3,))
    smu = grid.sqrt_mu
    fac_a = (grid.speed2 - BETA_A) * smu
    fac_c = (grid.speed2 - BETA_C) * smu
    vdg_ap = np.einsum("xa,ijka->xijk", grad_ap, vx)
    vdg_am = np.einsum("xa,ijka->xijk", grad_am, vx)
    vdg_c = np.einsum("xa,ijka->xijk", grad_c, vx)
    return TestFunctions(
        grid=grid,
        mesh=mesh,
        psi_a_plus=-fac_a[None] * vdg_ap,
        psi_a_minus=-fac_a[None] * vdg_am,
        psi_c=fac_c[None] * vdg_c,
        grad_a_plus=grad_ap,
        grad_a_minus=grad_am,
        grad_b=grad_b,
        grad_c=grad_c,
        potentials={
            "a_plus": sol_ap,
            "a_minus": sol_am,
            "b": sols_b,
            "c": sol_c,
        },
    )


def coercivity_gap_batch(
    tables: KernelTables,
    basis: NullBasis,
    fs: list[DistributionPair],
    degeneracy_rtol: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray]:
    """<Lf, f> / ||nu^{1/2} (I - P) f||^2 for a batch sharing one kernel sweep.

    Returns (gaps, degenerate flags); a flagged entry reports the
    conventional value 0 because the denominator vanished (f in the null
    space to rounding).
    """
    grid = tables.grid
    nu = tables.nu_grid
    h3 = grid.h**3
    kf = apply_K_batch(tables, fs)
    gaps = np.zeros(len(fs))
    flags = np.zeros(len(fs), dtype=bool)
    for i, (f, kfi) in enumerate(zip(fs, kf)):
        lf_p = nu * f.plus - kfi.plus
        lf_m = nu * f.minus - kfi.minus
        num = float((np.sum(lf_p * f.plus) + np.sum(lf_m * f.minus)) * h3)
        _, _, rem = project_P(basis, f)
        den = float(
            (np.sum(nu * rem.plus**2) + np.sum(nu * rem.minus**2)) * h3
        )
        scale = float((np.sum(nu * f.plus**2) + np.sum(nu * f.minus**2)) * h3)
        if den <= degeneracy_rtol * max(scale, 1e-300):
            flags[i] = True
            gaps[i] = 0.0
        else:
            gaps[i] = num / den
    return gaps, flags


def coercivity_gap(
    tables: KernelTables, basis: NullBasis, f: DistributionPair
) -> tuple[float, bool]:
    gaps, flags = coercivity_gap_batch(tables, basis, [f])
    return float(gaps[0]), bool(flags[0])
