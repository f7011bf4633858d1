"""Charge density, Poisson solves and field diagnostics on spatial meshes.

Two discretizations share one interface: a ball-specialized solid-harmonic
spectral solver (polynomial expansion, exact on low-degree manufactured
data and differentiable in closed form) and a generic embedded-boundary
finite-difference solver with Shortley-Weller Dirichlet cells and mirror
Neumann ghosts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import ConvexDomain
from .phase_grid import DistributionPair, VelocityGrid

__all__ = [
    "SpatialMesh",
    "SolvabilityError",
    "PoissonSolution",
    "charge_density",
    "solve_poisson",
    "holder_seminorm",
    "gradient_holder_seminorm",
    "interpolation_report",
]


class SolvabilityError(ValueError):
    """Raised when a Neumann solve is requested for non-neutral charge."""


class SpatialMesh:
    """Cell-centered cube mesh clipped to a convex domain.

    Nodes are the cell centers lying inside the domain; `points` lists them
    in raveled (i, j, k) order and `index` maps lattice triples back to
    interior row numbers (-1 outside).  The centered layout keeps the node
    set closed under coordinate reflections, which downstream symmetry
    checks rely on.
    """

    def __init__(self, domain: ConvexDomain, n: int) -> None:
        if n < 2:
            raise ValueError("mesh needs at least two cells per axis")
        self.domain = domain
        self.n = int(n)
        b = float(domain.bounding_radius)
        self.h = 2.0 * b / n
        self.axis = -b + (np.arange(n) + 0.5) * self.h
        gx, gy, gz = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        inside = domain.contains(centers)
        self.inside_mask = inside.reshape(n, n, n)
        self.points = centers[inside]
        self.index = -np.ones(n**3, dtype=int)
        self.index[inside] = np.arange(self.points.shape[0])
        self.index = self.index.reshape(n, n, n)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def scatter(self, values: np.ndarray, fill: float = np.nan) -> np.ndarray:
        """Interior-node vector -> full (n, n, n) lattice with `fill` outside."""
        out = np.full((self.n,) * 3, fill, dtype=float)
        out[self.inside_mask] = values
        return out

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values) * self.h**3)


def charge_density(grid: VelocityGrid, f: DistributionPair) -> np.ndarray:
    """rho = int sqrt(mu) (f_+ - f_-) dv evaluated per spatial row.

    Accepts species arrays shaped (..., N, N, N); leading axes index space.
    """
    smu = grid.sqrt_mu
    diff = f.plus - f.minus
    return np.tensordot(diff, smu, axes=([-3, -2, -1], [0, 1, 2])) * grid.h**3


# -- polynomial helpers for the spectral branch ---------------------------------

_Poly = dict  # {(i, j, k): coefficient}


def _poly_eval(poly: _Poly, pts: np.ndarray) -> np.ndarray:
    out = np.zeros(pts.shape[:-1])
    if not poly:
        return out
    # power tables per axis: large batches make repeated ** calls dominate
    pows = []
    for axis in range(3):
        arr = pts[..., axis]
        top = max(key[axis] for key in poly)
        col = [np.ones(arr.shape)]
        for _ in range(top):
            col.append(col[-1] * arr)
        pows.append(col)
    for (i, j, k), c in poly.items():
        out += c * (pows[0][i] * pows[1][j] * pows[2][k])
    return out


def _poly_axpy(dst: _Poly, src: _Poly, scale: float) -> None:
    for key, c in src.items():
        acc = dst.get(key, 0.0) + scale * c
        if acc == 0.0:
            dst.pop(key, None)
        else:
            dst[key] = acc


def _poly_diff(poly: _Poly, axis: int) -> _Poly:
    out: _Poly = {}
    for key, c in poly.items():
        if key[axis] == 0:
            continue
        nk = list(key)
        nk[axis] -= 1
        out[tuple(nk)] = out.get(tuple(nk), 0.0) + c * key[axis]
    return out


def _poly_prune(poly: _Poly, radius: float, rel: float = 1e-13) -> _Poly:
    """Drop terms whose contribution on |x| <= radius is rounding dust.

    Least-squares fits leave ~1e-16 relative coefficients on basis functions
    the density does not excite; evaluating them costs as much as the real
    terms."""
    r = max(radius, 1.0)
    mags = {key: abs(c) * r ** sum(key) for key, c in poly.items()}
    if not mags:
        return dict(poly)
    cut = rel * max(mags.values())
    return {key: c for key, c in poly.items() if mags[key] >= cut}


def _poly_mul_r2(poly: _Poly, times: int) -> _Poly:
    out = dict(poly)
    for _ in range(times):
        nxt: _Poly = {}
        for key, c in out.items():
            for axis in range(3):
                nk = list(key)
                nk[axis] += 2
                nxt[tuple(nk)] = nxt.get(tuple(nk), 0.0) + c
        out = nxt
    return out


# real solid harmonics through degree 3, keyed by degree
_SOLID_HARMONICS: list[tuple[int, _Poly]] = [
    (0, {(0, 0, 0): 1.0}),
    (1, {(1, 0, 0): 1.0}),
    (1, {(0, 1, 0): 1.0}),
    (1, {(0, 0, 1): 1.0}),
    (2, {(1, 1, 0): 1.0}),
    (2, {(1, 0, 1): 1.0}),
    (2, {(0, 1, 1): 1.0}),
    (2, {(2, 0, 0): 1.0, (0, 2, 0): -1.0}),
    (2, {(0, 0, 2): 2.0, (2, 0, 0): -1.0, (0, 2, 0): -1.0}),
    (3, {(3, 0, 0): 1.0, (1, 2, 0): -3.0}),
    (3, {(2, 1, 0): 3.0, (0, 3, 0): -1.0}),
    (3, {(2, 0, 1): 1.0, (0, 2, 1): -1.0}),
    (3, {(1, 1, 1): 1.0}),
    (3, {(1, 0, 2): 4.0, (3, 0, 0): -1.0, (1, 2, 0): -1.0}),
    (3, {(0, 1, 2): 4.0, (2, 1, 0): -1.0, (0, 3, 0): -1.0}),
    (3, {(0, 0, 3): 2.0, (2, 0, 1): -3.0, (0, 2, 1): -3.0}),
]

_RADIAL_POWERS = (0, 1)  # r^{2k} multipliers per harmonic


def _spectral_basis() -> list[tuple[int, int, _Poly, _Poly]]:
    """(degree, radial power k, r^{2k} H, H) entries for the charge fit."""
    basis = []
    for ell, harm in _SOLID_HARMONICS:
        for k in _RADIAL_POWERS:
            lifted = _poly_mul_r2(harm, k) if k else dict(harm)
            basis.append((ell, k, lifted, dict(harm)))
    return basis


@dataclass
class PoissonSolution:
    """Result of a Poisson solve; fields sampled on the mesh nodes.

    `potential_at` / `field_at` / `hessian_at` evaluate off-node: in closed
    form on the spectral branch, by trilinear interpolation of node data on
    the finite-difference one.
    """

    mesh: SpatialMesh
    phi: np.ndarray
    E: np.ndarray
    bc: str
    mean_zero: bool
    residual: float
    method: str
    projected_neutrality: float = 0.0
    _poly: _Poly | None = field(default=None, repr=False)
    _grad_polys: tuple | None = field(default=None, repr=False)

    def potential_at(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._poly is not None:
            return _poly_eval(self._poly, x)
        return self._interp(self.phi, x)

    def field_at(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._grad_polys is not None:
            return -np.stack([_poly_eval(p, x) for p in self._grad_polys], axis=-1)
        return np.stack([self._interp(self.E[:, a], x) for a in range(3)], axis=-1)

    def hessian_at(self, x: np.ndarray) -> np.ndarray:
        """Second derivatives of phi; closed form (spectral) or FD stencil."""
        x = np.asarray(x, dtype=float)
        if self._grad_polys is not None:
            rows = []
            for gp in self._grad_polys:
                rows.append(
                    np.stack([_poly_eval(_poly_diff(gp, a), x) for a in range(3)], -1)
                )
            return np.stack(rows, axis=-2)
        eps = 0.5 * self.mesh.h
        eye = np.eye(3) * eps
        out = np.empty(x.shape[:-1] + (3, 3))
        for a in range(3):
            fp = self.field_at(x + eye[a])
            fm = self.field_at(x - eye[a])
            out[..., a, :] = -(fp - fm) / (2 * eps)
        return out

    def _interp(self, nodal: np.ndarray, x: np.ndarray) -> np.ndarray:
        m = self.mesh
        full = m.scatter(nodal, fill=0.0)
        t = (x - m.axis[0]) / m.h
        t = np.clip(t, 0.0, m.n - 1.0 - 1e-12)
        i0 = np.floor(t).astype(int)
        fr = t - i0
        out = np.zeros(x.shape[:-1])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (fr[..., 0] if dx else 1 - fr[..., 0])
                        * (fr[..., 1] if dy else 1 - fr[..., 1])
                        * (fr[..., 2] if dz else 1 - fr[..., 2])
                    )
                    out += w * full[
                        np.minimum(i0[..., 0] + dx, m.n - 1),
                        np.minimum(i0[..., 1] + dy, m.n - 1),
                        np.minimum(i0[..., 2] + dz, m.n - 1),
                    ]
        return out


def _solve_spectral(mesh: SpatialMesh, rho: np.ndarray, bc: str) -> PoissonSolution:
    basis = _spectral_basis()
    R = float(mesh.domain.bounding_radius)
    cols = np.stack([_poly_eval(p, mesh.points) for _, _, p, _ in basis], axis=1)
    coef, *_ = np.linalg.lstsq(cols, rho, rcond=None)
    fit = cols @ coef
    fit_residual = float(np.linalg.norm(fit - rho) / max(np.linalg.norm(rho), 1e-300))

    if bc == "neumann":
        # zero the total charge of the radial (ell = 0) chain exactly, using
        # int_ball r^{2k} dx = 4 pi R^{2k+3} / (2k+3); pinning the constant
        # coefficient makes the radial flux vanish identically at r = R
        i_const = next(
            i for i, (ell, k, _, _) in enumerate(basis) if ell == 0 and k == 0
        )
        total = 0.0
        for i, (ell, k, _, _) in enumerate(basis):
            if ell == 0 and i != i_const:
                total += coef[i] * R ** (2 * k) * 3.0 / (2 * k + 3)
        coef[i_const] = -total

    # per component rho_i = r^{2k} H_ell the solve -Delta phi = rho_i is
    # beta r^{2k+2} H_ell with beta = -1 / ((2k+2)(2k+2ell+3)), because
    # Delta(r^{2m} H_ell) = 2m (2m + 2ell + 1) r^{2m-2} H_ell; a harmonic
    # alpha H_ell then enforces the boundary condition.
    phi_poly: _Poly = {}
    for c, (ell, k, _, harm) in zip(coef, basis):
        if c == 0.0:
            continue
        beta = -1.0 / ((2 * k + 2) * (2 * k + 2 * ell + 3))
        _poly_axpy(phi_poly, _poly_mul_r2(harm, k + 1), c * beta)
        if bc == "dirichlet":
            alpha = -beta * R ** (2 * k + 2)
        elif ell == 0:
            alpha = 0.0  # gauge freedom only; radial chain already flux-free
        else:
            alpha = -beta * (ell + 2 * k + 2) * R ** (2 * k + 2) / ell
        if alpha != 0.0:
            _poly_axpy(phi_poly, harm, c * alpha)

    mean_zero = False
    if bc == "neumann":
        vals = _poly_eval(phi_poly, mesh.points)
        _poly_axpy(phi_poly, {(0, 0, 0): 1.0}, -float(np.mean(vals)))
        mean_zero = True

    phi_poly = _poly_prune(phi_poly, R)
    grads = tuple(_poly_diff(phi_poly, a) for a in range(3))
    phi_vals = _poly_eval(phi_poly, mesh.points)
    E_vals = -np.stack([_poly_eval(gp, mesh.points) for gp in grads], axis=-1)
    return PoissonSolution(
        mesh=mesh,
        phi=phi_vals,
        E=E_vals,
        bc=bc,
        mean_zero=mean_zero,
        residual=fit_residual,
        method="spectral",
        _poly=phi_poly,
        _grad_polys=grads,
    )


def _solve_fd(mesh: SpatialMesh, rho: np.ndarray, bc: str) -> PoissonSolution:
    n = mesh.n
    h = mesh.h
    npts = mesh.n_points
    idx = mesh.index
    pts = mesh.points
    lat = np.argwhere(mesh.inside_mask)
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []

    for row in range(npts):
        i, j, k = lat[row]
        diag = 0.0
        for di, dj, dk in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            # arms to the two face neighbors in units of h; cut faces get
            # the distance to the boundary along the axis
            arm = [1.0, 1.0]
            nbr = [-1, -1]
            for side, sgn in enumerate((-1, 1)):
                ii, jj, kk = i + sgn * di, j + sgn * dj, k + sgn * dk
                ok = (
                    0 <= ii < n
                    and 0 <= jj < n
                    and 0 <= kk < n
                    and idx[ii, jj, kk] >= 0
                )
                if ok:
                    nbr[side] = int(idx[ii, jj, kk])
                else:
                    direction = sgn * np.array((di, dj, dk), dtype=float)
                    t_exit, _ = mesh.domain.ray_exit(pts[row], direction)
                    arm[side] = min(max(float(t_exit) / h, 1e-3), 1.0)
            tm, tp = arm
            if bc == "dirichlet":
                # Shortley-Weller second difference with zero cut values:
                # only interior neighbors couple off-diagonal
                if nbr[0] >= 0:
                    rows.append(row)
                    cols.append(nbr[0])
                    vals.append(2.0 / (tm * (tm + tp) * h * h))
                if nbr[1] >= 0:
                    rows.append(row)
                    cols.append(nbr[1])
                    vals.append(2.0 / (tp * (tm + tp) * h * h))
                diag -= 2.0 / (tm * tp * h * h)
            else:
                # mirror ghosts: a cut face contributes nothing (zero normal
                # derivative along the axis); interior faces keep the
                # standard coupling
                for side in (0, 1):
                    if nbr[side] >= 0:
                        rows.append(row)
                        cols.append(nbr[side])
                        vals.append(1.0 / (h * h))
                        diag -= 1.0 / (h * h)
        rows.append(row)
        cols.append(row)
        vals.append(diag)

    A = sp.csr_matrix((vals, (rows, cols)), shape=(npts, npts))
    rhs = -rho.astype(float)
    mean_zero = False
    if bc == "neumann":
        # singular up to constants: augmented saddle system fixes the gauge
        one = np.ones((npts, 1)) * h**3
        Aaug = sp.bmat([[A, sp.csr_matrix(one)], [sp.csr_matrix(one.T), None]])
        sol = splu(Aaug.tocsc()).solve(np.concatenate([rhs, [0.0]]))
        phi = sol[:npts]
        mean_zero = True
    else:
        phi = splu(A.tocsc()).solve(rhs)

    resid = float(np.linalg.norm(A @ phi - rhs) / max(np.linalg.norm(rhs), 1e-300))
    grad = _fd_gradient_field(mesh, phi)
    return PoissonSolution(
        mesh=mesh,
        phi=phi,
        E=-grad,
        bc=bc,
        mean_zero=mean_zero,
        residual=resid,
        method="fd",
    )


def _fd_gradient_field(mesh: SpatialMesh, values: np.ndarray) -> np.ndarray:
    """Centered differences falling back to one-sided at cut faces."""
    full = mesh.scatter(values, fill=np.nan)
    h = mesh.h
    out = np.zeros((mesh.n_points, 3))
    lat = np.argwhere(mesh.inside_mask)
    nmax = mesh.n
    for row, (i, j, k) in enumerate(lat):
        vc = full[i, j, k]
        for a, (di, dj, dk) in enumerate(((1, 0, 0), (0, 1, 0), (0, 0, 1))):
            ip = (i + di, j + dj, k + dk)
            im = (i - di, j - dj, k - dk)
            vp = full[ip] if max(ip[0] - (nmax - 1), ip[1] - (nmax - 1), ip[2] - (nmax - 1)) <= 0 else np.nan
            vm = full[im] if min(im) >= 0 else np.nan
            if np.isfinite(vp) and np.isfinite(vm):
                out[row, a] = (vp - vm) / (2 * h)
            elif np.isfinite(vp):
                out[row, a] = (vp - vc) / h
            elif np.isfinite(vm):
                out[row, a] = (vc - vm) / h
    return out


def solve_poisson(
    mesh: SpatialMesh,
    rho: np.ndarray,
    bc: str = "neumann",
    method: str = "auto",
    neutrality_rtol: float = 1e-8,
) -> PoissonSolution:
    """-Delta phi = rho on the mesh domain with the requested closure.

    bc="neumann": zero normal derivative and mean-zero gauge; the charge
    must be neutral to neutrality_rtol * ||rho||_1, after which it is
    projected to exact zero mean (the removed offset is recorded on the
    solution).  bc="dirichlet": zero boundary trace.  method="auto" picks
    the solid-harmonic spectral branch on balls and finite differences
    otherwise.
    """
    if bc not in ("neumann", "dirichlet"):
        raise ValueError("bc must be 'neumann' or 'dirichlet'")
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (mesh.n_points,):
        raise ValueError("rho must be sampled on the interior mesh nodes")
    projected = 0.0
    if bc == "neumann":
        total = mesh.integrate(rho)
        l1 = mesh.integrate(np.abs(rho))
        if l1 > 0 and abs(total) > neutrality_rtol * l1:
            raise SolvabilityError(
                "neumann solve requires neutral charge: "
                f"|int rho| = {abs(total):.3e} exceeds {neutrality_rtol:.1e} * "
                f"||rho||_1 = {neutrality_rtol * l1:.3e}"
            )
        projected = total / (mesh.n_points * mesh.h**3)
        rho = rho - projected
    if method == "auto":
        method = "spectral" if mesh.domain.kind == "ball" else "fd"
    if method == "spectral":
        sol = _solve_spectral(mesh, rho, bc)
    elif method == "fd":
        sol = _solve_fd(mesh, rho, bc)
    else:
        raise ValueError("method must be 'auto', 'spectral' or 'fd'")
    sol.projected_neutrality = projected
    return sol


def holder_seminorm(
    points: np.ndarray,
    values: np.ndarray,
    a: float,
    min_sep: float,
    block: int = 512,
) -> float:
    """max |v(x) - v(y)| / |x - y|^a over point pairs with |x - y| >= min_sep.

    The separation floor keeps mesh-scale noise out of the sup.
    """
    if not 0.0 < a <= 1.0:
        raise ValueError("exponent must lie in (0, 1]")
    pts = np.asarray(points, dtype=float)
    vals = np.asarray(values, dtype=float)
    best = 0.0
    for start in range(0, pts.shape[0], block):
        stop = min(start + block, pts.shape[0])
        d = np.linalg.norm(pts[start:stop, None, :] - pts[None, :, :], axis=-1)
        dv = np.abs(vals[start:stop, None] - vals[None, :])
        ok = d >= min_sep
        if np.any(ok):
            best = max(best, float(np.max(dv[ok] / d[ok] ** a)))
    return best


def gradient_holder_seminorm(
    mesh: SpatialMesh, values: np.ndarray, a: float, min_sep: float | None = None
) -> float:
    """Holder seminorm of the finite-difference gradient components."""
    grad = _fd_gradient_field(mesh, values)
    sep = 2.0 * mesh.h if min_sep is None else min_sep
    return max(holder_seminorm(mesh.points, grad[:, c], a, sep) for c in range(3))


def interpolation_report(
    solution: PoissonSolution,
    t_values: np.ndarray,
    lam0: float = 1.0,
    d1: float = 0.5,
    d2: float = 0.5,
) -> dict:
    """Measured constant in the two-sided Hessian interpolation bound.

    For each t the bound reads

        ||Hess phi||_inf <= C ( e^{d1 lam0 t} ||phi||_{C^{1,1-d1}}
                              + e^{-d2 lam0 t} ||phi||_{C^{2,d2}} )

    and the report returns the per-t ratio plus its sup (the measured C).
    Norms are sampled on the solution's mesh nodes; derivative seminorms
    use exact derivatives on the spectral branch.
    """
    mesh = solution.mesh
    pts = mesh.points
    sep = 2.0 * mesh.h
    grad = -solution.E
    hess = solution.hessian_at(pts)
    hess_inf = float(np.max(np.abs(hess)))
    grad_inf = float(np.max(np.abs(grad)))
    phi_inf = float(np.max(np.abs(solution.phi)))
    sem_grad = max(holder_seminorm(pts, grad[:, c], 1.0 - d1, sep) for c in range(3))
    sem_hess = max(
        holder_seminorm(pts, hess[:, r, c], d2, sep)
        for r in range(3)
        for c in range(3)
    )
    c1 = phi_inf + grad_inf + sem_grad
    c2 = phi_inf + grad_inf + hess_inf + sem_hess
    t = np.asarray(t_values, dtype=float)
    rhs = np.exp(d1 * lam0 * t) * c1 + np.exp(-d2 * lam0 * t) * c2
    ratio = hess_inf / rhs
    return {
        "t": t,
        "ratio": ratio,
        "constant": float(np.max(ratio)),
        "norm_c1": c1,
        "norm_c2": c2,
        "hess_inf": hess_inf,
    }
