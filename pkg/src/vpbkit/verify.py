"""Lemma-verification harness: fast, deterministic checks per module suite.

Each suite exercises the computable identities its module is built on:
moment integrals with known roots, manufactured Poisson solutions, exit
geometry with closed-form answers, invariance residuals, and a miniature
solver march whose conservation gates must hold at any resolution.  A check
either passes against a stated tolerance, fails, or only reports a measured
constant.  Suites are independently selectable and the report serializes to
one JSON document.

The heavyweight quantitative targets (fine grids, long horizons, runtime
budgets) live in the test suite; verify favours seconds-scale feedback.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np

from .characteristics import FieldHandle, backward_exit, escape_probability, jacobian_dX_dv
from .collision import KernelTables, apply_gamma, apply_K, apply_L, nu
from .field import SolvabilityError, SpatialMesh, solve_poisson
from .geometry import ConvexDomain
from .kinetic_distance import AlphaParams, alpha_inverse_moment, transport_residual
from .phase_grid import C_MU, DistributionPair, VelocityGrid, halfspace_flux, maxwellian
from .solver import SolverConfig, equilibrium_data, odd_mode_data, time_march
from .spectral import build_null_basis, beta_residual

__all__ = [
    "VERIFY_REPORT_SCHEMA",
    "SUITE_NAMES",
    "CheckResult",
    "VerifyReport",
    "run_suites",
    "write_report",
]

VERIFY_REPORT_SCHEMA = "vpbkit.verify_report.v1"

SUITE_NAMES = (
    "geometry",
    "kernels",
    "spectral",
    "field",
    "characteristics",
    "alpha",
    "solver",
)


@dataclass(frozen=True)
class CheckResult:
    """One verification outcome; `measured` holds the reported constants."""

    name: str
    status: str  # pass | fail | measured
    measured: dict
    tolerance: Optional[float]
    wall_time: float
    required: bool = True
    detail: str = ""


@dataclass(frozen=True)
class VerifyReport:
    results: tuple

    @property
    def overall_pass(self) -> bool:
        return all(r.status == "pass" for r in self.results if r.required)

    def to_document(self) -> dict:
        return {
            "schema": VERIFY_REPORT_SCHEMA,
            "overall": "pass" if self.overall_pass else "fail",
            "checks": [
                {
                    "name": r.name,
                    "status": r.status,
                    "measured": r.measured,
                    "tolerance": r.tolerance,
                    "wall_time": r.wall_time,
                    "required": r.required,
                    "detail": r.detail,
                }
                for r in self.results
            ],
        }


def _check(name: str, fn: Callable[[], tuple]) -> CheckResult:
    """Run one check body returning (ok_or_None, measured, tol, detail)."""
    t0 = time.perf_counter()
    try:
        ok, measured, tol, detail = fn()
    except Exception as exc:  # a crashed check is a failed check, not a crash
        return CheckResult(
            name=name,
            status="fail",
            measured={},
            tolerance=None,
            wall_time=time.perf_counter() - t0,
            detail=f"{type(exc).__name__}: {exc}",
        )
    wall = time.perf_counter() - t0
    if ok is None:
        return CheckResult(name, "measured", measured, tol, wall, required=False,
                           detail=detail)
    return CheckResult(name, "pass" if ok else "fail", measured, tol, wall,
                       detail=detail)


# -- geometry ---------------------------------------------------------------------


def _suite_geometry() -> list:
    ball = ConvexDomain.ball(1.0)
    ell = ConvexDomain.ellipsoid((1.0, 0.8, 1.2))
    rng = np.random.default_rng(2024)

    def chord():
        t, xb = ball.ray_exit(np.zeros(3), np.array([2.0, 0.0, 0.0]))
        err = max(abs(t - 0.5), float(np.max(np.abs(xb - np.array([1.0, 0.0, 0.0])))))
        return err <= 1e-12, {"t_exit": t, "error": err}, 1e-12, ""

    def normals():
        worst = 0.0
        for dom in (ball, ell):
            pts = dom.sample_boundary(rng, 64)
            nrm = dom.outward_normal(pts)
            worst = max(worst, float(np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0))))
            worst = max(worst, float(np.max(np.abs(dom.xi(pts)))))
        return worst <= 1e-9, {"max_residual": worst}, 1e-9, "unit normals, on-surface samples"

    def convexity():
        pts = ell.sample_boundary(rng, 32)
        frames = [ell.tangent_frame(p) for p in pts]
        ratios = []
        for fr in frames:
            for zeta in (fr.tau1, fr.tau2, (fr.tau1 + fr.tau2) / math.sqrt(2.0)):
                ratios.append(float(ell.convexity_margin(fr.point, zeta)))
        lo = min(ratios)
        return lo > 0.0, {"min_margin": lo}, None, "zeta^T Hess(xi) zeta over tangents"

    def nearest():
        pts = ball.sample_interior(rng, 32)
        np_ = ball.nearest_boundary(pts)
        worst = float(np.max(np.abs(ball.xi(np_.point))))
        return worst <= 1e-9, {"max_xi": worst}, 1e-9, ""

    return [
        _check("geometry/chord_exit", chord),
        _check("geometry/unit_normals", normals),
        _check("geometry/convexity_margin", convexity),
        _check("geometry/nearest_boundary", nearest),
    ]


# -- kernels ----------------------------------------------------------------------


def _suite_kernels() -> list:
    grid = VelocityGrid(6.0, 16)
    tables = KernelTables(grid)
    rng = np.random.default_rng(11)

    def nu_bounds():
        speed = np.linalg.norm(grid.nodes, axis=1)
        bracket = np.sqrt(1.0 + speed**2)
        vals = nu(grid.nodes) / bracket
        lo, hi = float(vals.min()), float(vals.max())
        return lo > 0.0, {"c0": lo, "c1": hi}, None, "nu(v) / <v> bracket"

    def selfadjoint():
        g = DistributionPair(rng.normal(size=grid.shape), rng.normal(size=grid.shape))
        h = DistributionPair(rng.normal(size=grid.shape), rng.normal(size=grid.shape))
        Kg, Kh = apply_K(tables, g), apply_K(tables, h)
        lhs = float(np.sum(Kg.plus * h.plus + Kg.minus * h.minus))
        rhs = float(np.sum(g.plus * Kh.plus + g.minus * Kh.minus))
        scale = max(abs(lhs), abs(rhs), 1e-300)
        err = abs(lhs - rhs) / scale
        return err <= 1e-10, {"residual": err}, 1e-10, "<Kg,h> = <g,Kh>"

    def gamma_split():
        small = VelocityGrid(5.0, 8)
        stables = KernelTables(small)
        g = DistributionPair(0.1 * small.sqrt_mu, 0.05 * small.sqrt_mu)
        both = apply_gamma(stables, g, g)
        gain = apply_gamma(stables, g, g, parts="gain")
        loss = apply_gamma(stables, g, g, parts="loss")
        err = max(
            float(np.max(np.abs(both.plus - gain.plus + loss.plus))),
            float(np.max(np.abs(both.minus - gain.minus + loss.minus))),
        )
        return err <= 1e-14, {"max_abs": err}, 1e-14, "both == gain - loss"

    def l_on_nullvec():
        basis = build_null_basis(grid)
        worst = 0.0
        for k in range(basis.vectors.shape[0]):
            vec = basis.vectors[k]
            pair = DistributionPair(vec[0].copy(), vec[1].copy())
            Lv = apply_L(tables, pair)
            num = math.sqrt(float(np.sum(Lv.plus**2 + Lv.minus**2)))
            den = math.sqrt(float(np.sum(pair.plus**2 + pair.minus**2)))
            worst = max(worst, num / den)
        return worst <= 5e-2, {"max_rel_norm": worst}, 5e-2, "L b_i small at N=16"

    return [
        _check("kernels/nu_bounds", nu_bounds),
        _check("kernels/self_adjoint", selfadjoint),
        _check("kernels/gamma_split", gamma_split),
        _check("kernels/null_vectors", l_on_nullvec),
    ]


# -- spectral ---------------------------------------------------------------------


def _suite_spectral() -> list:
    grid = VelocityGrid(6.0, 32)

    def beta(kind: str, value: float, tol: float):
        def body():
            r = beta_residual(grid, kind, value)
            return abs(r) <= tol, {"residual": r}, tol, f"beta_{kind} = {value}"

        return body

    def beta_a9():
        r = beta_residual(grid, "a", 9.0)
        target = 1.0 / math.sqrt(2.0)
        rel = abs(r - target) / target
        return rel <= 1e-2, {"residual": r, "target": target, "rel_err": rel}, 1e-2, ""

    return [
        _check("spectral/beta_a10", beta("a", 10.0, 1e-4)),
        _check("spectral/beta_b1", beta("b", 1.0, 1e-4)),
        _check("spectral/beta_c5", beta("c", 5.0, 1e-4)),
        _check("spectral/beta_a9_offset", beta_a9),
    ]


# -- field ------------------------------------------------------------------------


def _suite_field() -> list:
    dom = ConvexDomain.ball(1.0)
    mesh = SpatialMesh(dom, 16)
    r2 = np.einsum("ij,ij->i", mesh.points, mesh.points)

    def neumann_x1():
        rho = mesh.points[:, 0]
        sol = solve_poisson(mesh, rho, bc="neumann")
        exact = mesh.points[:, 0] * (3.0 - r2) / 10.0
        exact = exact - exact.mean()
        phi = sol.phi - sol.phi.mean()
        err = float(np.max(np.abs(phi - exact)) / np.max(np.abs(exact)))
        return err <= 1e-2, {"max_rel_err": err, "method": sol.method}, 1e-2, ""

    def dirichlet_const():
        rho = np.ones(mesh.n_points)
        sol = solve_poisson(mesh, rho, bc="dirichlet")
        exact = (1.0 - r2) / 6.0
        err = float(np.max(np.abs(sol.phi - exact)) / np.max(np.abs(exact)))
        return err <= 1e-2, {"max_rel_err": err, "method": sol.method}, 1e-2, ""

    def neutrality_gate():
        try:
            solve_poisson(mesh, np.ones(mesh.n_points), bc="neumann")
        except SolvabilityError:
            return True, {}, None, "non-neutral Neumann data rejected"
        return False, {}, None, "SolvabilityError not raised"

    return [
        _check("field/neumann_x1", neumann_x1),
        _check("field/dirichlet_const", dirichlet_const),
        _check("field/neutrality_gate", neutrality_gate),
    ]


# -- characteristics --------------------------------------------------------------


def _suite_characteristics() -> list:
    dom = ConvexDomain.ball(1.0)
    zero = FieldHandle.zero()
    rng = np.random.default_rng(7)

    def straight_exit():
        rec = backward_exit(1.0, np.zeros(3), np.array([2.0, 0.0, 0.0]), 1, zero, dom)
        err = max(
            abs(rec.t_b - 0.5),
            float(np.max(np.abs(rec.x_b - np.array([-1.0, 0.0, 0.0])))),
        )
        return err <= 1e-12, {"t_b": rec.t_b, "error": err, "margin": rec.margin}, 1e-12, ""

    def nongrazing():
        # tangential field: E(x) = c (-x2, x1, 0) has E.n = 0 on the sphere
        handle = FieldHandle(
            lambda x: 0.3 * np.stack(
                [-np.atleast_2d(x)[:, 1], np.atleast_2d(x)[:, 0],
                 np.zeros(np.atleast_2d(x).shape[0])], axis=-1
            ).reshape(np.shape(x))
        )
        worst = -np.inf
        for _ in range(200):
            x = dom.sample_interior(rng, 1)[0]
            v = rng.normal(size=3)
            if np.linalg.norm(v) < 0.3:
                continue
            rec = backward_exit(1.0, x, v, 1, handle, dom, max_time=8.0)
            if rec.infinite:
                continue
            worst = max(worst, rec.margin)
        return worst < 0.0, {"max_margin": worst}, None, "n(x_b).v_b < 0 off grazing"

    def jacobian_free():
        worst = 0.0
        for ts in (0.3, 0.7):
            J, det = jacobian_dX_dv(0.0, ts, np.zeros(3), np.array([0.5, 0.2, -0.1]),
                                    1, zero, dom)
            worst = max(worst, abs(det - ts**3))
        return worst <= 1e-10, {"max_abs_err": worst}, 1e-10, "det dX/dv = (t-s)^3"

    return [
        _check("characteristics/straight_exit", straight_exit),
        _check("characteristics/nongrazing", nongrazing),
        _check("characteristics/jacobian_free", jacobian_free),
    ]


# -- alpha ------------------------------------------------------------------------


def _suite_alpha() -> list:
    dom = ConvexDomain.ball(1.0)
    zero = FieldHandle.zero()

    def invariance_free():
        r = transport_residual(1.0, np.array([0.3, -0.2, 0.1]),
                               np.array([0.8, 0.4, -0.6]), 1, zero, dom)
        return r <= 1e-12, {"residual": r}, 1e-12, "alpha constant on free flow"

    def inverse_moment():
        val = alpha_inverse_moment(0.9, 1.0, 1.0, np.zeros(3), 1, zero, dom, n_grid=24)
        target = 4.0 * math.pi / 2.1
        rel = abs(val - target) / target
        return rel <= 2e-2, {"value": val, "target": target, "rel_err": rel}, 2e-2, ""

    def escape_decay():
        dom_T = 3.0
        probs = []
        for k in (1, 2, 3):
            p, _ = escape_probability(dom_T, np.zeros(3), np.array([0.8, 0.0, 0.0]),
                                      1, k, 2000, zero, dom, seed=5)
            probs.append(p)
        ratios = [probs[i + 1] / max(probs[i], 1e-300) for i in range(2)]
        ok = all(r <= 0.9 for r in ratios)
        return ok, {"p": probs, "ratios": ratios}, 0.9, "geometric window decay"

    return [
        _check("alpha/free_invariance", invariance_free),
        _check("alpha/inverse_moment", inverse_moment),
        _check("alpha/escape_decay", escape_decay),
    ]


# -- solver -----------------------------------------------------------------------


def _tiny_config(**overrides) -> SolverConfig:
    base = dict(
        n_mesh=5,
        n_velocity=8,
        v_max=5.0,
        t_final=0.1,
        segment_dt=0.05,
        max_sweeps=7,
        n_boundary_samples=16,
    )
    base.update(overrides)
    return SolverConfig(**base)


def _suite_solver() -> list:
    def equilibrium_flat():
        res = time_march(_tiny_config(include_collisions=False), equilibrium_data())
        drift = max(abs(r.mass_plus - res.records[0].mass_plus) for r in res.records)
        neut = max(abs(r.neutrality) for r in res.records)
        ok = drift == 0.0 and neut == 0.0 and all(r.l2_f == 0.0 for r in res.records)
        return ok, {"mass_drift": drift, "neutrality": neut}, None, "f = 0 stays 0"

    def tiny_march():
        res = time_march(_tiny_config(), odd_mode_data(0.04))
        s = res.summary
        mass = res.records[0].mass_plus
        incs = s["segment_increments"][0]
        ratios = [incs[i] / incs[i - 1] for i in range(1, min(6, len(incs)))]
        ok = (
            s["mass_drift_rel"] <= 1e-2
            and s["max_abs_neutrality"] <= 1e-8 * mass
            and s["min_F"] >= -1e-6
            and all(r <= 0.7 for r in ratios)
        )
        measured = {
            "mass_drift_rel": s["mass_drift_rel"],
            "neutrality": s["max_abs_neutrality"],
            "min_F": s["min_F"],
            "contraction_ratios": ratios,
            "lambda_fit": s["lambda_fit"],
        }
        return ok, measured, None, "conservation and contraction gates"

    return [
        _check("solver/equilibrium_flat", equilibrium_flat),
        _check("solver/tiny_march", tiny_march),
    ]


_SUITES = {
    "geometry": _suite_geometry,
    "kernels": _suite_kernels,
    "spectral": _suite_spectral,
    "field": _suite_field,
    "characteristics": _suite_characteristics,
    "alpha": _suite_alpha,
    "solver": _suite_solver,
}


def run_suites(names: Optional[list] = None) -> VerifyReport:
    """Run the named suites (all by default) and collect one report."""
    chosen = list(SUITE_NAMES) if not names else list(names)
    for name in chosen:
        if name not in _SUITES:
            raise ValueError(
                f"unknown suite {name!r}; available: {', '.join(SUITE_NAMES)}"
            )
    results: list = []
    for name in chosen:
        results.extend(_SUITES[name]())
    return VerifyReport(results=tuple(results))


def write_report(report: VerifyReport, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_document(), fh, indent=2, sort_keys=True)
        fh.write("\n")
