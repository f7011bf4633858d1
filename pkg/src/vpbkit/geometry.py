"""Bounded convex domains described by a smooth level-set function.

A domain is the sublevel set ``Omega = {x in R^3 : xi(x) < 0}`` of a C^2
function ``xi`` whose gradient does not vanish near the boundary.  The module
supplies outward normals, tangent frames, nearest-boundary projection, the
convexity margin of the second fundamental form, and exact ray-boundary
intersection.  Analytic balls and ellipsoids are shipped; user level-sets are
accepted with finite-difference derivative fallbacks.

All point-valued operations accept arrays of shape (..., 3) and broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "ConvexDomain",
    "BoundaryFrame",
    "NearestPoint",
    "INFINITE_EXIT",
]

# Sentinel exit time for a stationary ray (v = 0): the ray never leaves.
INFINITE_EXIT = math.inf

# Relative boundary tolerance: a point x counts as "on the boundary" when
# |xi(x)| <= BOUNDARY_RTOL * bounding_radius * |grad xi(x)|-scale.
BOUNDARY_RTOL = 1e-9


def _fd_gradient(xi: Callable, x: np.ndarray, h: float) -> np.ndarray:
    g = np.empty(x.shape, dtype=float)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[..., i] = (xi(x + e) - xi(x - e)) / (2.0 * h)
    return g


def _fd_hessian(grad: Callable, x: np.ndarray, h: float) -> np.ndarray:
    H = np.empty(x.shape + (3,), dtype=float)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        H[..., i, :] = (grad(x + e) - grad(x - e)) / (2.0 * h)
    # symmetrize: mixed partials commute for C^2 level sets
    return 0.5 * (H + np.swapaxes(H, -1, -2))


@dataclass(frozen=True)
class BoundaryFrame:
    """Orthonormal frame at a boundary point: outward normal and tangents.

    Satisfies n . tau1 = n . tau2 = tau1 . tau2 = 0 and tau1 x tau2 = n.
    Arrays have shape (..., 3) and broadcast together.
    """

    point: np.ndarray
    normal: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray


@dataclass(frozen=True)
class NearestPoint:
    """Nearest-boundary projection result.

    ``tie_break`` is set when the projection was not unique (center of a
    ball, center of an ellipsoid) and a deterministic direction was chosen.
    """

    point: np.ndarray
    distance: np.ndarray
    tie_break: np.ndarray


class ConvexDomain:
    """Immutable convex domain Omega = {xi < 0} with analytic derivatives.

    Construct through :meth:`ball`, :meth:`ellipsoid`, or
    :meth:`from_levelset`.  Instances are read-only and safe to share.
    """

    def __init__(
        self,
        kind: str,
        xi: Callable[[np.ndarray], np.ndarray],
        grad_xi: Callable[[np.ndarray], np.ndarray],
        hess_xi: Callable[[np.ndarray], np.ndarray],
        bounding_radius: float,
        params: Optional[dict] = None,
    ):
        self.kind = kind
        self._xi = xi
        self._grad = grad_xi
        self._hess = hess_xi
        self.bounding_radius = float(bounding_radius)
        self.boundary_tol = BOUNDARY_RTOL * self.bounding_radius
        self.params = dict(params or {})

    # ------------------------------------------------------------------
    # constructors

    @classmethod
    def ball(cls, radius: float = 1.0) -> "ConvexDomain":
        """Ball of given radius centered at the origin, xi = |x|^2 - R^2."""
        if radius <= 0:
            raise ValueError(f"ball radius must be positive, got {radius}")
        R2 = radius * radius

        def xi(x):
            x = np.asarray(x, dtype=float)
            return np.einsum("...i,...i->...", x, x) - R2

        def grad(x):
            return 2.0 * np.asarray(x, dtype=float)

        def hess(x):
            x = np.asarray(x, dtype=float)
            H = np.zeros(x.shape + (3,), dtype=float)
            idx = np.arange(3)
            H[..., idx, idx] = 2.0
            return H

        return cls("ball", xi, grad, hess, radius, {"radius": radius})

    @classmethod
    def ellipsoid(cls, semi_axes: tuple) -> "ConvexDomain":
        """Axis-aligned ellipsoid, xi = sum_i x_i^2/a_i^2 - 1."""
        a = np.asarray(semi_axes, dtype=float)
        if a.shape != (3,) or np.any(a <= 0):
            raise ValueError(f"semi-axes must be 3 positive numbers, got {semi_axes}")
        inv2 = 1.0 / a**2

        def xi(x):
            x = np.asarray(x, dtype=float)
            return np.einsum("...i,i,...i->...", x, inv2, x) - 1.0

        def grad(x):
            return 2.0 * inv2 * np.asarray(x, dtype=float)

        def hess(x):
            x = np.asarray(x, dtype=float)
            H = np.zeros(x.shape + (3,), dtype=float)
            idx = np.arange(3)
            H[..., idx, idx] = 2.0 * inv2
            return H

        return cls(
            "ellipsoid", xi, grad, hess, float(a.max()), {"semi_axes": tuple(a)}
        )

    @classmethod
    def from_levelset(
        cls,
        xi: Callable[[np.ndarray], np.ndarray],
        bounding_radius: float,
        grad_xi: Optional[Callable] = None,
        hess_xi: Optional[Callable] = None,
        fd_step: Optional[float] = None,
    ) -> "ConvexDomain":
        """User-supplied level set; derivatives fall back to central differences.

        ``xi`` must be vectorized over (..., 3) points and C^2 near the
        boundary (C^3 smoothness is assumed, not verified).  Convexity can be
        checked a posteriori with :meth:`convexity_margin`.
        """
        h = fd_step if fd_step is not None else 1e-6 * bounding_radius
        g = grad_xi if grad_xi is not None else (lambda x: _fd_gradient(xi, np.asarray(x, dtype=float), h))
        # Hessian differentiates the (analytic or FD) gradient
        H = hess_xi if hess_xi is not None else (lambda x: _fd_hessian(g, np.asarray(x, dtype=float), h))
        return cls("levelset", xi, g, H, bounding_radius)

    # ------------------------------------------------------------------
    # basic queries

    def xi(self, x) -> np.ndarray:
        return self._xi(np.asarray(x, dtype=float))

    def grad_xi(self, x) -> np.ndarray:
        return self._grad(np.asarray(x, dtype=float))

    def hess_xi(self, x) -> np.ndarray:
        return self._hess(np.asarray(x, dtype=float))

    def level_and_normal(self, x):
        """Return (xi(x), grad xi(x), inside flag); inside <=> xi(x) < 0."""
        x = np.asarray(x, dtype=float)
        val = self._xi(x)
        return val, self._grad(x), val < 0.0

    def contains(self, x) -> np.ndarray:
        return self.xi(x) < 0.0

    def on_boundary(self, x, rtol: float = BOUNDARY_RTOL) -> np.ndarray:
        return np.abs(self.xi(x)) <= rtol * self.bounding_radius * max(
            1.0, self.bounding_radius
        )

    def outward_normal(self, x) -> np.ndarray:
        """Unit outward normal n = grad(xi)/|grad(xi)| at (near-)boundary x."""
        g = self.grad_xi(x)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(norm < 1e-13):
            raise ValueError("degenerate level-set gradient: boundary is not smooth here")
        return g / norm

    # ------------------------------------------------------------------
    # frames

    def tangent_frame(self, x) -> BoundaryFrame:
        """Orthonormal (n, tau1, tau2) at boundary point(s) x, tau1 x tau2 = n."""
        x = np.asarray(x, dtype=float)
        n = self.outward_normal(x)
        # seed with the coordinate axis least aligned with n, then orthonormalize
        trial = np.zeros_like(n)
        least = np.argmin(np.abs(n), axis=-1)
        np.put_along_axis(trial, least[..., None], 1.0, axis=-1)
        t1 = trial - np.einsum("...i,...i->...", trial, n)[..., None] * n
        t1 = t1 / np.linalg.norm(t1, axis=-1, keepdims=True)
        t2 = np.cross(n, t1)  # then tau1 x tau2 = n automatically
        return BoundaryFrame(point=x, normal=n, tau1=t1, tau2=t2)

    # ------------------------------------------------------------------
    # nearest boundary point

    def nearest_boundary(self, x) -> NearestPoint:
        """Project x onto the boundary: closest point, distance, tie flag.

        Unique in a collar around the boundary.  At symmetry centers the tie
        is broken deterministically (ball: +e1; ellipsoid: shortest axis) and
        flagged.  Deep-interior ellipsoid points lying inside the evolute can
        admit several local minimizers; the on-plane Lagrange solution is
        returned there, which is the correct projection everywhere the
        toolkit evaluates it (near the boundary).
        """
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            return self._nearest_ball(x)
        if self.kind == "ellipsoid":
            return self._nearest_ellipsoid(x)
        return self._nearest_newton(x)

    def _nearest_ball(self, x) -> NearestPoint:
        R = self.params["radius"]
        r = np.linalg.norm(x, axis=-1)
        tie = r < 1e-12 * R
        rsafe = np.where(tie, 1.0, r)
        point = np.where(
            tie[..., None], R * np.array([1.0, 0.0, 0.0]), R * x / rsafe[..., None]
        )
        dist = np.abs(R - r)
        return NearestPoint(point=point, distance=dist, tie_break=tie)

    def _nearest_ellipsoid(self, x) -> NearestPoint:
        a = np.asarray(self.params["semi_axes"])
        a2 = a**2
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        out = np.empty_like(pts)
        dist = np.empty(pts.shape[0])
        tie = np.zeros(pts.shape[0], dtype=bool)
        j_short = int(np.argmin(a))
        for k, p in enumerate(pts):
            if np.linalg.norm(p) < 1e-12 * a.min():
                q = np.zeros(3)
                q[j_short] = a[j_short]
                out[k], dist[k], tie[k] = q, a[j_short], True
                continue
            # Lagrange stationarity: q_i = p_i a_i^2/(a_i^2 + lam), with the
            # constraint sum q_i^2/a_i^2 = 1 solved for lam by bracketing.
            def g(lam):
                return np.sum(p**2 * a2 / (a2 + lam) ** 2) - 1.0

            inside = np.sum(p**2 / a2) < 1.0
            if inside:
                lo = -a2[np.abs(p) > 1e-14 * a.min()].min()
                lo = lo * (1.0 - 1e-12) + 1e-300
                hi = 0.0
                if g(hi) > 0.0:  # numerically on the boundary already
                    out[k], dist[k] = p, 0.0
                    continue
            else:
                lo = 0.0
                hi = max(a2.max(), float(np.linalg.norm(p)) * a.max())
                while g(hi) > 0.0:
                    hi *= 2.0
            lam = brentq(g, lo, hi, xtol=1e-15, rtol=8.9e-16)
            q = p * a2 / (a2 + lam)
            out[k] = q
            dist[k] = np.linalg.norm(p - q)
        if single:
            return NearestPoint(point=out[0], distance=dist[0], tie_break=tie[0])
        return NearestPoint(point=out, distance=dist, tie_break=tie)

    def _nearest_newton(self, x) -> NearestPoint:
        # generic level set: damped projected-gradient descent onto xi = 0
        single = x.ndim == 1
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(pts)
        for k, p in enumerate(pts):
            q = p.copy()
            for _ in range(100):
                val = float(self.xi(q))
                g = self.grad_xi(q)
                g2 = float(g @ g)
                if g2 < 1e-26:
                    raise ValueError("degenerate gradient during boundary projection")
                step = val / g2 * g
                q = q - step
                if abs(val) <= 1e-14 * max(1.0, self.bounding_radius**2):
                    break
            out[k] = q
        dist = np.linalg.norm(pts - out, axis=-1)
        tie = np.zeros(pts.shape[0], dtype=bool)
        if single:
            return NearestPoint(point=out[0], distance=dist[0], tie_break=tie[0])
        return NearestPoint(point=out, distance=dist, tie_break=tie)

    # ------------------------------------------------------------------
    # convexity

    def convexity_margin(self, p, zeta) -> np.ndarray:
        """Normalized second-fundamental-form margin at boundary point p.

        Returns (zeta^T Hess(xi) zeta) / (|grad xi| |zeta|^2) for tangent
        zeta, which is positive with a uniform lower bound C_Omega on a
        smooth bounded convex domain (1 on the unit ball, min curvature on an
        ellipsoid).
        """
        p = np.asarray(p, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        H = self.hess_xi(p)
        num = np.einsum("...i,...ij,...j->...", zeta, H, zeta)
        gnorm = np.linalg.norm(self.grad_xi(p), axis=-1)
        z2 = np.einsum("...i,...i->...", zeta, zeta)
        if np.any(z2 <= 0.0):
            raise ValueError("tangent vector must be nonzero")
        return num / (gnorm * z2)

    # ------------------------------------------------------------------
    # ray-boundary intersection

    def ray_exit(self, x, v):
        """First boundary crossing of the ray x + t v, t > 0.

        Returns (t_exit, x_exit) with xi(x_exit) = 0 to ~1e-12 absolute.
        A zero velocity gives (INFINITE_EXIT, None): the ray never exits.
        """
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        speed = float(np.linalg.norm(v))
        if speed == 0.0:
            return INFINITE_EXIT, None
        if self.kind in ("ball", "ellipsoid"):
            t = self._ray_exit_quadric(x, v)
        else:
            t = self._ray_exit_march(x, v, speed)
        # Newton polish on s -> xi(x + s v) down to root tolerance
        for _ in range(3):
            p = x + t * v
            val = float(self.xi(p))
            dv = float(self.grad_xi(p) @ v)
            if dv == 0.0 or abs(val) < 1e-15:
                break
            t = t - val / dv
        return t, x + t * v

    def _ray_exit_quadric(self, x, v) -> float:
        if self.kind == "ball":
            inv2 = np.ones(3) / self.params["radius"] ** 2
        else:
            inv2 = 1.0 / np.asarray(self.params["semi_axes"]) ** 2
        A = float(np.sum(v * inv2 * v))
        B = float(2.0 * np.sum(x * inv2 * v))
        C = float(np.sum(x * inv2 * x) - 1.0)
        disc = B * B - 4.0 * A * C
        if disc < 0.0:
            raise ValueError("ray does not meet the boundary (point outside domain?)")
        # larger root: the forward crossing for interior starts (C <= 0)
        return (-B + math.sqrt(disc)) / (2.0 * A)

    def _ray_exit_march(self, x, v, speed) -> float:
        # bracket the sign change, then solve; convexity gives a single crossing
        t_max = 4.0 * self.bounding_radius / speed
        f0 = float(self.xi(x))
        if f0 >= 0.0:
            raise ValueError("ray_exit expects an interior start point")
        n_steps = 64
        ts = np.linspace(0.0, t_max, n_steps + 1)
        vals = self.xi(x[None, :] + ts[:, None] * v[None, :])
        sign_change = np.nonzero(vals >= 0.0)[0]
        if sign_change.size == 0:
            raise ValueError("ray never leaves the bounding region; check the level set")
        hi = ts[sign_change[0]]
        lo = ts[sign_change[0] - 1]
        return brentq(lambda s: float(self.xi(x + s * v)), lo, hi, xtol=1e-15, rtol=8.9e-16)

    # ------------------------------------------------------------------
    # sampling helpers (used by verification drivers and the solver)

    def sample_interior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform rejection sample of n interior points."""
        R = self.bounding_radius
        out = np.empty((n, 3))
        filled = 0
        while filled < n:
            cand = rng.uniform(-R, R, size=(2 * (n - filled) + 8, 3))
            keep = cand[self.contains(cand)]
            take = min(n - filled, keep.shape[0])
            out[filled : filled + take] = keep[:take]
            filled += take
        return out

    def sample_boundary(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Random boundary points (area-uniform on the ball, projected else)."""
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        if self.kind == "ball":
            return self.params["radius"] * dirs
        # project rays from the origin; exact for star-shaped domains
        out = np.empty((n, 3))
        for k in range(n):
            _, xb = self.ray_exit(np.zeros(3), dirs[k])
            out[k] = xb
        return out
