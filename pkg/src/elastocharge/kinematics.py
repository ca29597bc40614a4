"""Deformation fields: gradients, cofactor algebra, determinant monitoring,
and the change-of-variables machinery (preimage sums / pushforward densities).

A deformation is held as coefficient vectors in a C1 Galerkin basis; first
and second gradients, determinants and cofactors are cached at the basis'
quadrature points and recomputed whenever coefficients change (states are
treated as immutable snapshots).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DeformationState",
    "DetReport",
    "SingularDeformationError",
    "gradients",
    "cof_inv",
    "cof_matrix",
    "div_inv_transpose",
    "det_monitor",
    "preimages",
    "area_formula_residual",
    "pushforward_density",
    "pushforward_total",
]


class SingularDeformationError(ValueError):
    """Raised when an operation meets det F = 0 (no inverse transpose)."""


def cof_matrix(F):
    """Cofactor of F for d in {1, 2}; Cof F = (det F) F^{-T} where invertible.

    For d=1 the cofactor is the scalar 1 (as a 1x1 matrix).
    """
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    if d == 1:
        return np.ones_like(F)
    if d == 2:
        C = np.empty_like(F)
        C[..., 0, 0] = F[..., 1, 1]
        C[..., 0, 1] = -F[..., 1, 0]
        C[..., 1, 0] = -F[..., 0, 1]
        C[..., 1, 1] = F[..., 0, 0]
        return C
    raise ValueError("only d=1 and d=2 are supported")


def cof_inv(F):
    """Determinant, cofactor and inverse transpose of F.

    Returns (detF, CofF, FinvT); FinvT is None when detF == 0 and the caller
    is expected to treat the state as singular.
    """
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    if d == 1:
        det = F[..., 0, 0]
    else:
        det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    C = cof_matrix(F)
    if np.any(det == 0.0):
        return det, C, None
    FinvT = C / det[..., None, None]
    return det, C, FinvT


@dataclass(frozen=True)
class DeformationState:
    """Coefficients of the deformation map and its velocity, with caches.

    chi, chidot : arrays (d, N) of per-component coefficients.
    Cached at the basis quadrature points: F (Q,d,d), G (Q,d,d,d) symmetric in
    its last two indices, detF (Q,), CofF (Q,d,d).
    """

    basis: object
    chi: np.ndarray
    chidot: np.ndarray
    F: np.ndarray = field(repr=False, default=None)
    G: np.ndarray = field(repr=False, default=None)
    detF: np.ndarray = field(repr=False, default=None)
    CofF: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_coeffs(cls, basis, chi, chidot=None):
        d = basis.domain.dim
        chi = np.asarray(chi, dtype=float).reshape(d, basis.dofs_per_component)
        if chidot is None:
            chidot = np.zeros_like(chi)
        else:
            chidot = np.asarray(chidot, dtype=float).reshape(chi.shape)
        F = np.einsum("ia,qaj->qij", chi, basis.B1)
        G = np.einsum("ia,qajk->qijk", chi, basis.B2)
        detF, CofF, _ = cof_inv(F)
        return cls(basis, chi, chidot, F, G, detF, CofF)

    def with_coeffs(self, chi=None, chidot=None):
        return DeformationState.from_coeffs(
            self.basis,
            self.chi if chi is None else chi,
            self.chidot if chidot is None else chidot,
        )

    @classmethod
    def identity(cls, basis):
        """The identity map chi(x) = x interpolated exactly."""
        d = basis.domain.dim
        chi = np.zeros((d, basis.dofs_per_component))
        if d == 1:
            chi[0] = basis.interpolate({(0,): lambda x: x, (1,): lambda x: 1.0})
        else:
            zero = lambda x, y: 0.0
            chi[0] = basis.interpolate({(0, 0): lambda x, y: x, (1, 0): lambda x, y: 1.0,
                                        (0, 1): zero, (1, 1): zero})
            chi[1] = basis.interpolate({(0, 0): lambda x, y: y, (1, 0): zero,
                                        (0, 1): lambda x, y: 1.0, (1, 1): zero})
        return cls.from_coeffs(basis, chi)

    def map_points(self, points):
        """Images chi(x) of reference points, shape (P, d)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        B0 = self.basis.eval_many(pts, 0)
        return np.einsum("ia,pa->pi", self.chi, B0)


def gradients(state, x, basis=None):
    """First and second deformation gradients at a reference point.

    Returns (F, G) with F_ij = d chi_i / d x_j and G_ijk = d^2 chi_i / dx_j dx_k.
    """
    basis = state.basis if basis is None else basis
    B1 = basis.eval_shapes(x, 1)
    B2 = basis.eval_shapes(x, 2)
    F = np.einsum("ia,aj->ij", state.chi, B1)
    G = np.einsum("ia,ajk->ijk", state.chi, B2)
    return F, G


def div_inv_transpose(state, x, basis=None):
    """Row divergence of the matrix field F^{-T} at x.

    Uses the chain rule through the derivative of Cof/det contracted with the
    second gradient: div(F^{-T})_j = -F^{-1}_{ic} F^{-1}_{dj} G_{cdi}.
    """
    F, G = gradients(state, x, basis)
    det = np.linalg.det(F)
    if det == 0.0:
        raise SingularDeformationError(f"det F = 0 at x = {x}")
    Finv = np.linalg.inv(F)
    return -np.einsum("ic,dj,cdi->j", Finv, Finv, G)


@dataclass(frozen=True)
class DetReport:
    """Determinant monitor outcome over the sample set."""

    min_det: float
    floor: float
    violated: bool
    argmin: np.ndarray
    n_points: int

    def as_dict(self):
        return {
            "min_det": float(self.min_det),
            "floor": float(self.floor),
            "violated": bool(self.violated),
            "argmin": [float(v) for v in np.atleast_1d(self.argmin)],
            "n_points": int(self.n_points),
        }


def det_monitor(state, floor, oversample=4, extra_points=None):
    """Scan det F over quadrature points plus an oversampled uniform grid.

    The report's `violated` flag is set iff min det < floor; the stepper
    consumes the flag, this function never raises.
    """
    if floor <= 0:
        raise ValueError("determinant floor must be positive")
    pts, B1 = state.basis.monitor_points(oversample)
    F = np.einsum("ia,paj->pij", state.chi, B1)
    det = np.linalg.det(F) if F.shape[-1] > 1 else F[:, 0, 0]
    if extra_points is not None:
        extra_points = np.atleast_2d(extra_points)
        B1x = state.basis.eval_many(extra_points, 1)
        Fx = np.einsum("ia,paj->pij", state.chi, B1x)
        detx = np.linalg.det(Fx) if Fx.shape[-1] > 1 else Fx[:, 0, 0]
        det = np.concatenate([det, detx])
        pts = np.vstack([pts, extra_points])
    k = int(np.argmin(det))
    min_det = float(det[k])
    return DetReport(min_det, float(floor), min_det < floor, pts[k], len(det))


# ---------------------------------------------------------------------------
# preimage search and the change-of-variables formulas


def preimages(state, y, tol=1e-10, maxit=40, dedup=1e-8):
    """All reference points x with chi(x) = y, by Newton from element centers.

    Seeds are the element centers; iterates are clamped to the reference box
    and all seeds advance in lockstep (vectorized).  Returns (roots, flagged):
    roots is an (n, d) array of de-duplicated solutions, flagged counts
    seeds that stalled at an interior point with a residual above tolerance
    (a potential missed preimage).
    """
    basis = state.basis
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = basis.domain.dim
    lo = np.array([a for a, _ in basis.domain.extent])
    hi = np.array([b for _, b in basis.domain.extent])
    scale = max(1.0, float(np.max(np.abs(y))))
    axes = [np.array([a for a, _ in basis.domain.extent])[ax]
            + (np.arange(basis.n_el[ax]) + 0.5) * basis.h[ax] for ax in range(d)]
    if d == 1:
        X = axes[0][:, None].copy()
    else:
        gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
        X = np.column_stack([gx.ravel(), gy.ravel()])
    active = np.ones(len(X), dtype=bool)
    converged = np.zeros(len(X), dtype=bool)
    for _ in range(maxit):
        if not np.any(active):
            break
        idx = np.where(active)[0]
        B0 = basis.eval_many(X[idx], 0)
        r = np.einsum("ia,pa->pi", state.chi, B0) - y[None, :]
        rn = np.linalg.norm(r, axis=1)
        done = rn <= tol * scale
        converged[idx[done]] = True
        active[idx[done]] = False
        idx = idx[~done]
        if len(idx) == 0:
            break
        B1 = basis.eval_many(X[idx], 1)
        F = np.einsum("ia,paj->pij", state.chi, B1)
        det = np.linalg.det(F) if d > 1 else F[:, 0, 0]
        bad = np.abs(det) < 1e-300
        F = F.copy()
        F[bad] = np.eye(d)
        dx = np.einsum("pij,pj->pi", np.linalg.inv(F), r[~done])
        active[idx[bad]] = False
        X[idx] = np.clip(X[idx] - dx, lo, hi)
    roots = []
    for x in X[converged]:
        if not any(np.linalg.norm(x - r0) < dedup for r0 in roots):
            roots.append(x)
    stalled = ~converged
    interior = np.all(X > lo + 1e-12, axis=1) & np.all(X < hi - 1e-12, axis=1)
    flagged = int(np.sum(stalled & interior))
    return np.array(roots).reshape(-1, d), flagged


def pushforward_density(state, q_ref, y, tol=1e-10):
    """Spatial density at y: sum of q(x)/det F(x) over the preimages of y.

    Zero when y has no preimage.  Requires det F > 0 on the preimage set.
    """
    roots, _ = preimages(state, y, tol=tol)
    total = 0.0
    for x in roots:
        F, _ = gradients(state, x)
        det = np.linalg.det(F)
        if det <= 0:
            raise SingularDeformationError(f"det F = {det} at preimage {x}")
        total += float(q_ref(*x)) / det
    return total


def pushforward_total(state, q_ref, n_points=64):
    """Integral of the pushforward density over physical space.

    In d=1 the deformed body is the interval between the images of the
    endpoints (det F > 0 makes chi monotone), so a composite Gauss rule on
    that support integrates the smooth density to near machine accuracy; in
    d=2 a midpoint grid over the bounding box of the deformed body is used
    and carries a first-order boundary error (documented; regression-bounded
    in the tests).
    """
    d = state.basis.domain.dim
    if d == 1:
        total = 0.0
        for yp, wp in zip(*_support_rule_1d(state, n_points)):
            total += wp * pushforward_density(state, q_ref, [yp])
        return total
    box_lo, box_hi = _deformed_bbox(state)
    n = int(round(np.sqrt(n_points))) * 4
    hx = (box_hi[0] - box_lo[0]) / n
    hy = (box_hi[1] - box_lo[1]) / n
    total = 0.0
    for i in range(n):
        for j in range(n):
            y = [box_lo[0] + (i + 0.5) * hx, box_lo[1] + (j + 0.5) * hy]
            total += hx * hy * pushforward_density(state, q_ref, y)
    return total


def _support_rule_1d(state, n_points):
    """Gauss rule over the deformed 1D body, panel-aligned to the images of
    the element edges (the pushforward density has derivative kinks there)."""
    basis = state.basis
    (a, b) = basis.domain.extent[0]
    edges = a + basis.h[0] * np.arange(basis.n_el[0] + 1)
    y_edges = np.sort(state.map_points(edges[:, None])[:, 0])
    per_panel = max(2, n_points // basis.n_el[0])
    xg, wg = np.polynomial.legendre.leggauss(8)
    pts, wts = [], []
    for y0, y1 in zip(y_edges[:-1], y_edges[1:]):
        hs = (y1 - y0) / per_panel
        for e in range(per_panel):
            c0 = y0 + e * hs
            pts.append(c0 + (xg + 1.0) * 0.5 * hs)
            wts.append(0.5 * hs * wg)
    return np.concatenate(pts), np.concatenate(wts)


def _deformed_bbox(state, margin=0.02):
    pts, _ = state.basis.monitor_points()
    img = state.map_points(pts)
    lo = img.min(axis=0)
    hi = img.max(axis=0)
    pad = margin * (hi - lo + 1e-12)
    return lo - pad, hi + pad


def area_formula_residual(state, f, grid_n=64):
    """|LHS - RHS| of the change-of-variables identity for integrable f.

    RHS = integral of f * det(grad chi) over the reference body by quadrature;
    LHS = integral over physical space of the preimage sum of f, evaluated by
    preimage search on a uniform grid (d=1: support-exact composite Gauss,
    d=2: midpoint grid on the deformed bounding box).  Requires det F > 0
    everywhere.  Returns a dict with the residual, both sides, and the count
    of flagged (non-converged interior) preimage searches.
    """
    if np.min(state.detF) <= 0:
        raise SingularDeformationError("area formula requires det F > 0 everywhere")
    basis = state.basis
    w = basis.quad.weights
    fq = np.array([float(f(*x)) for x in basis.quad.points])
    rhs = float(np.sum(w * fq * state.detF))
    d = basis.domain.dim
    flagged = 0

    def preimage_sum(y):
        nonlocal flagged
        roots, fl = preimages(state, y)
        flagged += fl
        return sum(float(f(*x)) for x in roots)

    if d == 1:
        lhs = 0.0
        for yp, wp in zip(*_support_rule_1d(state, grid_n)):
            lhs += wp * preimage_sum([yp])
    else:
        box_lo, box_hi = _deformed_bbox(state)
        hx = (box_hi[0] - box_lo[0]) / grid_n
        hy = (box_hi[1] - box_lo[1]) / grid_n
        lhs = 0.0
        for i in range(grid_n):
            for j in range(grid_n):
                y = [box_lo[0] + (i + 0.5) * hx, box_lo[1] + (j + 0.5) * hy]
                lhs += hx * hy * preimage_sum(y)
    return {"residual": abs(lhs - rhs), "lhs": lhs, "rhs": rhs,
            "flagged_cells": flagged}
