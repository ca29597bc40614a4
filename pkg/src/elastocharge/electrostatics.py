"""The p-regularized electrostatic problem on a truncated spatial box.

The full-space Poisson problem with effective permittivity
eps0 (1 + eps_r |grad phi|^{p-2}) and decay at infinity is truncated to the
box [-R, R]^d with homogeneous Dirichlet data and discretized with standard
P1 (d=1) / Q1 (d=2) elements, independent of the reference-domain C1 basis.
The charge carried by the deformed body enters through the Lagrangian
composition integral  int_Omega q (zeta o chi) dx  -- no inverse deformation
is ever needed.

The discrete energy

    J(phi) = sum_cells w [ eps0/2 |g|^2 + eps1/p |g|^p ] - b . phi

is strictly convex; a damped Newton iteration with Armijo backtracking (and a
Picard fallback on stagnation) drives its gradient to tolerance.  All
quadrature used in the energy, gradient and Hessian is identical, so the
solved state satisfies the discrete weak equation exactly at the reported
residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "ElectrostaticParams",
    "SpatialMesh",
    "PotentialField",
    "CouplingQuadrature",
    "NewtonDivergenceError",
    "BodyEscapeError",
    "solve_potential",
    "electrostatic_energy",
    "field_energy",
    "dual_value",
    "maxwell_stress",
    "weak_residual",
]


class NewtonDivergenceError(RuntimeError):
    """Potential solve failed to converge within the iteration budget."""


class BodyEscapeError(RuntimeError):
    """Deformed body left the inner half-box B_{R/2}."""


@dataclass
class ElectrostaticParams:
    """Truncated-domain parameters of the regularized electrostatics.

    eps0 defaults to the vacuum permittivity in SI units; shipped demo
    scenarios override it with a nondimensional value.  p_reg must exceed the
    spatial dimension.
    """

    eps0: float = 8.854e-12
    eps1: float = 0.0
    p_reg: float = 3.0
    R: float = 4.0
    cells: int = 64
    tol: float = 1e-12
    max_iter: int = 60

    def validate(self, dim):
        if self.eps0 <= 0:
            raise ValueError("electrostatics.eps0 must be positive")
        if self.eps1 < 0:
            raise ValueError("electrostatics.eps1 must be nonnegative")
        if self.p_reg <= dim:
            raise ValueError(
                f"electrostatics.p_reg = {self.p_reg} violates the regularization "
                f"requirement p > d = {dim}")
        if self.R <= 0:
            raise ValueError("electrostatics.R must be positive")
        return self


class SpatialMesh:
    """Uniform P1/Q1 mesh on an axis-aligned box with optional Dirichlet skin.

    Also reused (with dirichlet=False and a general extent) as the
    H1-conforming space for the diffusion unknowns on the reference domain.
    """

    def __init__(self, extent, cells, dirichlet=True):
        extent = tuple((float(a), float(b)) for a, b in extent)
        self.extent = extent
        self.dim = len(extent)
        if np.isscalar(cells):
            cells = (int(cells),) * self.dim
        self.cells = tuple(int(c) for c in cells)
        self.h = tuple((b - a) / n for (a, b), n in zip(extent, self.cells))
        self.axes = [np.linspace(a, b, n + 1) for (a, b), n in zip(extent, self.cells)]
        if self.dim == 1:
            self.nodes = self.axes[0][:, None]
        else:
            X, Y = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
            self.nodes = np.column_stack([X.ravel(), Y.ravel()])
        self.n_dofs = len(self.nodes)
        self.dirichlet = bool(dirichlet)
        mask = np.zeros(self.n_dofs, dtype=bool)
        if self.dirichlet:
            for ax in range(self.dim):
                a, b = extent[ax]
                on = (np.abs(self.nodes[:, ax] - a) < 1e-14) | \
                     (np.abs(self.nodes[:, ax] - b) < 1e-14)
                mask |= on
        self.boundary_mask = mask
        self.free = np.where(~mask)[0]
        self._build_cells()
        self._build_quadrature()

    @classmethod
    def box(cls, dim, R, cells):
        return cls(((-R, R),) * dim, cells, dirichlet=True)

    def _node_id(self, i, j=None):
        if self.dim == 1:
            return i
        return i * (self.cells[1] + 1) + j

    def _build_cells(self):
        ids = []
        if self.dim == 1:
            for e in range(self.cells[0]):
                ids.append([e, e + 1])
        else:
            for ex in range(self.cells[0]):
                for ey in range(self.cells[1]):
                    ids.append([self._node_id(ex, ey), self._node_id(ex + 1, ey),
                                self._node_id(ex, ey + 1), self._node_id(ex + 1, ey + 1)])
        self.cell_dofs = np.array(ids)  # (C, 2^d)
        self.n_cells = len(ids)

    def _build_quadrature(self):
        """Per-cell Gauss rule plus local shape value/gradient tables.

        Two Gauss points per direction: exact for the P1/Q1 mass matrix and
        for any function of the (cellwise-constant in 1D) gradient.
        """
        x, w = np.polynomial.legendre.leggauss(2)
        gp = 0.5 * (x + 1.0)
        gw = 0.5 * w
        if self.dim == 1:
            h = self.h[0]
            self.qp_local = gp[:, None]
            self.qw = gw * h
            # local P1 shapes on [0,1]: [1-t, t]
            self.qN = np.stack([1.0 - gp, gp], axis=1)           # (G, 2)
            self.qD = np.broadcast_to(np.array([[-1.0 / h], [1.0 / h]]),
                                      (len(gp), 2, 1)).copy()     # (G, 2, 1)
        else:
            hx, hy = self.h
            P, W, NN, DD = [], [], [], []
            for a, wa in zip(gp, gw):
                for b2, wb in zip(gp, gw):
                    P.append([a, b2])
                    W.append(wa * wb * hx * hy)
                    n = [(1 - a) * (1 - b2), a * (1 - b2), (1 - a) * b2, a * b2]
                    dx = [-(1 - b2) / hx, (1 - b2) / hx, -b2 / hx, b2 / hx]
                    dy = [-(1 - a) / hy, -a / hy, (1 - a) / hy, a / hy]
                    NN.append(n)
                    DD.append(np.column_stack([dx, dy]))
            self.qp_local = np.array(P)
            self.qw = np.array(W)
            self.qN = np.array(NN)        # (G, 4)
            self.qD = np.array(DD)        # (G, 4, d)
        self.n_gauss = len(self.qw)

    # -- point location and interpolation --------------------------------------

    def locate(self, pts):
        """Cell multi-index and local coordinate of each point (clipped)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx = np.empty((len(pts), self.dim), dtype=int)
        loc = np.empty((len(pts), self.dim))
        for ax in range(self.dim):
            a, _ = self.extent[ax]
            t = (pts[:, ax] - a) / self.h[ax]
            e = np.clip(np.floor(t).astype(int), 0, self.cells[ax] - 1)
            idx[:, ax] = e
            loc[:, ax] = t - e
        return idx, loc

    def cell_of(self, idx):
        if self.dim == 1:
            return idx[:, 0]
        return idx[:, 0] * self.cells[1] + idx[:, 1]

    def shape_values(self, pts):
        """(cells, local shape values) for interpolation at arbitrary points."""
        idx, loc = self.locate(pts)
        c = self.cell_of(idx)
        if self.dim == 1:
            t = loc[:, 0]
            vals = np.stack([1.0 - t, t], axis=1)
        else:
            a, b = loc[:, 0], loc[:, 1]
            vals = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
        return c, vals

    def shape_grads(self, pts):
        idx, loc = self.locate(pts)
        c = self.cell_of(idx)
        if self.dim == 1:
            h = self.h[0]
            g = np.broadcast_to(np.array([[-1.0 / h], [1.0 / h]]),
                                (len(c), 2, 1)).copy()
        else:
            hx, hy = self.h
            a, b = loc[:, 0], loc[:, 1]
            g = np.empty((len(c), 4, 2))
            g[:, 0, 0] = -(1 - b) / hx
            g[:, 1, 0] = (1 - b) / hx
            g[:, 2, 0] = -b / hx
            g[:, 3, 0] = b / hx
            g[:, 0, 1] = -(1 - a) / hy
            g[:, 1, 1] = -a / hy
            g[:, 2, 1] = (1 - a) / hy
            g[:, 3, 1] = a / hy
        return c, g

    def eval(self, coeffs, pts):
        c, vals = self.shape_values(pts)
        return np.einsum("pk,pk->p", coeffs[self.cell_dofs[c]], vals)

    def eval_grad(self, coeffs, pts):
        c, g = self.shape_grads(pts)
        return np.einsum("pk,pkj->pj", coeffs[self.cell_dofs[c]], g)

    def gradients_at_gauss(self, coeffs):
        """grad phi at every cell Gauss point, shape (C, G, d)."""
        return np.einsum("ck,gkj->cgj", coeffs[self.cell_dofs], self.qD)

    def load_vector(self, fun):
        """int f zeta_a by the cell Gauss rule; f a callable of coordinates."""
        b = np.zeros(self.n_dofs)
        for ci in range(self.n_cells):
            dofs = self.cell_dofs[ci]
            origin = self.nodes[dofs[0]]
            pts = origin[None, :] + self.qp_local * np.asarray(self.h)
            fv = np.array([float(fun(*p)) for p in pts])
            b[dofs] += (self.qw * fv) @ self.qN
        return b


@dataclass
class PotentialField:
    """Solved discrete potential with its gradient cache and solve report."""

    mesh: SpatialMesh
    params: ElectrostaticParams
    coeffs: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    grad_gauss: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.grad_gauss is None:
            self.grad_gauss = self.mesh.gradients_at_gauss(self.coeffs)

    def eval(self, pts):
        return self.mesh.eval(self.coeffs, pts)

    def eval_grad(self, pts):
        return self.mesh.eval_grad(self.coeffs, pts)

    @classmethod
    def zero(cls, mesh, params):
        return cls(mesh, params, np.zeros(mesh.n_dofs), 0.0, 0, True)


# ---------------------------------------------------------------------------
# Lagrangian coupling quadrature


class CouplingQuadrature:
    """Quadrature for integrals of the form int_Omega q(x) S(chi(x)) dx.

    d=1: every reference element is split at the preimages of the spatial
    mesh nodes under the (monotone, det F > 0) deformation, then a Gauss rule
    is laid on each smooth piece; compositions with the piecewise-linear
    potential are integrated to near machine precision, which keeps the
    coupling load, energy and force a consistent exact-gradient triple.

    d=2: a fixed tensor Gauss rule with `subdiv` x `subdiv` subcells per
    reference element (quadrature error documented, O(h/subdiv)^2).
    """

    def __init__(self, state, mesh, subdiv=2, gauss=6):
        basis = state.basis
        self.state = state
        self.mesh = mesh
        d = basis.domain.dim
        if d == 1:
            self.points, self.weights = self._build_split_1d(state, mesh, gauss)
        else:
            from .basis import quadrature as ref_quadrature
            n_sub = tuple(n * subdiv for n in basis.n_el)
            rule = ref_quadrature(basis.domain, 2 * gauss - 1, n_elements=n_sub)
            self.points = rule.points
            self.weights = rule.weights
        self.B0 = basis.eval_many(self.points, 0)
        self.B1 = basis.eval_many(self.points, 1)
        self.B2 = basis.eval_many(self.points, 2)
        self.images = np.einsum("ia,pa->pi", state.chi, self.B0)
        self.F = np.einsum("ia,paj->pij", state.chi, self.B1)
        self.G = np.einsum("ia,pajk->pijk", state.chi, self.B2)

    def values(self, fun_or_array):
        """Field values at the coupling points (callable of coords or array)."""
        if callable(fun_or_array):
            return np.array([float(fun_or_array(*x)) for x in self.points])
        arr = np.asarray(fun_or_array, dtype=float)
        if arr.shape[0] != len(self.points):
            raise ValueError("value array does not match the coupling points")
        return arr

    def vector_values(self, fun_or_array):
        """Vector-field values at the coupling points, shape (P, d)."""
        if callable(fun_or_array):
            return np.array([np.asarray(fun_or_array(*x), dtype=float)
                             for x in self.points])
        arr = np.asarray(fun_or_array, dtype=float)
        if arr.shape[0] != len(self.points):
            raise ValueError("value array does not match the coupling points")
        return arr

    @staticmethod
    def _build_split_1d(state, mesh, gauss, tol=1e-14, maxit=60):
        """Per-element splitting at preimages of spatial nodes, vectorized.

        det F > 0 in d=1 makes the deformation strictly increasing on every
        reference element, so each spatial node inside the element's image has
        a unique preimage, found by safeguarded Newton/bisection on all nodes
        at once.
        """
        basis = state.basis
        (a0, _) = basis.domain.extent[0]
        h = basis.h[0]
        n = basis.n_el[0]
        edges = a0 + h * np.arange(n + 1)
        y_edges = np.einsum("a,pa->p", state.chi[0],
                            basis.eval_many(edges[:, None], 0))
        spatial_nodes = mesh.axes[0]
        lo_list, hi_list, tgt = [], [], []
        owner = []
        for e in range(n):
            yl, yr = y_edges[e], y_edges[e + 1]
            inside = spatial_nodes[(spatial_nodes > yl + 1e-13)
                                   & (spatial_nodes < yr - 1e-13)]
            for y in inside:
                lo_list.append(edges[e])
                hi_list.append(edges[e + 1])
                tgt.append(y)
                owner.append(e)
        cuts_per_el = [[edges[e], edges[e + 1]] for e in range(n)]
        if tgt:
            lo = np.array(lo_list)
            hi = np.array(hi_list)
            y = np.array(tgt)
            x = 0.5 * (lo + hi)
            chi0 = state.chi[0]
            scale = np.maximum(1.0, np.abs(y))
            for _ in range(maxit):
                val = np.einsum("a,pa->p", chi0, basis.eval_many(x[:, None], 0)) - y
                if np.max(np.abs(val) / scale) <= tol:
                    break
                hi = np.where(val > 0, x, hi)
                lo = np.where(val <= 0, x, lo)
                der = np.einsum("a,pa->p", chi0, basis.eval_many(x[:, None], 1)[:, :, 0])
                with np.errstate(divide="ignore", invalid="ignore"):
                    xn = x - val / der
                bad = ~np.isfinite(xn) | (xn <= lo) | (xn >= hi) | (der <= 0)
                x = np.where(bad, 0.5 * (lo + hi), xn)
            for xi, e in zip(x, owner):
                cuts_per_el[e].append(xi)
        xg, wg = np.polynomial.legendre.leggauss(gauss)
        pts, wts = [], []
        for cuts in cuts_per_el:
            cuts = np.sort(np.array(cuts))
            s0 = cuts[:-1]
            s1 = cuts[1:]
            keep = (s1 - s0) > 1e-14
            mid = 0.5 * (s0 + s1)[keep]
            half = 0.5 * (s1 - s0)[keep]
            pts.append((mid[:, None] + np.outer(half, xg)).ravel())
            wts.append(np.outer(half, wg).ravel())
        return np.concatenate(pts)[:, None], np.concatenate(wts)

    def load_vector(self, q_fun):
        """b_a = int_Omega q zeta_a(chi(x)) dx scattered onto the mesh dofs."""
        qv = self.values(q_fun)
        c, vals = self.mesh.shape_values(self.images)
        b = np.zeros(self.mesh.n_dofs)
        np.add.at(b, self.mesh.cell_dofs[c],
                  (self.weights * qv)[:, None] * vals)
        return b

    def coupling_energy(self, q_fun, pot):
        """int_Omega q (phi o chi) dx."""
        qv = self.values(q_fun)
        return float(np.sum(self.weights * qv * pot.eval(self.images)))


# ---------------------------------------------------------------------------
# nonlinear solve


def _energy_parts(mesh, params, coeffs):
    g = mesh.gradients_at_gauss(coeffs)          # (C, G, d)
    n2 = np.sum(g * g, axis=-1)
    norm = np.sqrt(n2)
    e0 = 0.5 * params.eps0 * n2
    ep = (params.eps1 / params.p_reg) * norm ** params.p_reg
    return float(np.einsum("g,cg->", mesh.qw, e0 + ep))


def _gradient(mesh, params, coeffs, b):
    g = mesh.gradients_at_gauss(coeffs)
    norm = np.sqrt(np.sum(g * g, axis=-1))
    coef = params.eps0 + params.eps1 * _safe_pow(norm, params.p_reg - 2.0)
    flux = coef[..., None] * g                    # (C, G, d)
    r = np.zeros(mesh.n_dofs)
    contrib = np.einsum("g,cgj,gkj->ck", mesh.qw, flux, mesh.qD)
    np.add.at(r, mesh.cell_dofs, contrib)
    return r - b


def _safe_pow(norm, expo):
    if expo == 0.0:
        return np.ones_like(norm)
    out = np.zeros_like(norm)
    nz = norm > 0
    out[nz] = norm[nz] ** expo
    if expo < 0:
        out[~nz] = 0.0  # multiplies a zero gradient downstream
    return out


def _coefficient_tensor(mesh, params, coeffs, frozen=False):
    g = mesh.gradients_at_gauss(coeffs)
    norm = np.sqrt(np.sum(g * g, axis=-1))
    a_iso = params.eps0 + params.eps1 * _safe_pow(norm, params.p_reg - 2.0)
    d = mesh.dim
    A = a_iso[..., None, None] * np.eye(d)
    if not frozen:
        a_dir = params.eps1 * (params.p_reg - 2.0) * _safe_pow(norm, params.p_reg - 4.0)
        A = A + a_dir[..., None, None] * np.einsum("cgi,cgj->cgij", g, g)
    return A


def _assemble_operator(mesh, A):
    """Stiffness with cellwise coefficient tensor A (C, G, d, d).

    Dense for 1D (small tridiagonal systems solve faster without sparse
    overhead), CSR otherwise.
    """
    if not hasattr(mesh, "_op_path"):
        mesh._op_path = np.einsum_path("g,cgij,gki,glj->ckl", mesh.qw, A,
                                       mesh.qD, mesh.qD, optimize="greedy")[0]
    loc = np.einsum("g,cgij,gki,glj->ckl", mesh.qw, A, mesh.qD, mesh.qD,
                    optimize=mesh._op_path)
    if mesh.dim == 1:
        H = np.zeros((mesh.n_dofs, mesh.n_dofs))
        np.add.at(H, (mesh.cell_dofs[:, :, None], mesh.cell_dofs[:, None, :]), loc)
        return H
    rows = np.repeat(mesh.cell_dofs, mesh.cell_dofs.shape[1], axis=1).ravel()
    cols = np.tile(mesh.cell_dofs, (1, mesh.cell_dofs.shape[1])).ravel()
    return sp.coo_matrix((loc.ravel(), (rows, cols)),
                         shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()


def _solve_linear(H, rhs):
    if isinstance(H, np.ndarray):
        return np.linalg.solve(H, rhs)
    return spla.spsolve(H.tocsc(), rhs)


def _hessian(mesh, params, coeffs):
    return _assemble_operator(mesh, _coefficient_tensor(mesh, params, coeffs))


def check_containment(state, params):
    """The deformed body must stay inside the half-box B_{R/2}."""
    pts, _ = state.basis.monitor_points()
    img = state.map_points(pts)
    if np.max(np.abs(img)) > 0.5 * params.R:
        raise BodyEscapeError(
            f"deformed body reaches |x| = {np.max(np.abs(img)):.3g} "
            f"> R/2 = {0.5 * params.R:.3g}; enlarge electrostatics.R")


def solve_potential(state, q_fun, q_ext_fun, params, mesh, warm=None,
                    coupling=None, extra_load=None):
    """Solve the truncated p-regularized Poisson problem.

    state/q_fun may be None for a charge-free body; q_ext_fun is the spatial
    external density (time-independent).  `warm` provides an initial guess,
    `extra_load` an additional dof load (used by the Legendre-dual shift).
    Returns (PotentialField, CouplingQuadrature-or-None).
    """
    b = np.zeros(mesh.n_dofs)
    if state is not None and q_fun is not None:
        check_containment(state, params)
        if coupling is None:
            coupling = CouplingQuadrature(state, mesh)
        b += coupling.load_vector(q_fun)
    if q_ext_fun is not None:
        b += mesh.load_vector(q_ext_fun)
    if extra_load is not None:
        b = b + extra_load
    free = mesh.free
    phi = np.zeros(mesh.n_dofs)
    if warm is not None:
        phi[:] = warm
        phi[mesh.boundary_mask] = 0.0
    scale = max(np.linalg.norm(b[free]), 1e-300)
    # roundoff floor of the assembled gradient grows with the dof count
    floor = 50.0 * mesh.n_dofs * np.finfo(float).eps
    tol = max(params.tol, floor) * scale + 1e-300
    obj = lambda c: _energy_parts(mesh, params, c) - float(b @ c)
    res = _gradient(mesh, params, phi, b)
    rnorm = np.linalg.norm(res[free])
    it = 0
    stagnation = 0
    while rnorm > tol and it < params.max_iter:
        H = _hessian(mesh, params, phi)[free][:, free]
        try:
            dphi = _solve_linear(H, -res[free])
        except Exception:
            dphi = None
        if dphi is None or not np.all(np.isfinite(dphi)):
            stagnation += 1
            dphi = -res[free]  # gradient direction fallback
        # accept on residual decrease (robust near machine precision);
        # fall back to an energy Armijo test for strongly nonlinear steps
        alpha = 1.0
        accepted = False
        J = None
        for _ in range(40):
            trial = phi.copy()
            trial[free] += alpha * dphi
            res_t = _gradient(mesh, params, trial, b)
            rnorm_t = np.linalg.norm(res_t[free])
            if rnorm_t <= (1.0 - 1e-4 * alpha) * rnorm:
                phi, res, rnorm = trial, res_t, rnorm_t
                accepted = True
                break
            if J is None:
                J = obj(phi)
            if np.isfinite(rnorm_t) and \
                    obj(trial) <= J + 1e-4 * alpha * float(res[free] @ dphi):
                phi, res, rnorm = trial, res_t, rnorm_t
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # Picard fallback: freeze the nonlinear coefficient
            Hp = _assemble_operator(
                mesh, _coefficient_tensor(mesh, params, phi, frozen=True))
            phi_new = np.zeros(mesh.n_dofs)
            phi_new[free] = _solve_linear(Hp[free][:, free], b[free])
            res_p = _gradient(mesh, params, phi_new, b)
            rnorm_p = np.linalg.norm(res_p[free])
            if rnorm_p < rnorm:
                phi, res, rnorm = phi_new, res_p, rnorm_p
            else:
                stagnation += 1
        it += 1
        if stagnation > 5:
            break
    converged = rnorm <= tol
    if not converged:
        raise NewtonDivergenceError(
            f"potential solve stalled: |residual| = {rnorm:.3e} > tol = {tol:.3e} "
            f"after {it} iterations")
    return PotentialField(mesh, params, phi, float(rnorm), it, True), coupling


def weak_residual(pot, b):
    """Residual vector of the discrete weak equation at the solved potential."""
    return _gradient(pot.mesh, pot.params, pot.coeffs, b)


def field_energy(pot):
    """int eps0/2 |grad phi|^2 + eps1/p |grad phi|^p over the box."""
    return _energy_parts(pot.mesh, pot.params, pot.coeffs)


def dual_value(pot):
    """int eps0/2 |grad phi|^2 + eps1/p' |grad phi|^p with p' = p/(p-1).

    Evaluated at the solution of the (possibly dual-shifted) weak equation;
    this is the Legendre-transform value of the negated electrostatic energy.
    """
    params = pot.params
    g = pot.grad_gauss
    n2 = np.sum(g * g, axis=-1)
    norm = np.sqrt(n2)
    pprime = params.p_reg / (params.p_reg - 1.0)
    e = 0.5 * params.eps0 * n2 + (params.eps1 / pprime) * norm ** params.p_reg
    return float(np.einsum("g,cg->", pot.mesh.qw, e))


def electrostatic_energy(state, pot, q_fun, params, coupling=None):
    """int_Omega q (phi o chi) dx - int eps0/2 |grad|^2 + eps1/p |grad|^p.

    The charge term uses the Lagrangian composition integral; zero-charge
    states contribute only the (negated) field energy.
    """
    cpl = 0.0
    if state is not None and q_fun is not None:
        if coupling is None:
            coupling = CouplingQuadrature(state, pot.mesh)
        cpl = coupling.coupling_energy(q_fun, pot)
    return cpl - field_energy(pot)


def maxwell_stress(pot, x, params=None):
    """Maxwell stress  e (x) d - e_density(e) I  at the spatial point x.

    e = -grad phi, d = (eps0 + eps1 |e|^{p-2}) e, and the energy density is
    eps0/2 |e|^2 + eps1/p |e|^p.
    """
    params = pot.params if params is None else params
    g = pot.eval_grad(np.atleast_2d(x))[0]
    e = -g
    norm = np.linalg.norm(e)
    coef = params.eps0 + (params.eps1 * norm ** (params.p_reg - 2.0) if norm > 0 else 0.0)
    dvec = coef * e
    dens = 0.5 * params.eps0 * norm**2 + params.eps1 / params.p_reg * norm ** params.p_reg
    return np.outer(e, dvec) - dens * np.eye(pot.mesh.dim)
