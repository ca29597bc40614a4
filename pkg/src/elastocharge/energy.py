"""Stored-energy models with determinant blow-up, the singular-kernel nonlocal
second-gradient quadratic form, and their first variations as Galerkin forces.

The elastic law is compressible neo-Hookean plus a quadratic volumetric term
and a power-law barrier in det F:

    phi_S(F) = mu_L/2 (|F|^2 - d) + kappa_L/2 (det F - 1)^2 + eps_b / (det F)^p_b

optionally extended by a Biot poroelastic part in the concentration m

    + 1/2 M_B (m - m_e beta (1 - det F))^2 + kappa_c m (ln(m/m_e) - 1)

with the entropy term equal to 0 at m = 0 and infeasible (+inf) for m < 0.
Infeasible evaluations (det F <= 0, m < 0) return +inf from energy routines
and raise InfeasibleStateError from derivative routines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .kinematics import cof_matrix

__all__ = [
    "InfeasibleStateError",
    "StoredEnergyModel",
    "NonlocalKernel",
    "NonlocalOperator",
    "stored_energy",
    "stress",
    "stored_hessian",
    "mech_force",
    "mech_energy",
    "mech_stiffness",
]


class InfeasibleStateError(ValueError):
    """det F <= 0, or m < floor where a derivative of the entropy is needed."""


@dataclass
class StoredEnergyModel:
    """Parameters of the elastic (+ optional Biot) stored energy density."""

    mu_L: float = 1.0
    kappa_L: float = 1.0
    eps_b: float = 0.25
    p_b: float = 4.0
    # Biot part; None disables it
    M_B: float = None
    beta: float = 0.0
    m_e: float = 1.0
    kappa_c: float = 1.0
    m_floor_factor: float = 1e-8

    def __post_init__(self):
        for name in ("mu_L", "kappa_L", "eps_b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.p_b <= 0:
            raise ValueError("barrier exponent p_b must be positive")
        if self.has_biot:
            if self.M_B <= 0 or self.kappa_c <= 0 or self.m_e <= 0:
                raise ValueError("Biot parameters M_B, kappa_c, m_e must be positive")
            if self.beta < 0:
                raise ValueError("Biot coefficient beta must be >= 0")

    @property
    def has_biot(self):
        return self.M_B is not None

    @property
    def m_floor(self):
        return self.m_floor_factor * self.m_e

    def check_barrier_exponent(self, d, gamma):
        """Warn (not enforce) when the barrier exponent is below the
        compactness threshold q > 2d/(2*gamma + 2 - d)."""
        denom = 2.0 * gamma + 2.0 - d
        if denom <= 0:
            warnings.warn("gamma too small for the determinant-floor theory "
                          f"(2*gamma + 2 - d = {denom} <= 0)")
            return False
        q_min = 2.0 * d / denom
        if self.p_b <= q_min:
            warnings.warn(
                f"barrier exponent p_b = {self.p_b} does not exceed the "
                f"determinant-floor threshold 2d/(2*gamma+2-d) = {q_min:.3g}")
            return False
        return True

    # -- pointwise evaluations (batched over leading axes) --------------------

    def phi_elastic(self, F):
        F = np.asarray(F, dtype=float)
        d = F.shape[-1]
        J = np.linalg.det(F)
        out = np.where(
            J > 0,
            0.5 * self.mu_L * (np.einsum("...ij,...ij->...", F, F) - d)
            + 0.5 * self.kappa_L * (J - 1.0) ** 2
            + self.eps_b * np.where(J > 0, J, 1.0) ** (-self.p_b),
            np.inf,
        )
        return out

    def phi_biot(self, J, m):
        """Biot + entropy terms as a function of det F and m (m >= 0)."""
        m = np.asarray(m, dtype=float)
        swell = m - self.m_e * self.beta * (1.0 - J)
        press = 0.5 * self.M_B * swell**2
        msafe = np.where(m > 0, m, 1.0)
        ent = np.where(m > 0,
                       self.kappa_c * m * (np.log(msafe / self.m_e) - 1.0),
                       0.0)
        return np.where(m >= 0, press + ent, np.inf)

    def pressure(self, J, m):
        """Diffusant pressure p = M_B (m - m_e beta (1 - det F))."""
        return self.M_B * (m - self.m_e * self.beta * (1.0 - J))

    def dphi_dm(self, J, m):
        m = np.asarray(m, dtype=float)
        if np.any(m < self.m_floor):
            raise InfeasibleStateError("concentration below floor in dphi_dm")
        return self.pressure(J, m) + self.kappa_c * np.log(m / self.m_e)

    def d2phi_dm2(self, J, m):
        m = np.asarray(m, dtype=float)
        if np.any(m < self.m_floor):
            raise InfeasibleStateError("concentration below floor in d2phi_dm2")
        return self.M_B + self.kappa_c / m

    def d2phi_dFdm(self, F, m):
        """Mixed second derivative: M_B m_e beta Cof F (independent of m)."""
        return self.M_B * self.m_e * self.beta * cof_matrix(F)


def stored_energy(model, F, m=None):
    """Energy density; +inf when det F <= 0 or (Biot active and m < 0)."""
    F = np.asarray(F, dtype=float)
    val = model.phi_elastic(F)
    if model.has_biot:
        if m is None:
            raise ValueError("Biot model requires a concentration argument")
        J = np.linalg.det(F)
        val = val + model.phi_biot(J, m)
    return val


def stress(model, F, m=None):
    """First Piola-type stress d phi / dF (batched over leading axes).

    For the Biot model this is phi_S'(F) + beta m_e p Cof F with the
    diffusant pressure p = M_B (m - m_e beta (1 - det F)).
    """
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise InfeasibleStateError("stress evaluated at det F <= 0")
    C = cof_matrix(F)
    coef = np.asarray(model.kappa_L * (J - 1.0)
                      - model.eps_b * model.p_b * J ** (-model.p_b - 1.0))
    P = model.mu_L * F + coef[..., None, None] * C
    if model.has_biot:
        if m is None:
            raise ValueError("Biot model requires a concentration argument")
        m = np.asarray(m, dtype=float)
        if np.any(m < 0):
            raise InfeasibleStateError("stress evaluated at m < 0")
        p = model.pressure(J, m)
        P = P + (model.beta * model.m_e * p)[..., None, None] * C
    return P


def _dcof_dF(d):
    """Constant tensor dCof(F)_{ab}/dF_{cd}; zero for d=1, permutation for d=2."""
    T = np.zeros((d, d, d, d))
    if d == 2:
        T[0, 0, 1, 1] = 1.0
        T[0, 1, 1, 0] = -1.0
        T[1, 0, 0, 1] = -1.0
        T[1, 1, 0, 0] = 1.0
    return T


def stored_hessian(model, F, m=None):
    """Second derivative d^2 phi / dF^2 as a (..., d,d,d,d) tensor."""
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise InfeasibleStateError("hessian evaluated at det F <= 0")
    C = cof_matrix(F)
    I4 = np.einsum("ac,bd->abcd", np.eye(d), np.eye(d))
    vol1 = model.kappa_L * (J - 1.0) - model.eps_b * model.p_b * J ** (-model.p_b - 1.0)
    vol2 = model.kappa_L + model.eps_b * model.p_b * (model.p_b + 1.0) * J ** (-model.p_b - 2.0)
    if model.has_biot:
        if m is None:
            raise ValueError("Biot model requires a concentration argument")
        p = model.pressure(J, np.asarray(m, dtype=float))
        vol1 = vol1 + model.beta * model.m_e * p
        vol2 = vol2 + model.M_B * (model.beta * model.m_e) ** 2
    CC = np.einsum("...ab,...cd->...abcd", C, C)
    H = (model.mu_L * I4
         + np.asarray(vol1)[..., None, None, None, None] * _dcof_dF(d)
         + np.asarray(vol2)[..., None, None, None, None] * CC)
    return H


# ---------------------------------------------------------------------------
# nonlocal second-gradient quadratic form


@dataclass
class NonlocalKernel:
    """Isotropic singular kernel k0 * min(|x-x'|^-(d+2 gamma), delta^-(d+2 gamma)).

    The kernel acts as a scalar times the identity on matching index pairs, so
    G : K : G = k(x, x') |G|^2.  gamma must exceed d/2 - 1; delta mollifies the
    diagonal singularity (default: one element diameter, set by the caller).
    """

    gamma: float
    strength: float
    delta: float
    dim: int

    def __post_init__(self):
        if self.gamma <= self.dim / 2.0 - 1.0:
            raise ValueError("kernel exponent gamma must exceed d/2 - 1")
        if self.delta <= 0:
            raise ValueError("mollification radius delta must be positive")
        if self.strength < 0:
            raise ValueError("kernel strength must be nonnegative")

    @property
    def exponent(self):
        return self.dim + 2.0 * self.gamma

    def value(self, r):
        """Scalar kernel at pair distance r (vectorized)."""
        r = np.asarray(r, dtype=float)
        s = self.exponent
        rc = np.maximum(r, self.delta)
        return self.strength * rc ** (-s)

    def pair_matrix(self, points, weights):
        """K[q,p] = w_q w_p k(|x_q - x_p|) and row sums kappa_q = sum_p w_p k."""
        diff = points[:, None, :] - points[None, :, :]
        r = np.sqrt(np.sum(diff**2, axis=-1))
        k = self.value(r)
        Wk = weights[:, None] * weights[None, :] * k
        kappa = k @ weights
        return Wk, kappa

    def admissibility_eps(self, x, xt, G):
        """A margin eps for which the two-sided kernel bounds hold on the
        given sample family (requires a positive minimum pair distance).

        The upper bound needs eps <= 1/k0; the lower bound needs eps <= k0
        where the kernel is uncapped, and on capped pairs (r < delta) it is
        made inactive through the additive slack by requiring
        eps^2 |G|^2 r^-s <= 1.
        """
        if self.strength == 0:
            return 0.0
        r = np.linalg.norm(np.asarray(x) - np.asarray(xt), axis=-1)
        if np.any(r <= 0):
            raise ValueError("sample family must have positive pair distances")
        g2 = np.sum(np.asarray(G) ** 2, axis=(-2, -1))
        s = self.exponent
        eps = min(self.strength, 1.0 / self.strength)
        capped = r < self.delta
        if np.any(capped):
            bound = np.sqrt(np.min(r[capped] ** s / np.maximum(g2[capped], 1e-300)))
            eps = min(eps, 0.999 * bound)
        return eps

    def bounds_hold(self, x, xt, G, eps):
        """Check both kernel inequalities on the samples with margin eps."""
        r = np.linalg.norm(np.asarray(x) - np.asarray(xt), axis=-1)
        g2 = np.sum(np.asarray(G) ** 2, axis=(-2, -1))
        s = self.exponent
        quad = self.value(r) * g2
        upper = quad <= g2 / (eps * r**s) * (1 + 1e-12) + 1e-300
        lower = np.maximum(eps * g2 / r**s - 1.0 / eps, 0.0) <= quad * (1 + 1e-12) + 1e-300
        return bool(np.all(upper) and np.all(lower))


class NonlocalOperator:
    """Assembled quadratic form of the nonlocal second-gradient energy.

    Per deformation component i the energy contributes 1/2 c_i^T A c_i with a
    symmetric positive-semidefinite matrix A shared by all components (the
    kernel is isotropic); the per-component generalized force is A c_i.
    """

    def __init__(self, kernel, basis):
        self.kernel = kernel
        self.basis = basis
        Q = basis.quad.n
        N = basis.dofs_per_component
        d = basis.domain.dim
        w = basis.quad.weights
        T = basis.B2.reshape(Q, N, d * d)
        diff = basis.quad.points[:, None, :] - basis.quad.points[None, :, :]
        self._k = kernel.value(np.sqrt(np.sum(diff**2, axis=-1)))  # (Q, Q)
        self._kappa = self._k @ w
        Wk = w[:, None] * w[None, :] * self._k
        self._Wk = Wk
        A = np.einsum("q,qam,qbm->ab", w * self._kappa, T, T)
        A -= np.einsum("qam,qp,pbm->ab", T, Wk, T, optimize=True)
        self.matrix = 0.5 * (A + A.T)

    def energy(self, state):
        """H(grad^2 chi) = 1/2 sum_i c_i^T A c_i (Fubini-factored form)."""
        return 0.5 * float(np.einsum("ia,ab,ib->", state.chi, self.matrix, state.chi))

    def energy_double_integral(self, state):
        """Direct double quadrature of the pairwise-difference form."""
        G = state.G  # (Q,d,d,d)
        Gf = G.reshape(G.shape[0], -1)
        sq = np.sum(Gf**2, axis=1)
        pair = sq[:, None] + sq[None, :] - 2.0 * (Gf @ Gf.T)
        return 0.25 * float(np.sum(self._Wk * pair))

    def force(self, state):
        """Per-component generalized force A c_i, shape (d, N)."""
        return state.chi @ self.matrix.T

    def hyperstress_table(self, state):
        """Hyperstress at all quadrature points, shape (Q, d, d, d)."""
        G = state.G
        Q, d = G.shape[0], G.shape[1]
        w = self.basis.quad.weights
        Gf = G.reshape(Q, d, d * d)
        avg = np.einsum("qp,p,pim->qim", self._k, w, Gf)
        out = self._kappa[:, None, None] * Gf - avg
        return out.reshape(Q, d, d, d)

    def hyperstress_at(self, state, x):
        """Hyperstress tensor at an arbitrary reference point x."""
        basis = self.basis
        B2 = basis.eval_shapes(x, 2)
        Gx = np.einsum("ia,ajk->ijk", state.chi, B2)
        diff = np.asarray(x, dtype=float)[None, :] - basis.quad.points
        r = np.linalg.norm(diff, axis=-1)
        k = self.kernel.value(r)
        w = basis.quad.weights
        kap = float(np.sum(w * k))
        avg = np.einsum("q,qijk->ijk", w * k, state.G)
        return kap * Gx - avg

    def energy_via_hyperstress(self, state):
        """1/2 sum_i int H_i : grad^2 chi_i (work-conjugate representation)."""
        H = self.hyperstress_table(state)
        return 0.5 * float(np.einsum("q,qijk,qijk->", self.basis.quad.weights, H, state.G))

    def pairing(self, state, zeta):
        """int H(grad^2 chi) ::: grad^2 zeta for a test field zeta (d, N)."""
        H = self.hyperstress_table(state)
        Z = np.einsum("ia,qajk->qijk", np.asarray(zeta), self.basis.B2)
        return float(np.einsum("q,qijk,qijk->", self.basis.quad.weights, H, Z))


# ---------------------------------------------------------------------------
# assembled mechanical forces


def mech_energy(model, nonlocal_op, state, m_at_quad=None):
    """Stored + nonlocal energy of the state (quadrature functional).

    Returns +inf for infeasible states (det F <= 0 or negative concentration).
    """
    w = state.basis.quad.weights
    phi = stored_energy(model, state.F, m_at_quad) if model.has_biot \
        else stored_energy(model, state.F)
    total = float(np.sum(w * phi)) if np.all(np.isfinite(phi)) else np.inf
    if not np.isfinite(total):
        return np.inf
    return total + nonlocal_op.energy(state)


def mech_force(model, nonlocal_op, state, m_at_quad=None):
    """Gradient of mech_energy w.r.t. the coefficients, shape (d, N)."""
    if np.any(state.detF <= 0):
        raise InfeasibleStateError("mech_force at det F <= 0")
    w = state.basis.quad.weights
    P = stress(model, state.F, m_at_quad)
    f = np.einsum("q,qij,qaj->ia", w, P, state.basis.B1)
    return f + nonlocal_op.force(state)


def mech_stiffness(model, nonlocal_op, state, m_at_quad=None):
    """Hessian of mech_energy w.r.t. flattened coefficients (dN, dN)."""
    basis = state.basis
    d = basis.domain.dim
    N = basis.dofs_per_component
    w = basis.quad.weights
    C4 = stored_hessian(model, state.F, m_at_quad)
    K = np.einsum("q,qikjl,qak,qbl->iajb", w, C4, basis.B1, basis.B1, optimize=True)
    K = K.reshape(d * N, d * N)
    for i in range(d):
        K[i * N:(i + 1) * N, i * N:(i + 1) * N] += nonlocal_op.matrix
    return K
