"""Biot-type diffusion of a charged diffusant through the deforming solid.

The concentration m and the electrochemical potential mu live on the same
H1-conforming nodal space over the reference domain (a requirement of the
cross-testing structure of the energy balance).  One step solves, implicit
in time and staggered against the mechanics,

    (m - m_n)/dt = div( M(grad chi, m) grad mu ),
    mu = d phi/dm (grad chi, m) + phi o chi          (L2-projected),
    (M grad mu) . n + alpha mu = alpha mu_flat       on the boundary,

with the mobility pulled back through the deformation,
M = m (Cof F)^T M0 (Cof F) / det F.  Positivity of m is enforced by a floor
guard with step rejection rather than by the subdifferential inclusion; the
logarithmic entropy term repels the solution from zero for small enough dt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import InfeasibleStateError, stored_energy
from .electrostatics import NewtonDivergenceError, SpatialMesh
from .kinematics import cof_matrix

__all__ = [
    "DiffusionParams",
    "DiffusionState",
    "chemical_potential",
    "mobility_pullback",
    "diffusion_step",
    "dissipation_rate",
    "darcy_fick_split",
    "variational_inequality_residual",
    "sample_concentrations",
    "gradient_identity_residual",
    "make_diffusion_space",
]


@dataclass
class DiffusionParams:
    """Mobility and boundary-exchange data for the diffusion problem."""

    M0: np.ndarray              # constant SPD spatial mobility (d, d)
    alpha: float = 0.0          # boundary permeability
    mu_flat: object = 0.0       # external electrochemical potential (callable or const)
    newton_tol: float = 1e-11
    newton_max: int = 40

    def __post_init__(self):
        self.M0 = np.atleast_2d(np.asarray(self.M0, dtype=float))
        ev = np.linalg.eigvalsh(0.5 * (self.M0 + self.M0.T))
        if ev.min() <= 0:
            raise ValueError("mobility tensor M0 must be symmetric positive definite")
        if self.alpha < 0:
            raise ValueError("boundary permeability alpha must be >= 0")

    def mu_flat_values(self, points, t):
        if callable(self.mu_flat):
            return np.array([float(self.mu_flat(*x, t)) for x in points])
        return np.full(len(points), float(self.mu_flat))


@dataclass(frozen=True)
class DiffusionState:
    """Concentration / electrochemical-potential snapshot on the H1 space."""

    space: SpatialMesh
    m: np.ndarray
    mu: np.ndarray
    params: DiffusionParams

    def with_fields(self, m=None, mu=None):
        return DiffusionState(self.space, self.m if m is None else m,
                              self.mu if mu is None else mu, self.params)


def make_diffusion_space(domain, cells):
    """Nodal P1/Q1 space over the reference domain (no Dirichlet skin)."""
    return SpatialMesh(domain.extent, cells, dirichlet=False)


def chemical_potential(model, F, m, phi_at_chi=0.0):
    """mu = M_B (m - m_e beta (1 - det F)) + kappa_c ln(m/m_e) + phi o chi.

    Pointwise evaluation; m must stay above the positivity floor.
    """
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise InfeasibleStateError("chemical potential at det F <= 0")
    return model.dphi_dm(J, m) + phi_at_chi


def mobility_pullback(M_spatial, F):
    """(Cof F)^T M (Cof F) / det F -- the referential mobility.

    Pass the m-scaled spatial tensor m*M0 to realize M(x, m) = m M0; SPD
    whenever the input is SPD and det F > 0.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim == 2:
        J = np.linalg.det(F)
        if J == 0:
            raise InfeasibleStateError("mobility pullback at singular F")
        C = cof_matrix(F)
        return C.T @ np.atleast_2d(M_spatial) @ C / J
    J = np.linalg.det(F)
    if np.any(J == 0):
        raise InfeasibleStateError("mobility pullback at singular F")
    C = cof_matrix(F)
    return np.einsum("...ba,bc,...cd->...ad", C, np.atleast_2d(M_spatial), C) \
        / J[..., None, None]


# ---------------------------------------------------------------------------
# assembly helpers on the diffusion space


class _Kinematics:
    """Mechanical fields of the frozen deformation at the diffusion points.

    phi_scale multiplies the composed potential (the charge carried per unit
    concentration when the diffusant itself is the charge density).
    """

    def __init__(self, mech, space, pot=None, phi_scale=1.0):
        self.space = space
        cells = space.cell_dofs
        origin = space.nodes[cells[:, 0]]
        pts = (origin[:, None, :] + space.qp_local[None, :, :]
               * np.asarray(space.h)).reshape(-1, space.dim)
        self.points = pts                             # (C*G, d)
        basis = mech.basis
        B1 = basis.eval_many(pts, 1)
        self.F = np.einsum("ia,paj->pij", mech.chi, B1)
        self.detF = np.linalg.det(self.F)
        if np.any(self.detF <= 0):
            raise InfeasibleStateError("diffusion step at det F <= 0")
        self.Cof = cof_matrix(self.F)
        B0 = basis.eval_many(pts, 0)
        self.images = np.einsum("ia,pa->pi", mech.chi, B0)
        if pot is not None:
            self.phi_chi = phi_scale * pot.eval(self.images)
        else:
            self.phi_chi = np.zeros(len(pts))
        # pulled-back unit mobility (without the m factor)
        self.M0pull = None

    def mobility_unit(self, M0):
        if self.M0pull is None:
            self.M0pull = np.einsum("pba,bc,pcd->pad", self.Cof,
                                    np.atleast_2d(M0), self.Cof) \
                / self.detF[..., None, None]
        return self.M0pull


def _mass_matrix(space):
    loc = np.einsum("g,gk,gl->kl", space.qw, space.qN, space.qN)
    M = np.zeros((space.n_dofs, space.n_dofs))
    np.add.at(M, (space.cell_dofs[:, :, None], space.cell_dofs[:, None, :]),
              np.broadcast_to(loc, (space.n_cells, *loc.shape)))
    return M


def _boundary_faces(space):
    """Boundary node chains per face (for Robin mass/load assembly)."""
    if space.dim == 1:
        return [("left", np.array([0]), 1.0), ("right", np.array([space.n_dofs - 1]), 1.0)]
    nx, ny = space.cells
    nid = lambda i, j: i * (ny + 1) + j
    faces = [
        ("left", np.array([nid(0, j) for j in range(ny + 1)]), space.h[1]),
        ("right", np.array([nid(nx, j) for j in range(ny + 1)]), space.h[1]),
        ("bottom", np.array([nid(i, 0) for i in range(nx + 1)]), space.h[0]),
        ("top", np.array([nid(i, ny) for i in range(nx + 1)]), space.h[0]),
    ]
    return faces


def boundary_mass(space):
    """B[a,b] = int_Gamma N_a N_b dS (a point-evaluation pair in d=1)."""
    B = np.zeros((space.n_dofs, space.n_dofs))
    for _, chain, h in _boundary_faces(space):
        if space.dim == 1:
            B[chain[0], chain[0]] += 1.0
        else:
            for a, b in zip(chain[:-1], chain[1:]):
                B[a, a] += h / 3.0
                B[b, b] += h / 3.0
                B[a, b] += h / 6.0
                B[b, a] += h / 6.0
    return B


def boundary_load(space, fun_or_const, t=0.0):
    """l[a] = int_Gamma f N_a dS."""
    ell = np.zeros(space.n_dofs)
    for _, chain, h in _boundary_faces(space):
        if space.dim == 1:
            x = space.nodes[chain[0]]
            v = float(fun_or_const(*x, t)) if callable(fun_or_const) else float(fun_or_const)
            ell[chain[0]] += v
        else:
            for a, b in zip(chain[:-1], chain[1:]):
                va = float(fun_or_const(*space.nodes[a], t)) if callable(fun_or_const) \
                    else float(fun_or_const)
                vb = float(fun_or_const(*space.nodes[b], t)) if callable(fun_or_const) \
                    else float(fun_or_const)
                ell[a] += h * (va / 3.0 + vb / 6.0)
                ell[b] += h * (va / 6.0 + vb / 3.0)
    return ell


def _stiffness(space, mob):
    """K[a,b] = int grad N_a . mob grad N_b with mob given at Gauss points."""
    C, G = space.n_cells, space.n_gauss
    mobcg = mob.reshape(C, G, space.dim, space.dim)
    loc = np.einsum("g,cgij,gki,glj->ckl", space.qw, mobcg, space.qD, space.qD,
                    optimize=True)
    K = np.zeros((space.n_dofs, space.n_dofs))
    np.add.at(K, (space.cell_dofs[:, :, None], space.cell_dofs[:, None, :]), loc)
    return K


def _project_mu(space, mass_inv, kin, model, m_coeffs):
    """L2 projection of dphi/dm(F, m) + phi o chi onto the space."""
    m_vals = space.eval(m_coeffs, kin.points)
    if np.any(m_vals < model.m_floor):
        raise InfeasibleStateError("concentration fell below the positivity floor")
    vals = model.dphi_dm(kin.detF, m_vals) + kin.phi_chi
    rhs = np.zeros(space.n_dofs)
    C, G = space.n_cells, space.n_gauss
    contrib = np.einsum("g,cg,gk->ck", space.qw, vals.reshape(C, G), space.qN)
    np.add.at(rhs, space.cell_dofs, contrib)
    return mass_inv @ rhs


def diffusion_step(system, sim_state, dt, t=None):
    """One implicit-Euler diffusion update at the frozen mechanical state.

    Returns (new DiffusionState, ledger increments).  Raises
    InfeasibleStateError when the positivity guard trips and
    NewtonDivergenceError when the nonlinear solve stalls; the dynamics
    stepper converts either into a dt-halved retry.
    """
    diff = sim_state.diff
    space = diff.space
    params = diff.params
    model = system.model
    t_new = sim_state.t if t is None else t
    phi_scale = system.charge_factor if system.charge_from_m else 1.0
    kin = _Kinematics(sim_state.mech, space, sim_state.pot, phi_scale)
    Mass = _mass_matrix(space)
    mass_inv = np.linalg.inv(Mass)
    B = boundary_mass(space)
    ell = boundary_load(space, params.mu_flat, t_new) if params.alpha else np.zeros(space.n_dofs)
    M0pull = kin.mobility_unit(params.M0)
    m_n = diff.m

    def mu_of(m):
        return _project_mu(space, mass_inv, kin, model, m)

    def residual(m):
        mu = mu_of(m)
        m_vals = space.eval(m, kin.points)
        mob = m_vals[:, None, None] * M0pull
        K = _stiffness(space, mob)
        return Mass @ (m - m_n) / dt + K @ mu + params.alpha * (B @ mu - ell), mu

    m = m_n.copy()
    r, mu = residual(m)
    scale = max(np.linalg.norm(Mass @ m_n) / dt, 1.0)
    n = space.n_dofs
    for it in range(params.newton_max):
        rnorm = np.linalg.norm(r)
        if rnorm <= params.newton_tol * scale:
            break
        # finite-difference Jacobian (deterministic; the space is small)
        J = np.empty((n, n))
        h = 1e-7 * max(1.0, float(np.max(np.abs(m))))
        for a in range(n):
            mp = m.copy()
            mp[a] += h
            try:
                rp, _ = residual(mp)
            except InfeasibleStateError:
                mp[a] -= 2 * h
                rp, _ = residual(mp)
                rp = 2 * r - rp
            J[:, a] = (rp - r) / h
        dm = np.linalg.solve(J, -r)
        alpha = 1.0
        for _ in range(40):
            m_try = m + alpha * dm
            if np.min(m_try) > model.m_floor:
                try:
                    r_try, mu_try = residual(m_try)
                except InfeasibleStateError:
                    alpha *= 0.5
                    continue
                if np.linalg.norm(r_try) <= (1.0 - 1e-4 * alpha) * rnorm:
                    m, r, mu = m_try, r_try, mu_try
                    break
            alpha *= 0.5
        else:
            raise InfeasibleStateError(
                "diffusion positivity guard: no feasible Newton step")
    else:
        raise NewtonDivergenceError("diffusion Newton did not converge")
    new_diff = diff.with_fields(m=m, mu=mu)
    rate = dissipation_rate(system, sim_state, new_diff)
    dW_mu = dt * params.alpha * float(mu @ ell)
    return new_diff, {"dD": dt * rate, "dW_mu": dW_mu,
                      "diffusion_newton_iterations": it}


def dissipation_rate(system, sim_state, diff=None):
    """2R = int (grad mu)^T M grad mu dx + int_Gamma alpha mu^2 dS  (>= 0)."""
    diff = sim_state.diff if diff is None else diff
    space = diff.space
    kin = _Kinematics(sim_state.mech, space, None)
    M0pull = kin.mobility_unit(diff.params.M0)
    m_vals = space.eval(diff.m, kin.points)
    mob = m_vals[:, None, None] * M0pull
    K = _stiffness(space, mob)
    B = boundary_mass(space)
    return float(diff.mu @ K @ diff.mu + diff.params.alpha * (diff.mu @ B @ diff.mu))


def darcy_fick_split(model, M0, F, G, m, grad_m, grad_phi_chi=None):
    """Darcy, Fick and drift flux components at a point.

    darcy = -m M0(F) grad p, fick = -kappa_c M0(F) grad m,
    drift = -m M0(F) grad(phi o chi); their sum is -M(F, m) grad mu by the
    chain rule through mu = p + kappa_c ln(m/m_e) + phi o chi.
    """
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    if m <= 0:
        raise InfeasibleStateError("flux split requires m > 0")
    M0pull = mobility_pullback(M0, F)
    C = cof_matrix(F)
    grad_detF = np.einsum("ab,abk->k", C, np.asarray(G))
    grad_p = model.M_B * (np.asarray(grad_m)
                          + model.m_e * model.beta * grad_detF)
    darcy = -m * M0pull @ grad_p
    fick = -model.kappa_c * M0pull @ np.asarray(grad_m)
    if grad_phi_chi is None:
        grad_phi_chi = np.zeros(d)
    drift = -m * M0pull @ np.asarray(grad_phi_chi)
    return darcy, fick, drift


def total_flux(model, M0, F, G, m, grad_m, grad_phi_chi=None):
    """-M(F, m) grad mu evaluated through the chain rule (cross-check path)."""
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    M0pull = mobility_pullback(M0, F)
    C = cof_matrix(F)
    grad_detF = np.einsum("ab,abk->k", C, np.asarray(G))
    grad_mu = model.M_B * (np.asarray(grad_m) + model.m_e * model.beta * grad_detF) \
        + model.kappa_c * np.asarray(grad_m) / m
    if grad_phi_chi is not None:
        grad_mu = grad_mu + np.asarray(grad_phi_chi)
    return -(m * M0pull) @ grad_mu


def variational_inequality_residual(system, sim_state, m_tilde_list, diff=None):
    """Worst positive part of the convexity inequality over sampled fields.

    For each admissible m_tilde >= 0 evaluates

        int [ phi(F, m) - phi(F, m_tilde) + (mu - phi o chi)(m_tilde - m) ] dx

    which is <= 0 when mu is consistent with the convex stored energy; the
    max over samples (clipped at 0 from below) is returned together with the
    per-sample values.
    """
    diff = sim_state.diff if diff is None else diff
    space = diff.space
    model = system.model
    phi_scale = system.charge_factor if system.charge_from_m else 1.0
    kin = _Kinematics(sim_state.mech, space, sim_state.pot, phi_scale)
    w = np.repeat(space.qw[None, :], space.n_cells, axis=0).ravel()
    m_vals = space.eval(diff.m, kin.points)
    mu_vals = space.eval(diff.mu, kin.points)
    g_vals = mu_vals - kin.phi_chi
    phi_m = stored_energy(model, kin.F, m_vals)
    worst = -np.inf
    values = []
    for mt in m_tilde_list:
        mt_vals = space.eval(np.asarray(mt, dtype=float), kin.points) \
            if np.ndim(mt) == 1 and len(mt) == space.n_dofs else np.asarray(mt, dtype=float)
        if np.any(mt_vals < 0):
            raise ValueError("sampled concentrations must be nonnegative")
        phi_t = stored_energy(model, kin.F, mt_vals)
        val = float(np.sum(w * (phi_m - phi_t + g_vals * (mt_vals - m_vals))))
        values.append(val)
        worst = max(worst, val)
    return max(worst, 0.0), np.array(values)


def sample_concentrations(rng, space, base, n=50):
    """Admissible perturbation family around the nodal field `base`.

    Mixes multiplicative/additive perturbations at several scales with
    independent smooth nonnegative fields; all samples are clipped at 0.
    """
    out = []
    scales = np.logspace(-4, -1, 8)
    x = space.nodes[:, 0]
    span = x.max() - x.min()
    for k in range(n):
        s = scales[k % len(scales)]
        kind = k % 3
        if kind == 0:
            f = base * (1.0 + s * rng.standard_normal(len(base)))
        elif kind == 1:
            f = base + s * np.mean(np.abs(base) + 1e-12) * rng.standard_normal(len(base))
        else:
            a = rng.uniform(0.2, 2.0)
            b2 = rng.uniform(0.0, 2.0)
            freq = rng.integers(1, 4)
            f = a + b2 * np.sin(freq * np.pi * (x - x.min()) / span) ** 2
        out.append(np.maximum(f, 0.0))
    return out


def gradient_identity_residual(system, sim_state, diff=None):
    """Residual of grad m = (grad mu - d2phi/dFdm ::: grad^2 chi - grad(phi o chi)) / d2phi/dm2.

    Checked at the interior Gauss points of the diffusion space; returns the
    max norm of the difference relative to the max norm of grad m.  The
    potential term vanishes when electrostatics is off.
    """
    diff = sim_state.diff if diff is None else diff
    space = diff.space
    model = system.model
    phi_scale = system.charge_factor if system.charge_from_m else 1.0
    kin = _Kinematics(sim_state.mech, space, sim_state.pot, phi_scale)
    basis = sim_state.mech.basis
    B2 = basis.eval_many(kin.points, 2)
    Gq = np.einsum("ia,pajk->pijk", sim_state.mech.chi, B2)
    m_vals = space.eval(diff.m, kin.points)
    grad_m = space.eval_grad(diff.m, kin.points)
    grad_mu = space.eval_grad(diff.mu, kin.points)
    mixed = model.d2phi_dFdm(kin.F, m_vals)
    mix_term = np.einsum("pab,pabk->pk", mixed, Gq)
    if sim_state.pot is not None:
        gphi = phi_scale * sim_state.pot.eval_grad(kin.images)
        grad_phi_chi = np.einsum("pji,pj->pi", kin.F, gphi)
    else:
        grad_phi_chi = np.zeros_like(grad_m)
    d2mm = model.d2phi_dm2(kin.detF, m_vals)
    rec = (grad_mu - mix_term - grad_phi_chi) / d2mm[:, None]
    err = np.linalg.norm(rec - grad_m, axis=1)
    scale = max(np.max(np.linalg.norm(grad_m, axis=1)), 1e-12)
    return float(np.max(err)) / scale
