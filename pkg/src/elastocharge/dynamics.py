"""Implicit-midpoint time integration of the coupled differential-algebraic
system: second-order mechanics against the Galerkin mass matrix, with the
electrostatic potential re-solved (holonomic constraint) inside every Newton
residual evaluation, electro forces assembled in the integration-by-parts
form that avoids grad(phi) o chi, and optional staggered diffusion.

The midpoint update for (chi, v) solves

    (2/dt^2) M (u - chi_n - dt v_n) = R((chi_n + u)/2, t + dt/2)

for u = chi_{n+1}, where R collects -mech_force + electro_force + loads;
v_{n+1} = 2 (u - chi_n)/dt - v_n.  The Newton matrix is dominated by the
(2/dt^2) M term, so the electro-coupling block can be omitted from the
Jacobian without hurting convergence.  A post-step determinant monitor
rejects the step and halves dt down to a floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .energy import InfeasibleStateError, mech_energy, mech_force, mech_stiffness
from .kinematics import DeformationState, det_monitor, div_inv_transpose
from . import electrostatics as es

__all__ = [
    "LoadSpec",
    "System",
    "SimulationState",
    "StepRejected",
    "mass_matrix",
    "kinetic_energy",
    "load_force",
    "electro_force",
    "electro_force_direct",
    "step",
    "residual",
    "solve_constraint",
    "static_equilibrium",
]


class StepRejected(RuntimeError):
    """Step failed at the minimum admissible dt (det floor or no convergence)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class LoadSpec:
    """External electromechanical loading.

    f(x.., t) -> (d,) body force; g(x.., t) -> (d,) boundary traction;
    q_ext(x..) spatial external charge (time-independent); mu_flat(x.., t)
    external electrochemical potential on the boundary; alpha boundary
    permeability.  Any entry may be None / 0.
    """

    f: object = None
    g: object = None
    q_ext: object = None
    mu_flat: object = None
    alpha: float = 0.0
    g_dot: object = None  # time derivative of g when available (ledger cross-check)


@dataclass
class System:
    """Everything time-independent the stepper needs."""

    basis: object
    model: object
    nonlocal_op: object
    mass: np.ndarray
    elec_params: object = None
    elec_mesh: object = None
    q_fun: object = None          # referential charge density (fixed-charge mode)
    grad_q_fun: object = None     # its gradient, for the IBP force
    charge_from_m: bool = False   # poroelastic mode: q = charge_factor * m
    charge_factor: float = 1.0
    det_floor: float = 1e-3
    newton_tol: float = 1e-12
    newton_max: int = 30
    dt_min_factor: float = 2.0**-10
    coupling_subdiv: int = 2

    @property
    def has_electro(self):
        return self.elec_params is not None and self.elec_mesh is not None

    def mass_apply(self, arr):
        """Block-diagonal mass action on a (d, N) coefficient array."""
        return arr @ self.mass

    def charge_values(self, coupling, diff_state=None):
        """Charge density values at the coupling points (or None if uncharged)."""
        if self.charge_from_m:
            if diff_state is None:
                return None
            m_vals = diff_state.space.eval(diff_state.m, coupling.points)
            return self.charge_factor * m_vals
        if self.q_fun is None:
            return None
        return coupling.values(self.q_fun)

    def charge_gradient_values(self, coupling, diff_state=None):
        if self.charge_from_m:
            if diff_state is None:
                return None
            gm = diff_state.space.eval_grad(diff_state.m, coupling.points)
            return self.charge_factor * gm
        if self.grad_q_fun is None:
            return None
        return coupling.vector_values(self.grad_q_fun)


@dataclass(frozen=True)
class SimulationState:
    """One accepted point of the trajectory (immutable snapshot)."""

    t: float
    mech: DeformationState
    pot: object = None
    diff: object = None
    info: dict = field(default_factory=dict)


def mass_matrix(basis, rho_fun):
    """Galerkin mass matrix of int rho zeta_a zeta_b dx (per component, SPD)."""
    w = basis.quad.weights
    if callable(rho_fun):
        rho = np.array([float(rho_fun(*x)) for x in basis.quad.points])
    else:
        rho = np.full(basis.quad.n, float(rho_fun))
    if np.min(rho) <= 0:
        raise ValueError("mass density must be strictly positive")
    return np.einsum("q,qa,qb->ab", w * rho, basis.B0, basis.B0)


def kinetic_energy(mass, chidot):
    return 0.5 * float(np.einsum("ia,ab,ib->", chidot, mass, chidot))


def load_force(basis, loads, t):
    """Generalized force of the body/traction loads at time t, shape (d, N)."""
    d = basis.domain.dim
    N = basis.dofs_per_component
    out = np.zeros((d, N))
    if loads is None:
        return out
    if loads.f is not None:
        fv = np.array([np.asarray(loads.f(*x, t), dtype=float)
                       for x in basis.quad.points])
        out += np.einsum("q,qi,qa->ia", basis.quad.weights, fv, basis.B0)
    if loads.g is not None:
        for face in basis.boundary:
            gv = np.array([np.asarray(loads.g(*x, t), dtype=float)
                           for x in face.points])
            out += np.einsum("q,qi,qa->ia", face.weights, gv, face.B0)
    return out


def boundary_traction_pairing(basis, loads, t, coeffs):
    """int_Gamma g(t) . field dS for a (d, N) coefficient field."""
    if loads is None or loads.g is None:
        return 0.0
    total = 0.0
    for face in basis.boundary:
        gv = np.array([np.asarray(loads.g(*x, t), dtype=float)
                       for x in face.points])
        vals = np.einsum("ia,qa->qi", coeffs, face.B0)
        total += float(np.einsum("q,qi,qi->", face.weights, gv, vals))
    return total


# ---------------------------------------------------------------------------
# electro forces


def electro_force(state, coupling, pot, q_vals, grad_q_vals):
    """Electrostatic generalized force in the integration-by-parts form.

    Equals -int_Omega q (grad phi o chi) . zeta dx without ever composing
    grad phi with the deformation:

        + int (phi o chi) F^{-T} : grad(q zeta) dx
        + int q (phi o chi) div(F^{-T}) . zeta dx
        - int_Gamma q (phi o chi) (F^{-T} n) . zeta dS

    (the boundary sign follows the integration-by-parts chain).
    """
    basis = state.basis
    d = basis.domain.dim
    N = basis.dofs_per_component
    phi_chi = pot.eval(coupling.images)
    FinvT = np.linalg.inv(coupling.F).transpose(0, 2, 1)
    Finv = np.linalg.inv(coupling.F)
    w = coupling.weights
    if grad_q_vals is None:
        grad_q_vals = np.zeros((len(w), d))
    # div(F^{-T})_j = -Finv_{ic} Finv_{dj} G_{cdi}
    divA = -np.einsum("pic,pdj,pcdi->pj", Finv, Finv, coupling.G)
    # volume term 1: (phi o chi) [F^{-T} (grad q N_a + q grad N_a)]_i
    t1 = np.einsum("p,p,pik,pk,pa->ia", w, phi_chi, FinvT, grad_q_vals, coupling.B0)
    t1 += np.einsum("p,p,p,pik,pak->ia", w, phi_chi, q_vals, FinvT, coupling.B1)
    # volume term 2: q (phi o chi) divA_i N_a
    t2 = np.einsum("p,p,p,pi,pa->ia", w, q_vals, phi_chi, divA, coupling.B0)
    # boundary term
    t3 = np.zeros((d, N))
    for face in basis.boundary:
        img = np.einsum("ia,qa->qi", state.chi, face.B0)
        Fb = np.einsum("ia,qaj->qij", state.chi, face.B1)
        FbinvT = np.linalg.inv(Fb).transpose(0, 2, 1)
        phib = pot.eval(img)
        qb = _face_charge(face, coupling)
        An = np.einsum("qij,j->qi", FbinvT, face.normal)
        t3 += np.einsum("q,q,q,qi,qa->ia", face.weights, qb, phib, An, face.B0)
    return t1 + t2 - t3


def _face_charge(face, coupling):
    """Charge density at the boundary quadrature points.

    The coupling object only knows interior values; re-evaluate from the
    source the caller used (callable or nodal field stored on the coupling).
    """
    src = getattr(coupling, "charge_source", None)
    if src is None:
        raise ValueError("coupling.charge_source must be set before electro_force")
    if callable(src):
        return np.array([float(src(*x)) for x in face.points])
    # nodal field on an H1 space over the reference domain
    space, vals, factor = src
    return factor * space.eval(vals, face.points)


def electro_force_direct(state, coupling, pot, q_vals):
    """-int q (grad phi o chi) . zeta dx with grad phi interpolated spatially.

    Reference implementation of the same force by spatial-gradient
    interpolation; used to cross-check the integration-by-parts form.
    """
    gphi = pot.eval_grad(coupling.images)
    return -np.einsum("p,p,pi,pa->ia", coupling.weights, q_vals, gphi, coupling.B0)


def solve_constraint(system, state, loads, diff_state=None, warm=None):
    """Solve the electrostatic holonomic constraint at the given deformation.

    Returns (pot, coupling) or (None, None) when electrostatics is disabled.
    """
    if not system.has_electro:
        return None, None
    coupling = es.CouplingQuadrature(state, system.elec_mesh,
                                     subdiv=system.coupling_subdiv)
    q_vals = system.charge_values(coupling, diff_state)
    if system.charge_from_m and diff_state is not None:
        coupling.charge_source = (diff_state.space, diff_state.m, system.charge_factor)
    else:
        coupling.charge_source = system.q_fun
    q_ext = loads.q_ext if loads is not None else None
    if q_vals is None and q_ext is None:
        pot = es.PotentialField.zero(system.elec_mesh, system.elec_params)
        return pot, coupling
    b = coupling.load_vector(q_vals) if q_vals is not None else None
    es.check_containment(state, system.elec_params)
    pot, _ = es.solve_potential(
        None, None, q_ext, system.elec_params, system.elec_mesh,
        warm=warm, extra_load=b)
    return pot, coupling


# ---------------------------------------------------------------------------
# the midpoint step


def _forces(system, state_mid, t_mid, loads, m_quad, diff_state, warm_phi):
    """R(q_mid) = -mech_force + electro_force + load force; also returns pot."""
    Fm = mech_force(system.model, system.nonlocal_op, state_mid, m_quad)
    R = -Fm + load_force(system.basis, loads, t_mid)
    pot = None
    coupling = None
    if system.has_electro:
        pot, coupling = solve_constraint(system, state_mid, loads, diff_state,
                                         warm=warm_phi)
        q_vals = system.charge_values(coupling, diff_state)
        if q_vals is not None:
            gq = system.charge_gradient_values(coupling, diff_state)
            R += electro_force(state_mid, coupling, pot, q_vals, gq)
    return R, pot, coupling


def _m_at_quad(system, diff_state):
    if diff_state is None or not system.model.has_biot:
        return None
    return diff_state.space.eval(diff_state.m, system.basis.quad.points)


def _attempt_step(system, state, dt, loads, diff_state):
    basis = system.basis
    chi0 = state.mech.chi
    v0 = state.mech.chidot
    t_mid = state.t + 0.5 * dt
    m_quad = _m_at_quad(system, diff_state)
    u = chi0 + dt * v0  # predictor
    mid = state.mech.with_coeffs(chi=0.5 * (chi0 + u))
    if np.min(mid.detF) <= 0:
        u = chi0.copy()
        mid = state.mech.with_coeffs(chi=u)
    warm_phi = state.pot.coeffs if state.pot is not None else None
    two_dt2 = 2.0 / dt**2
    mscale = float(np.mean(np.abs(np.diag(system.mass)))) * basis.dofs_per_component
    newton_its = 0
    R, pot_mid, _ = _forces(system, mid, t_mid, loads, m_quad, diff_state,
                            warm_phi)
    if pot_mid is not None:
        warm_phi = pot_mid.coeffs
    G = two_dt2 * system.mass_apply(u - chi0 - dt * v0) - R
    gnorm = np.linalg.norm(G)
    for it in range(system.newton_max):
        scale = two_dt2 * mscale * max(1.0, float(np.linalg.norm(u)))
        if gnorm <= system.newton_tol * scale:
            newton_its = it
            break
        K = mech_stiffness(system.model, system.nonlocal_op, mid, m_quad)
        d = basis.domain.dim
        N = basis.dofs_per_component
        J = 0.5 * K
        for i in range(d):
            J[i * N:(i + 1) * N, i * N:(i + 1) * N] += two_dt2 * system.mass
        du = np.linalg.solve(J, -G.ravel()).reshape(d, N)
        alpha = 1.0
        for _ in range(40):
            u_try = u + alpha * du
            mid_try = state.mech.with_coeffs(chi=0.5 * (chi0 + u_try))
            if np.min(mid_try.detF) > 0:
                R_t, pot_t, _ = _forces(system, mid_try, t_mid, loads, m_quad,
                                        diff_state, warm_phi)
                G_t = two_dt2 * system.mass_apply(u_try - chi0 - dt * v0) - R_t
                gnorm_t = np.linalg.norm(G_t)
                if gnorm_t <= (1.0 - 1e-4 * alpha) * gnorm:
                    u, mid, G, gnorm = u_try, mid_try, G_t, gnorm_t
                    if pot_t is not None:
                        warm_phi = pot_t.coeffs
                    break
            alpha *= 0.5
        else:
            raise es.NewtonDivergenceError(
                f"midpoint Newton line search failed at t = {state.t:.6g}")
    else:
        raise es.NewtonDivergenceError(
            f"midpoint Newton did not converge at t = {state.t:.6g}")
    v1 = 2.0 * (u - chi0) / dt - v0
    new_mech = state.mech.with_coeffs(chi=u, chidot=v1)
    report = det_monitor(new_mech, system.det_floor)
    if report.violated:
        return None, report
    pot_new, coupling_new = solve_constraint(system, new_mech, loads, diff_state,
                                             warm=warm_phi)
    v_mid = 0.5 * (v0 + v1)
    info = {
        "dt": dt, "newton_iterations": newton_its,
        "det_report": report,
        "dW_f": _body_work_increment(system.basis, loads, t_mid, v_mid, dt),
        "dW_g": dt * boundary_traction_pairing(system.basis, loads, t_mid, v_mid),
        "coupling": coupling_new,
    }
    if pot_new is not None and state.pot is not None and loads is not None \
            and loads.q_ext is not None:
        b_ext = system.elec_mesh.load_vector(loads.q_ext)
        info["dW_qext"] = float(b_ext @ (pot_new.coeffs - state.pot.coeffs))
    return SimulationState(state.t + dt, new_mech, pot_new, diff_state, info), report


def _body_work_increment(basis, loads, t_mid, v_mid, dt):
    if loads is None or loads.f is None:
        return 0.0
    fv = np.array([np.asarray(loads.f(*x, t_mid), dtype=float)
                   for x in basis.quad.points])
    vvals = np.einsum("ia,qa->qi", v_mid, basis.B0)
    return dt * float(np.einsum("q,qi,qi->", basis.quad.weights, fv, vvals))


def step(system, state, dt, loads=None, diffusion_stepper=None):
    """Advance one accepted step, halving dt on rejection down to the floor.

    `diffusion_stepper(system, state_new, dt)` is called after the mechanical
    substep (staggered coupling) and must return the new diffusion state and
    its ledger increments.  Returns the accepted SimulationState whose
    info["dt"] reports the dt actually taken.
    """
    dt_min = dt * system.dt_min_factor * 0.999
    dt_try = dt
    last_report = None
    while dt_try >= dt_min:
        try:
            result, report = _attempt_step(system, state, dt_try, loads,
                                           state.diff)
        except (es.NewtonDivergenceError, InfeasibleStateError):
            dt_try *= 0.5
            continue
        if result is None:
            last_report = report
            dt_try *= 0.5
            continue
        if diffusion_stepper is not None and state.diff is not None:
            try:
                new_diff, dinfo = diffusion_stepper(system, result, dt_try)
            except (es.NewtonDivergenceError, InfeasibleStateError):
                dt_try *= 0.5
                continue
            result = replace(result, diff=new_diff,
                             info={**result.info, **dinfo})
            if system.has_electro and system.charge_from_m:
                # the constraint must hold at the *new* concentration
                pot2, coupling2 = solve_constraint(
                    system, result.mech, loads, new_diff,
                    warm=result.pot.coeffs if result.pot is not None else None)
                result = replace(result, pot=pot2,
                                 info={**result.info, "coupling": coupling2})
        return result
    raise StepRejected(
        f"step at t = {state.t:.6g} rejected down to dt = {dt_try:.3g} "
        f"(floor {dt_min:.3g}); min det = "
        f"{last_report.min_det if last_report else float('nan'):.4g}",
        report=last_report)


def residual(system, prev_state, new_state, dt, loads=None):
    """Norms of the discrete force-balance and constraint residuals.

    Recomputes the midpoint residual at the accepted update and the weak
    electrostatic residual at the new state.
    """
    chi0, v0 = prev_state.mech.chi, prev_state.mech.chidot
    u = new_state.mech.chi
    t_mid = prev_state.t + 0.5 * dt
    m_quad = _m_at_quad(system, prev_state.diff)
    mid = prev_state.mech.with_coeffs(chi=0.5 * (chi0 + u))
    R, _, _ = _forces(system, mid, t_mid, loads, m_quad, prev_state.diff,
                      warm_phi=new_state.pot.coeffs if new_state.pot else None)
    G = (2.0 / dt**2) * system.mass_apply(u - chi0 - dt * v0) - R
    out = {"mechanical": float(np.linalg.norm(G))}
    if new_state.pot is not None:
        coupling = es.CouplingQuadrature(new_state.mech, system.elec_mesh,
                                         subdiv=system.coupling_subdiv)
        q_vals = system.charge_values(coupling, new_state.diff)
        b = coupling.load_vector(q_vals) if q_vals is not None else np.zeros(system.elec_mesh.n_dofs)
        if loads is not None and loads.q_ext is not None:
            b = b + system.elec_mesh.load_vector(loads.q_ext)
        r = es.weak_residual(new_state.pot, b)
        out["electrostatic"] = float(np.linalg.norm(r[system.elec_mesh.free]))
        out["electrostatic_reported"] = new_state.pot.residual_norm
    return out


# ---------------------------------------------------------------------------
# static equilibrium (energy minimization over the current basis)


def gauge_fixed_dofs(basis):
    """Dof indices pinned during static minimization (rigid-motion gauge).

    The value dof of every component at the first node kills translations;
    in d=2 the second component's value at the last node along x kills the
    rotation about the pinned node.  Pinning is a function-level condition,
    so the pinned affine subspaces remain nested across levels.
    """
    d = basis.domain.dim
    N = basis.dofs_per_component
    fixed = [i * N + 0 for i in range(d)]
    if d == 2:
        k = basis._dofs_per_node
        last_x_node = basis._node_id(basis.n_el[0], 0)
        fixed.append(1 * N + k * last_x_node)
    return np.array(sorted(fixed), dtype=int)


def static_equilibrium(system, state0, loads=None, tol=1e-10, max_iter=200,
                       pin=True):
    """Minimize the reduced total energy over the deformation coefficients.

    Damped Newton with an energy/feasibility line search and a Levenberg
    shift on indefiniteness.  The reduced energy is mech + solved-potential
    electrostatic energy minus the load potential; its exact gradient is
    -R from the dynamic force assembly.  Rigid motions are pinned by default
    (the pure-traction problem is only determined up to them).  Returns
    (DeformationState, energy, iterations).
    """
    basis = system.basis
    d = basis.domain.dim
    N = basis.dofs_per_component
    mech = state0.mech
    diff_state = state0.diff
    m_quad = _m_at_quad(system, diff_state)
    free = np.arange(d * N)
    if pin:
        free = np.setdiff1d(free, gauge_fixed_dofs(basis))

    def energy(st):
        try:
            E = mech_energy(system.model, system.nonlocal_op, st, m_quad)
            if not np.isfinite(E):
                return np.inf
            if system.has_electro:
                pot, coupling = solve_constraint(system, st, loads, diff_state)
                q_vals = system.charge_values(coupling, diff_state)
                cpl = coupling.coupling_energy(q_vals, pot) \
                    if q_vals is not None else 0.0
                E += cpl - es.field_energy(pot)
                if loads is not None and loads.q_ext is not None:
                    b_ext = system.elec_mesh.load_vector(loads.q_ext)
                    E -= float(b_ext @ pot.coeffs)
            if loads is not None:
                Fl = load_force(basis, loads, 0.0)
                E -= float(np.sum(Fl * st.chi))
            return E
        except (es.BodyEscapeError, es.NewtonDivergenceError,
                InfeasibleStateError):
            return np.inf

    E = energy(mech)
    if not np.isfinite(E):
        raise InfeasibleStateError("static solve started from an infeasible state")
    lam = 0.0
    it = 0
    for it in range(max_iter):
        R, _, _ = _forces(system, mech, 0.0, loads, m_quad, diff_state, None)
        g = (-R.ravel())[free]  # gradient of the reduced energy, gauge-fixed
        gnorm = np.linalg.norm(g)
        if gnorm <= tol * max(1.0, abs(E)):
            break
        K = mech_stiffness(system.model, system.nonlocal_op, mech, m_quad)
        K = K[np.ix_(free, free)]
        du = None
        for _ in range(40):
            try:
                du = np.linalg.solve(K + lam * np.eye(len(free)), -g)
            except np.linalg.LinAlgError:
                du = None
            if du is not None and float(du @ g) < 0:
                break
            lam = max(10.0 * lam, 1e-6 * np.abs(np.diag(K)).max())
        alpha = 1.0
        improved = False
        for _ in range(60):
            du_full = np.zeros(d * N)
            du_full[free] = alpha * du
            trial = mech.with_coeffs(chi=mech.chi + du_full.reshape(d, N))
            Et = energy(trial)
            if Et < E - 1e-4 * abs(float(alpha * du @ g)):
                mech, E = trial, Et
                improved = True
                lam *= 0.3
                break
            alpha *= 0.5
        if not improved:
            lam = max(10.0 * lam, 1e-8)
            if lam > 1e12:
                break
    return mech, E, it
