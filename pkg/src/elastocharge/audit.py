"""Audit mode: run the invariant suites on a scenario's initial state.

Each check returns (passed, value, threshold); the run is deterministic for
a given scenario seed.  Checks that do not apply to the scenario (no
charges, no diffusion, wrong dimension) are skipped and reported as such.
"""

from __future__ import annotations

import numpy as np

from . import diffusion as df
from . import dynamics as dyn
from . import electrostatics as es
from . import kinematics as kin
from .energy import mech_energy, mech_force, stored_energy, stress

__all__ = ["run_audit"]


def _check(value, threshold):
    return {"passed": bool(value <= threshold), "value": float(value),
            "threshold": float(threshold)}


def run_audit(scenario, out):
    bundle = scenario.build()
    system = bundle["system"]
    loads = bundle["loads"]
    rng = np.random.default_rng(scenario["seed"])
    from .runner import _initial_state
    state = _initial_state(bundle, loads)
    d = system.basis.domain.dim
    model = system.model
    checks = {}

    rep = kin.det_monitor(state.mech, system.det_floor)
    checks["det_monitor"] = {"passed": not rep.violated, "value": rep.min_det,
                             "threshold": system.det_floor}

    kernel = bundle["kernel"]
    if kernel.strength > 0:
        lo = np.array([a for a, _ in system.basis.domain.extent])
        hi = np.array([b for _, b in system.basis.domain.extent])
        n = 100_000
        xs = rng.uniform(lo, hi, (n, d))
        xt = rng.uniform(lo, hi, (n, d))
        keep = np.linalg.norm(xs - xt, axis=1) > 0
        G = rng.standard_normal((keep.sum(), d, d))
        eps = kernel.admissibility_eps(xs[keep], xt[keep], G)
        ok = kernel.bounds_hold(xs[keep], xt[keep], G, eps)
        checks["kernel_bounds"] = {"passed": bool(ok and eps > 0),
                                   "value": float(eps), "threshold": 0.0}

    # gradient consistency: stress against central differences of the density
    m_arg = model.m_e if model.has_biot else None
    errs = []
    for _ in range(20):
        F = np.eye(d) + 0.3 * rng.standard_normal((d, d))
        if np.linalg.det(F) <= 0.5:
            continue
        E = rng.standard_normal((d, d))
        h = 1e-5
        fd = (stored_energy(model, F + h * E, m_arg)
              - stored_energy(model, F - h * E, m_arg)) / (2 * h)
        an = float(np.sum(stress(model, F, m_arg) * E))
        errs.append(abs(fd - an) / max(abs(an), 1e-12))
    checks["stress_gradient"] = _check(max(errs), 1e-6)

    # assembled force against central differences of the mechanical energy,
    # at randomly perturbed feasible states (the scenario state itself may sit
    # at an equilibrium where both sides vanish)
    mech = state.mech
    m_quad = None
    if model.has_biot and state.diff is not None:
        m_quad = state.diff.space.eval(state.diff.m, system.basis.quad.points)
    errs = []
    for _ in range(5):
        for _try in range(20):
            pert = mech.with_coeffs(
                chi=mech.chi + 0.03 * rng.standard_normal(mech.chi.shape))
            if np.min(pert.detF) > 0.3:
                break
        f = mech_force(model, system.nonlocal_op, pert, m_quad)
        z = rng.standard_normal(mech.chi.shape)
        z /= np.linalg.norm(z)
        h = 1e-6
        Ep = mech_energy(model, system.nonlocal_op,
                         pert.with_coeffs(chi=pert.chi + h * z), m_quad)
        Em = mech_energy(model, system.nonlocal_op,
                         pert.with_coeffs(chi=pert.chi - h * z), m_quad)
        fd = (Ep - Em) / (2 * h)
        an = float(np.sum(f * z))
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    checks["mech_force_gradient"] = _check(max(errs), 1e-6)

    # nonlocal representation identity, at a perturbed state (the scenario
    # state may have zero second gradients, where both sides vanish)
    pert = mech.with_coeffs(
        chi=mech.chi + 0.05 * rng.standard_normal(mech.chi.shape))
    e1 = system.nonlocal_op.energy(pert)
    e2 = system.nonlocal_op.energy_double_integral(pert)
    checks["nonlocal_representations"] = _check(
        abs(e1 - e2) / max(abs(e1), abs(e2), 1e-14), 1e-10)

    if system.q_fun is not None and d == 1:
        total_ref = float(np.sum(system.basis.quad.weights
                                 * np.array([system.q_fun(*x)
                                             for x in system.basis.quad.points])))
        total_push = kin.pushforward_total(mech, system.q_fun, n_points=64)
        checks["charge_invariance"] = _check(abs(total_push - total_ref), 1e-6)

    if system.has_electro and state.pot is not None:
        coupling = state.info.get("coupling") or es.CouplingQuadrature(
            mech, system.elec_mesh, subdiv=system.coupling_subdiv)
        q_vals = system.charge_values(coupling, state.diff)
        mesh = system.elec_mesh
        b = coupling.load_vector(q_vals) if q_vals is not None \
            else np.zeros(mesh.n_dofs)
        if loads.q_ext is not None:
            b = b + mesh.load_vector(loads.q_ext)
        # solved-state test identity
        lhs = float(b @ state.pot.coeffs)
        g = state.pot.grad_gauss
        n2 = np.sum(g * g, axis=-1)
        p = system.elec_params.p_reg
        rhs = float(np.einsum("g,cg->", mesh.qw,
                              system.elec_params.eps0 * n2
                              + system.elec_params.eps1 * np.sqrt(n2) ** p))
        scale = max(abs(rhs), 1e-30)
        checks["electro_test_identity"] = _check(
            abs(lhs - rhs) / scale, 10 * system.elec_params.tol)
        # uniqueness from a second initialization
        warm = 3.0 * rng.standard_normal(mesh.n_dofs)
        pot2, _ = es.solve_potential(None, None, loads.q_ext, system.elec_params,
                                     mesh, warm=warm, extra_load=b if q_vals is not None else None)
        dg = state.pot.grad_gauss - pot2.grad_gauss
        h1 = float(np.sqrt(np.einsum("g,cgj,cgj->", mesh.qw, dg, dg)))
        checks["electro_uniqueness"] = _check(h1, 1e-8)
        if q_vals is not None:
            gq = system.charge_gradient_values(coupling, state.diff)
            fibp = dyn.electro_force(mech, coupling, state.pot, q_vals, gq)
            fdir = dyn.electro_force_direct(mech, coupling, state.pot, q_vals)
            checks["electro_force_forms"] = _check(
                float(np.max(np.abs(fibp - fdir)))
                / max(float(np.max(np.abs(fdir))), 1e-30), 1e-2)

    if state.diff is not None:
        new_diff, _ = df.diffusion_step(system, state,
                                        scenario.raw["time"]["dt"])
        stepped = dyn.SimulationState(state.t, state.mech, state.pot, new_diff)
        samples = df.sample_concentrations(rng, new_diff.space, new_diff.m, 50)
        worst, _ = df.variational_inequality_residual(system, stepped, samples)
        checks["variational_inequality"] = _check(worst, 1e-8)
        corrupted = new_diff.with_fields(mu=new_diff.mu * 1.1 + 0.01)
        worst_bad, _ = df.variational_inequality_residual(
            system, stepped, samples, diff=corrupted)
        checks["variational_inequality_negative_control"] = {
            "passed": bool(worst_bad > 0.0), "value": float(worst_bad),
            "threshold": 0.0}

    all_green = all(c["passed"] for c in checks.values())
    return {"checks": checks, "all_passed": all_green,
            "status": "ok" if all_green else "audit_failures"}
