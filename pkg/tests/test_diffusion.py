import math

import numpy as np
import pytest

from elastocharge import diffusion as df
from elastocharge import dynamics as dyn
from elastocharge import electrostatics as es
from elastocharge.basis import ReferenceDomain, build_basis
from elastocharge.energy import (InfeasibleStateError, NonlocalKernel,
                                 NonlocalOperator, StoredEnergyModel,
                                 stored_energy)
from elastocharge.kinematics import DeformationState

from conftest import state_1d


@pytest.fixture
def setup(basis_1d, biot_model):
    op = NonlocalOperator(NonlocalKernel(gamma=0.75, strength=1e-3,
                                         delta=basis_1d.h[0], dim=1), basis_1d)
    system = dyn.System(basis=basis_1d, model=biot_model, nonlocal_op=op,
                        mass=dyn.mass_matrix(basis_1d, 1.0), det_floor=0.3)
    space = df.make_diffusion_space(basis_1d.domain, 16)
    return system, space


def closed_params(M0=0.5, alpha=0.0, mu_flat=0.0):
    return df.DiffusionParams(M0=np.array([[M0]]), alpha=alpha, mu_flat=mu_flat)


def test_params_validation():
    with pytest.raises(ValueError):
        df.DiffusionParams(M0=np.array([[0.0]]))
    with pytest.raises(ValueError):
        df.DiffusionParams(M0=np.array([[1.0]]), alpha=-1.0)


def test_chemical_potential_examples(biot_model):
    # m = m_e, det F = 1, phi = 0 -> mu = M_B m_e
    mu = df.chemical_potential(biot_model, np.eye(2), biot_model.m_e)
    assert mu == pytest.approx(biot_model.M_B * biot_model.m_e)
    # adding a composed potential shifts mu by it
    mu2 = df.chemical_potential(biot_model, np.eye(2), biot_model.m_e, 0.7)
    assert mu2 == pytest.approx(mu + 0.7)
    with pytest.raises(InfeasibleStateError):
        df.chemical_potential(biot_model, np.eye(2), 0.0)


def test_chemical_potential_fd(biot_model, rng):
    """d phi/dm by differences matches mu - phi o chi, rel err <= 1e-6."""
    for _ in range(20):
        F = np.eye(2) + 0.2 * rng.standard_normal((2, 2))
        if np.linalg.det(F) < 0.5:
            continue
        m = rng.uniform(0.3, 2.0)
        h = 1e-6
        fd = (stored_energy(biot_model, F, m + h)
              - stored_energy(biot_model, F, m - h)) / (2 * h)
        mu = df.chemical_potential(biot_model, F, m, 0.0)
        assert abs(fd - mu) / max(abs(mu), 1e-12) < 1e-6


def test_mobility_pullback_examples():
    M0 = np.array([[0.5, 0.1], [0.1, 0.7]])
    m = 0.8
    # d=2, F = lam I: the pullback is scale-invariant
    out = df.mobility_pullback(m * M0, 1.7 * np.eye(2))
    assert np.abs(out - m * M0).max() < 1e-12
    # F = I
    assert np.abs(df.mobility_pullback(m * M0, np.eye(2)) - m * M0).max() < 1e-14
    # d=1, F = lam: pullback = m M0 / lam
    out1 = df.mobility_pullback(np.array([[m * 0.5]]), np.array([[2.0]]))
    assert out1[0, 0] == pytest.approx(m * 0.5 / 2.0)
    # SPD is preserved
    rng = np.random.default_rng(7)
    F = np.eye(2) + 0.3 * rng.standard_normal((2, 2))
    if np.linalg.det(F) < 0:
        F = -F
    ev = np.linalg.eigvalsh(df.mobility_pullback(m * M0, F))
    assert ev.min() > 0


def test_stationary_equilibrium(setup, biot_model):
    """m0 = m_e, chi = id, mu_flat = equilibrium mu: the step is a fixed point."""
    system, space = setup
    st = DeformationState.identity(system.basis)
    mu_eq = biot_model.M_B * biot_model.m_e
    for alpha, mu_flat in ((0.0, 0.0), (1.0, mu_eq)):
        params = closed_params(alpha=alpha, mu_flat=mu_flat)
        m0 = np.full(space.n_dofs, biot_model.m_e)
        s = dyn.SimulationState(0.0, st, None,
                                df.DiffusionState(space, m0, np.zeros(space.n_dofs), params))
        nd, info = df.diffusion_step(system, s, 1e-2)
        assert np.abs(nd.m - m0).max() < 1e-12
        assert np.abs(nd.mu - mu_eq).max() < 1e-10


def test_closed_system_mass_conservation(setup):
    system, space = setup
    st = DeformationState.identity(system.basis)
    params = closed_params(alpha=0.0)
    x = space.nodes[:, 0]
    m0 = 1.0 + 0.3 * np.sin(np.pi * x)
    Mass = df._mass_matrix(space)
    ones = np.ones(space.n_dofs)
    s = dyn.SimulationState(0.0, st, None,
                            df.DiffusionState(space, m0, np.zeros(space.n_dofs), params))
    total0 = float(ones @ Mass @ m0)
    for _ in range(5):
        nd, _ = df.diffusion_step(system, s, 1e-2)
        s = dyn.SimulationState(s.t + 1e-2, st, None, nd)
    assert abs(float(ones @ Mass @ s.diff.m) - total0) < 1e-10


def test_robin_mass_bookkeeping(setup):
    """d/dt int m dx = -int_Gamma alpha (mu - mu_flat) dS, discretely exact."""
    system, space = setup
    st = DeformationState.identity(system.basis)
    params = closed_params(alpha=0.7, mu_flat=1.3)
    x = space.nodes[:, 0]
    m0 = 1.0 + 0.2 * np.sin(np.pi * x)
    s = dyn.SimulationState(0.0, st, None,
                            df.DiffusionState(space, m0, np.zeros(space.n_dofs), params))
    dt = 5e-3
    nd, _ = df.diffusion_step(system, s, dt)
    Mass = df._mass_matrix(space)
    ones = np.ones(space.n_dofs)
    dm = float(ones @ Mass @ (nd.m - m0)) / dt
    B = df.boundary_mass(space)
    ell = df.boundary_load(space, params.mu_flat, 0.0)
    flux = -params.alpha * (float(ones @ B @ nd.mu) - float(ones @ ell))
    assert abs(dm - flux) < 1e-10


def test_free_energy_monotone_relaxation(setup, biot_model):
    system, space = setup
    st = DeformationState.identity(system.basis)
    params = closed_params(alpha=0.0)
    x = space.nodes[:, 0]
    m0 = 1.0 + 0.3 * np.sin(np.pi * x)

    def free_energy(m_coeffs):
        kin = df._Kinematics(st, space, None)
        w = np.repeat(space.qw[None, :], space.n_cells, axis=0).ravel()
        mv = space.eval(m_coeffs, kin.points)
        return float(np.sum(w * stored_energy(biot_model, kin.F, mv)))

    s = dyn.SimulationState(0.0, st, None,
                            df.DiffusionState(space, m0, np.zeros(space.n_dofs), params))
    energies = [free_energy(m0)]
    for _ in range(10):
        nd, _ = df.diffusion_step(system, s, 2e-2)
        s = dyn.SimulationState(s.t + 2e-2, st, None, nd)
        energies.append(free_energy(nd.m))
    diffs = np.diff(energies)
    assert np.all(diffs <= 1e-12)
    assert energies[-1] < energies[0]


def test_dissipation_rate_examples(setup):
    system, space = setup
    st = DeformationState.identity(system.basis)
    # uniform mu, alpha = 0 -> 0
    params = closed_params(alpha=0.0)
    d0 = df.DiffusionState(space, np.ones(space.n_dofs),
                           np.full(space.n_dofs, 1.7), params)
    s = dyn.SimulationState(0.0, st, None, d0)
    assert df.dissipation_rate(system, s) == pytest.approx(0.0, abs=1e-12)
    # uniform mu = c with alpha > 0 -> alpha c^2 |Gamma| (two endpoints)
    params2 = closed_params(alpha=0.9)
    d1 = df.DiffusionState(space, np.ones(space.n_dofs),
                           np.full(space.n_dofs, 1.7), params2)
    s1 = dyn.SimulationState(0.0, st, None, d1)
    assert df.dissipation_rate(system, s1) == pytest.approx(0.9 * 1.7**2 * 2,
                                                            rel=1e-12)
    # random states: nonnegative (SPD mobility)
    rng = np.random.default_rng(5)
    for _ in range(5):
        dstate = df.DiffusionState(space, np.abs(rng.uniform(0.5, 2, space.n_dofs)),
                                   rng.standard_normal(space.n_dofs), params2)
        sr = dyn.SimulationState(0.0, st, None, dstate)
        assert df.dissipation_rate(system, sr) >= 0.0


def test_darcy_fick_split(biot_model, rng):
    M0 = np.array([[0.5, 0.1], [0.1, 0.7]])
    # uniform m, uniform det F, phi = 0 -> all components vanish
    d1, d2, d3 = df.darcy_fick_split(biot_model, M0, np.eye(2),
                                     np.zeros((2, 2, 2)), 0.8, np.zeros(2))
    assert np.abs(np.concatenate([d1, d2, d3])).max() == 0.0
    # grad m != 0 with uniform det F and phi = 0: only Fick (and the Darcy
    # part induced by grad m through the pressure) survive; drift vanishes
    g = np.array([0.3, -0.2])
    d1, d2, d3 = df.darcy_fick_split(biot_model, M0, np.eye(2),
                                     np.zeros((2, 2, 2)), 0.8, g)
    assert np.abs(d3).max() == 0.0
    assert np.abs(d2).max() > 0.0
    # beta = 0 isolates the concentration-gradient channels completely
    m_nopress = StoredEnergyModel(M_B=2.0, beta=0.0, m_e=1.0, kappa_c=0.5)
    G = 0.2 * rng.standard_normal((2, 2, 2))
    dd1, dd2, dd3 = df.darcy_fick_split(m_nopress, M0, np.eye(2), G, 0.8,
                                        np.zeros(2), np.zeros(2))
    assert np.abs(dd1).max() == 0.0 and np.abs(dd2).max() == 0.0
    # sum identity against the chain-rule total flux
    for _ in range(10):
        F = np.eye(2) + 0.25 * rng.standard_normal((2, 2))
        if np.linalg.det(F) < 0.4:
            continue
        G = 0.3 * rng.standard_normal((2, 2, 2))
        G = 0.5 * (G + G.transpose(0, 2, 1))
        m = rng.uniform(0.4, 1.5)
        gm = rng.standard_normal(2)
        gp = rng.standard_normal(2)
        parts = df.darcy_fick_split(biot_model, M0, F, G, m, gm, gp)
        tot = df.total_flux(biot_model, M0, F, G, m, gm, gp)
        assert np.abs(parts[0] + parts[1] + parts[2] - tot).max() < 1e-10
    with pytest.raises(InfeasibleStateError):
        df.darcy_fick_split(biot_model, M0, np.eye(2), np.zeros((2, 2, 2)),
                            0.0, np.zeros(2))


def relaxed_state(system, space, biot_model, alpha=0.0, steps=150, dt=5e-2):
    st = DeformationState.identity(system.basis)
    params = closed_params(alpha=alpha, mu_flat=biot_model.M_B * biot_model.m_e)
    x = space.nodes[:, 0]
    m0 = 1.0 + 0.3 * np.sin(np.pi * x)
    s = dyn.SimulationState(0.0, st, None,
                            df.DiffusionState(space, m0, np.zeros(space.n_dofs), params))
    for _ in range(steps):
        nd, _ = df.diffusion_step(system, s, dt)
        s = dyn.SimulationState(s.t + dt, st, None, nd)
    return s


def test_variational_inequality(setup, biot_model, rng):
    system, space = setup
    s = relaxed_state(system, space, biot_model)
    samples = df.sample_concentrations(rng, space, s.diff.m, 50)
    # m_tilde = m gives exactly zero
    worst_self, vals_self = df.variational_inequality_residual(
        system, s, [s.diff.m])
    assert worst_self == 0.0 and abs(vals_self[0]) < 1e-14
    worst, _ = df.variational_inequality_residual(system, s, samples)
    assert worst <= 1e-8
    # corrupted mu (+10%) is detected
    bad = s.diff.with_fields(mu=s.diff.mu * 1.1)
    worst_bad, _ = df.variational_inequality_residual(system, s, samples,
                                                      diff=bad)
    assert worst_bad > 1e-6


def test_variational_inequality_rejects_negative_samples(setup, biot_model):
    system, space = setup
    s = relaxed_state(system, space, biot_model, steps=5)
    with pytest.raises(ValueError):
        df.variational_inequality_residual(system, s, [-np.ones(space.n_dofs)])


def test_gradient_identity(setup, biot_model):
    """grad m reconstructed from grad mu through the chain rule (phi off).

    The residual is a discretization-level quantity: it must be small and
    shrink under refinement of the concentration space."""
    system, _ = setup
    st = state_1d(system.basis, lambda x: x + 0.05 * math.sin(math.pi * x),
                  lambda x: 1 + 0.05 * math.pi * math.cos(math.pi * x))
    residuals = []
    for cells in (16, 32, 64):
        space = df.make_diffusion_space(system.basis.domain, cells)
        params = closed_params(alpha=0.0)
        x = space.nodes[:, 0]
        m0 = 1.0 + 0.2 * np.sin(np.pi * x)
        s = dyn.SimulationState(0.0, st, None,
                                df.DiffusionState(space, m0,
                                                  np.zeros(space.n_dofs), params))
        nd, _ = df.diffusion_step(system, s, 1e-2)
        s = dyn.SimulationState(s.t, st, None, nd)
        residuals.append(df.gradient_identity_residual(system, s))
    assert residuals[0] < 0.05
    assert residuals[-1] < 6e-3
    assert residuals[0] > residuals[1] > residuals[2]


def test_positivity_guard_trips(setup, biot_model):
    """A hostile boundary drain drives m toward 0; the guard must activate
    (raise) instead of producing a negative concentration."""
    system, space = setup
    st = DeformationState.identity(system.basis)
    params = df.DiffusionParams(M0=np.array([[5.0]]), alpha=50.0, mu_flat=-80.0)
    m0 = np.full(space.n_dofs, 0.05)
    s = dyn.SimulationState(0.0, st, None,
                            df.DiffusionState(space, m0, np.zeros(space.n_dofs), params))
    with pytest.raises((InfeasibleStateError, es.NewtonDivergenceError)):
        for _ in range(400):
            nd, _ = df.diffusion_step(system, s, 0.5)
            s = dyn.SimulationState(s.t + 0.5, st, None, nd)
            assert np.min(nd.m) >= system.model.m_floor


def test_same_subspace_for_m_and_mu(setup):
    system, space = setup
    st = DeformationState.identity(system.basis)
    params = closed_params()
    d0 = df.DiffusionState(space, np.ones(space.n_dofs),
                           np.zeros(space.n_dofs), params)
    s = dyn.SimulationState(0.0, st, None, d0)
    nd, _ = df.diffusion_step(system, s, 1e-2)
    assert nd.m.shape == nd.mu.shape == (space.n_dofs,)
