import numpy as np
import pytest
import sympy

from elastocharge import energy as en
from elastocharge.kinematics import DeformationState

from conftest import state_1d


def random_feasible_F(rng, d, tries=50):
    for _ in range(tries):
        F = np.eye(d) + 0.3 * rng.standard_normal((d, d))
        if np.linalg.det(F) > 0.5:
            return F
    raise RuntimeError("no feasible sample")


def test_stored_energy_identity(model):
    # neo-Hookean and volumetric terms vanish at the identity
    assert en.stored_energy(model, np.eye(2)) == pytest.approx(model.eps_b)
    assert en.stored_energy(model, np.eye(1)) == pytest.approx(model.eps_b)


def test_stored_energy_infeasible(model, biot_model):
    F = np.array([[-0.1]])
    assert en.stored_energy(model, F) == np.inf  # det F <= 0 encodes +infinity
    assert en.stored_energy(biot_model, np.eye(2), -0.5) == np.inf
    with pytest.raises(en.InfeasibleStateError):
        en.stress(model, np.array([[0.0]]))


def test_biot_value_at_equilibrium_concentration(biot_model):
    # F = I, m = m_e: pressure term 1/2 M_B m_e^2, entropy term -kappa_c m_e
    base = en.stored_energy(en.StoredEnergyModel(), np.eye(2))
    val = en.stored_energy(biot_model, np.eye(2), biot_model.m_e)
    expected = 0.5 * biot_model.M_B * biot_model.m_e**2 \
        - biot_model.kappa_c * biot_model.m_e
    assert val - base == pytest.approx(expected, rel=1e-12)
    # m = 0 is admissible with zero entropy term
    val0 = en.stored_energy(biot_model, np.eye(2), 0.0)
    assert np.isfinite(val0)


def test_stress_at_identity(model):
    # phi_S'(I) = (mu_L - eps_b p_b) I for this law; the default model is
    # calibrated stress-free (eps_b = mu_L/p_b)
    P = en.stress(model, np.eye(2))
    assert np.abs(P).max() < 1e-14
    m2 = en.StoredEnergyModel(mu_L=1.0, eps_b=0.1, p_b=4.0)
    P2 = en.stress(m2, np.eye(2))
    assert np.allclose(P2, (m2.mu_L - m2.eps_b * m2.p_b) * np.eye(2))


def test_stress_fd_oracle(model, biot_model, rng):
    """Central differences of the density match stress:E, rel err <= 1e-6."""
    for mdl, m_arg in ((model, None), (biot_model, 0.8)):
        worst = 0.0
        n = 0
        while n < 20:
            F = random_feasible_F(rng, 2)
            E = 0.3 * rng.standard_normal((2, 2))
            h = 1e-5
            fd = (en.stored_energy(mdl, F + h * E, m_arg)
                  - en.stored_energy(mdl, F - h * E, m_arg)) / (2 * h)
            an = float(np.sum(en.stress(mdl, F, m_arg) * E))
            worst = max(worst, abs(fd - an) / max(abs(an), 1e-10))
            n += 1
        assert worst <= 1e-6


def test_stress_1d_symbolic_oracle(model):
    Fs = sympy.Symbol("F", positive=True)
    phi = (model.mu_L / 2 * (Fs**2 - 1)
           + model.kappa_L / 2 * (Fs - 1) ** 2 + model.eps_b * Fs**-model.p_b)
    dphi = sympy.lambdify(Fs, sympy.diff(phi, Fs))
    for Fv in (2.0, 0.7, 1.3):
        P = en.stress(model, np.array([[Fv]]))
        assert P[0, 0] == pytest.approx(dphi(Fv), rel=1e-12)


def test_hessian_fd(model, biot_model, rng):
    for mdl, m_arg in ((model, None), (biot_model, 1.1)):
        for _ in range(5):
            F = random_feasible_F(rng, 2)
            E = 0.2 * rng.standard_normal((2, 2))
            h = 1e-5
            fd = (np.sum(en.stress(mdl, F + h * E, m_arg) * E)
                  - np.sum(en.stress(mdl, F - h * E, m_arg) * E)) / (2 * h)
            an = float(np.einsum("ijkl,ij,kl->", en.stored_hessian(mdl, F, m_arg),
                                 E, E))
            assert abs(fd - an) / max(abs(an), 1e-10) < 1e-6


def test_biot_mixed_derivatives(biot_model, rng):
    F = random_feasible_F(rng, 2)
    J = np.linalg.det(F)
    m = 0.9
    h = 1e-6
    fd = (en.stored_energy(biot_model, F, m + h)
          - en.stored_energy(biot_model, F, m - h)) / (2 * h)
    assert abs(fd - biot_model.dphi_dm(J, m)) < 1e-6 * max(1, abs(fd))
    fd2 = (biot_model.dphi_dm(J, m + h) - biot_model.dphi_dm(J, m - h)) / (2 * h)
    assert abs(fd2 - biot_model.d2phi_dm2(J, m)) < 1e-5 * abs(fd2)
    E = rng.standard_normal((2, 2))
    fdm = (biot_model.dphi_dm(np.linalg.det(F + h * E), m)
           - biot_model.dphi_dm(np.linalg.det(F - h * E), m)) / (2 * h)
    an = float(np.sum(biot_model.d2phi_dFdm(F, m) * E))
    assert abs(fdm - an) < 1e-5 * max(1.0, abs(an))


def test_barrier_exponent_warning():
    # threshold for d=1, gamma=0.75 is 2d/(2 gamma + 2 - d) = 0.8
    mdl = en.StoredEnergyModel(p_b=0.5)
    with pytest.warns(UserWarning):
        assert not mdl.check_barrier_exponent(1, 0.75)
    assert en.StoredEnergyModel(p_b=4.0).check_barrier_exponent(1, 0.75)


def test_nonnegativity_of_elastic_density(model):
    # ass-style sign requirement: the elastic density is nonnegative on a
    # wide feasible sample (no additive normalization needed for defaults)
    Fs = np.linspace(0.15, 4.0, 200)
    vals = [en.stored_energy(model, np.array([[f]])) for f in Fs]
    assert min(vals) >= 0.0
    rng = np.random.default_rng(3)
    for _ in range(200):
        F = np.eye(2) + 0.6 * rng.standard_normal((2, 2))
        v = en.stored_energy(model, F)
        assert v >= 0.0 or v == np.inf


# ---------------------------------------------------------------------------
# nonlocal kernel and quadratic form


def test_kernel_parameter_validation(basis_1d):
    with pytest.raises(ValueError):
        en.NonlocalKernel(gamma=-0.6, strength=1.0, delta=0.1, dim=1)
    with pytest.raises(ValueError):
        en.NonlocalKernel(gamma=0.75, strength=1.0, delta=0.0, dim=1)
    # gamma = 0 violates gamma > d/2 - 1 = 0 for d = 2
    with pytest.raises(ValueError):
        en.NonlocalKernel(gamma=0.0, strength=1.0, delta=0.1, dim=2)


def test_kernel_bounds_on_samples(rng):
    kernel = en.NonlocalKernel(gamma=0.75, strength=0.01, delta=0.1, dim=1)
    n = 100_000
    xs = rng.uniform(0, 1, (n, 1))
    xt = rng.uniform(0, 1, (n, 1))
    keep = np.linalg.norm(xs - xt, axis=1) > 0
    G = rng.standard_normal((int(keep.sum()), 1, 1))
    eps = kernel.admissibility_eps(xs[keep], xt[keep], G)
    assert eps > 0
    assert kernel.bounds_hold(xs[keep], xt[keep], G, eps)


def test_kernel_symmetry(nonlocal_1d):
    assert np.abs(nonlocal_1d._k - nonlocal_1d._k.T).max() == 0.0


def test_nonlocal_zero_for_constant_second_gradient(basis_1d, nonlocal_1d):
    st = state_1d(basis_1d, lambda x: 2 * x + 0.3, lambda x: 2.0)
    assert abs(nonlocal_1d.energy(st)) < 1e-12
    st2 = state_1d(basis_1d, lambda x: x + 0.5 * x * x, lambda x: 1 + x)
    assert abs(nonlocal_1d.energy(st2)) < 1e-12
    H = nonlocal_1d.hyperstress_at(st2, [0.37])
    assert np.abs(H).max() < 1e-12


def test_nonlocal_representations_agree(basis_1d, nonlocal_1d, rng):
    c = rng.standard_normal((1, basis_1d.dofs_per_component))
    st = DeformationState.from_coeffs(basis_1d, c)
    e1 = nonlocal_1d.energy(st)
    e2 = nonlocal_1d.energy_double_integral(st)
    e3 = nonlocal_1d.energy_via_hyperstress(st)
    assert abs(e1 - e2) / abs(e1) < 1e-10
    assert abs(e1 - e3) / abs(e1) < 1e-10
    assert e1 >= 0.0


def test_nonlocal_matrix_psd(nonlocal_1d, nonlocal_2d):
    for op in (nonlocal_1d, nonlocal_2d):
        eigs = np.linalg.eigvalsh(op.matrix)
        assert eigs.min() >= -1e-10 * max(1.0, eigs.max())


def test_hyperstress_pairing_is_gateaux_derivative(basis_1d, nonlocal_1d, rng):
    c = rng.standard_normal((1, basis_1d.dofs_per_component))
    st = DeformationState.from_coeffs(basis_1d, c)
    for _ in range(3):
        z = rng.standard_normal(c.shape)
        h = 1e-6
        fd = (nonlocal_1d.energy(DeformationState.from_coeffs(basis_1d, c + h * z))
              - nonlocal_1d.energy(DeformationState.from_coeffs(basis_1d, c - h * z))) / (2 * h)
        pair = nonlocal_1d.pairing(st, z)
        assert abs(fd - pair) / max(abs(fd), 1e-12) < 1e-6


def test_mech_force_gradient_and_translation(model, basis_1d, nonlocal_1d, rng):
    st = state_1d(basis_1d, lambda x: x + 0.05 * np.sin(np.pi * x),
                  lambda x: 1 + 0.05 * np.pi * np.cos(np.pi * x))
    f = en.mech_force(model, nonlocal_1d, st)
    worst = 0.0
    for _ in range(5):
        z = rng.standard_normal(st.chi.shape)
        z /= np.linalg.norm(z)
        h = 1e-6
        Ep = en.mech_energy(model, nonlocal_1d, st.with_coeffs(chi=st.chi + h * z))
        Em = en.mech_energy(model, nonlocal_1d, st.with_coeffs(chi=st.chi - h * z))
        fd = (Ep - Em) / (2 * h)
        worst = max(worst, abs(fd - float(np.sum(f * z))) / max(abs(fd), 1e-12))
    assert worst <= 1e-6
    # rigid translation direction: value dofs 1, slope dofs 0
    trans = np.zeros(st.chi.shape)
    trans[0, basis_1d.value_dof_ids] = 1.0
    assert abs(float(np.sum(f * trans))) < 1e-10


def test_mech_force_identity_analytic(basis_1d, nonlocal_1d):
    """At chi = id the stress is the constant (mu - eps_b p_b) I, so the
    force against each test function is that constant times int dN_a."""
    mdl = en.StoredEnergyModel(mu_L=1.0, eps_b=0.1, p_b=4.0)
    st = DeformationState.identity(basis_1d)
    f = en.mech_force(mdl, nonlocal_1d, st)
    const = mdl.mu_L - mdl.eps_b * mdl.p_b
    w = basis_1d.quad.weights
    expected = const * np.einsum("q,qa->a", w, basis_1d.B1[:, :, 0])
    assert np.abs(f[0] - expected).max() < 1e-12


def test_frame_indifference_2d(model, basis_2d, nonlocal_2d, smooth_state_2d, rng):
    st = smooth_state_2d
    E0 = en.mech_energy(model, nonlocal_2d, st)
    for _ in range(5):
        th = rng.uniform(0, 2 * np.pi)
        Q = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        stQ = st.with_coeffs(chi=Q @ st.chi)
        EQ = en.mech_energy(model, nonlocal_2d, stQ)
        assert abs(EQ - E0) / abs(E0) < 1e-10


def test_mech_stiffness_fd(model, basis_1d, nonlocal_1d, rng):
    st = state_1d(basis_1d, lambda x: x + 0.03 * np.sin(np.pi * x),
                  lambda x: 1 + 0.03 * np.pi * np.cos(np.pi * x))
    K = en.mech_stiffness(model, nonlocal_1d, st)
    z = rng.standard_normal(st.chi.shape)
    h = 1e-6
    fp = en.mech_force(model, nonlocal_1d, st.with_coeffs(chi=st.chi + h * z))
    fm = en.mech_force(model, nonlocal_1d, st.with_coeffs(chi=st.chi - h * z))
    fd = (fp - fm).ravel() / (2 * h)
    an = K @ z.ravel()
    assert np.abs(fd - an).max() / max(np.abs(an).max(), 1e-12) < 1e-5
