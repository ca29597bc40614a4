import math

import numpy as np
import pytest

from elastocharge import kinematics as kin
from elastocharge.basis import build_basis
from elastocharge.kinematics import DeformationState

from conftest import state_1d, interpolate_2d


def test_identity_gradients(basis_2d):
    st = DeformationState.identity(basis_2d)
    F, G = kin.gradients(st, [0.3, 0.6])
    assert np.abs(F - np.eye(2)).max() < 1e-12
    assert np.abs(G).max() < 1e-12


def test_uniform_stretch_1d(basis_1d):
    st = state_1d(basis_1d, lambda x: 2 * x, lambda x: 2.0)
    F, G = kin.gradients(st, [0.4])
    assert abs(F[0, 0] - 2.0) < 1e-13
    assert abs(G[0, 0, 0]) < 1e-12


def test_quadratic_map_2d(basis_2d):
    st = interpolate_2d(
        basis_2d,
        lambda x, y: x + 0.5 * x * x, (lambda x, y: 1 + x, lambda x, y: 0.0,
                                       lambda x, y: 0.0),
        lambda x, y: y, (lambda x, y: 0.0, lambda x, y: 1.0, lambda x, y: 0.0))
    F, G = kin.gradients(st, [0.3, 0.8])
    assert np.abs(F - np.array([[1.3, 0.0], [0.0, 1.0]])).max() < 1e-12
    expected_G = np.zeros((2, 2, 2))
    expected_G[0, 0, 0] = 1.0
    assert np.abs(G - expected_G).max() < 1e-11


def test_cof_inv_examples():
    F = np.array([[1.0, 2.0], [3.0, 4.0]])
    det, C, FiT = kin.cof_inv(F)
    assert abs(det + 2.0) < 1e-14
    assert np.allclose(C, [[4.0, -3.0], [-2.0, 1.0]])
    det, C, FiT = kin.cof_inv(np.eye(2))
    assert det == 1.0 and np.allclose(C, np.eye(2)) and np.allclose(FiT, np.eye(2))
    det, C, FiT = kin.cof_inv(np.diag([2.0, 3.0]))
    assert det == 6.0
    assert np.allclose(C, np.diag([3.0, 2.0]))
    assert np.allclose(FiT, np.diag([0.5, 1.0 / 3.0]))
    # d=1 cofactor is the scalar 1
    det, C, FiT = kin.cof_inv(np.array([[5.0]]))
    assert det == 5.0 and C[0, 0] == 1.0 and abs(FiT[0, 0] - 0.2) < 1e-15
    det, C, FiT = kin.cof_inv(np.zeros((2, 2)))
    assert FiT is None


def test_cof_transpose_identity(rng):
    for d in (1, 2):
        for _ in range(20):
            F = np.eye(d) + 0.5 * rng.standard_normal((d, d))
            det, C, _ = kin.cof_inv(F)
            assert np.abs(C.T @ F - det * np.eye(d)).max() < 1e-12


def test_div_inv_transpose_affine_is_zero(basis_2d):
    st = interpolate_2d(
        basis_2d,
        lambda x, y: 1.2 * x + 0.3 * y, (lambda x, y: 1.2, lambda x, y: 0.3,
                                         lambda x, y: 0.0),
        lambda x, y: 0.1 * x + 0.9 * y, (lambda x, y: 0.1, lambda x, y: 0.9,
                                         lambda x, y: 0.0))
    assert np.abs(kin.div_inv_transpose(st, [0.4, 0.7])).max() < 1e-11


def test_div_inv_transpose_1d_analytic(basis_1d):
    st = state_1d(basis_1d, lambda x: x + 0.5 * x * x, lambda x: 1 + x)
    for x in (0.2, 0.5, 0.8):
        val = kin.div_inv_transpose(st, [x])[0]
        assert abs(val + 1.0 / (1 + x) ** 2) < 1e-11


def test_div_inv_transpose_fd_oracle(smooth_state_2d, rng):
    """Matches central finite differences of the columns of F^{-T}."""
    st = smooth_state_2d
    h = 1e-5
    for _ in range(4):
        x = rng.uniform(0.2, 0.8, 2)
        an = kin.div_inv_transpose(st, x)
        fd = np.zeros(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            Fp, _ = kin.gradients(st, x + e)
            Fm, _ = kin.gradients(st, x - e)
            Ap = np.linalg.inv(Fp).T
            Am = np.linalg.inv(Fm).T
            fd += (Ap[:, i] - Am[:, i]) / (2 * h)
        assert np.abs(an - fd).max() < 5e-8 * max(1.0, np.abs(an).max())


def test_piola_identity_2d(smooth_state_2d, rng):
    """Row divergence of Cof(grad chi) vanishes (checked by differences)."""
    st = smooth_state_2d
    h = 1e-5
    for _ in range(4):
        x = rng.uniform(0.2, 0.8, 2)
        div = np.zeros(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            Fp, _ = kin.gradients(st, x + e)
            Fm, _ = kin.gradients(st, x - e)
            div += (kin.cof_matrix(Fp)[:, i] - kin.cof_matrix(Fm)[:, i]) / (2 * h)
        assert np.abs(div).max() < 1e-6


def test_det_monitor(basis_1d):
    st = DeformationState.identity(basis_1d)
    rep = kin.det_monitor(st, 0.5)
    assert rep.min_det == pytest.approx(1.0) and not rep.violated
    st2 = state_1d(basis_1d, lambda x: 0.4 * x, lambda x: 0.4)
    rep2 = kin.det_monitor(st2, 0.5)
    assert rep2.violated and rep2.min_det == pytest.approx(0.4)
    with pytest.raises(ValueError):
        kin.det_monitor(st, 0.0)


def test_preimages_dedup_and_flagging(basis_1d):
    st = state_1d(basis_1d, lambda x: 2 * x, lambda x: 2.0)
    roots, flagged = kin.preimages(st, [0.8])
    assert len(roots) == 1 and abs(roots[0, 0] - 0.4) < 1e-9
    assert flagged == 0
    roots, _ = kin.preimages(st, [5.0])  # outside the image
    assert len(roots) == 0


def test_pushforward_examples(basis_1d):
    st = state_1d(basis_1d, lambda x: 2 * x, lambda x: 2.0)
    assert kin.pushforward_density(st, lambda x: 1.0, [0.9]) == pytest.approx(0.5)
    assert kin.pushforward_density(st, lambda x: 1.0, [2.5]) == 0.0
    ident = DeformationState.identity(basis_1d)
    q = lambda x: 1.0 + x * x
    assert kin.pushforward_density(ident, q, [0.3]) == pytest.approx(q(0.3), abs=1e-9)


def test_total_charge_invariance(basis_1d):
    st = state_1d(basis_1d, lambda x: x + 0.1 * math.sin(math.pi * x),
                  lambda x: 1 + 0.1 * math.pi * math.cos(math.pi * x))
    q = lambda x: 0.8 * (1 + 0.5 * math.sin(math.pi * x))
    ref_total = float(np.sum(st.basis.quad.weights
                             * np.array([q(x[0]) for x in st.basis.quad.points])))
    push_total = kin.pushforward_total(st, q, n_points=64)
    assert abs(push_total - ref_total) < 1e-6


# the three fixed smooth invertible deformations of the change-of-variables
# suite, with their first-release residual bounds (regression-frozen)
def _affine_1d(basis):
    return state_1d(basis, lambda x: 2 * x, lambda x: 2.0)


def _smooth_1d(basis):
    return state_1d(basis, lambda x: x + 0.2 * x * x * (1 - x),
                    lambda x: 1 + 0.4 * x - 0.6 * x * x)


AREA_CASES = [
    ("affine_1d", 1, lambda x: 1.0, 5e-9),
    ("smooth_1d", 1, lambda x: 1.0 + x, 5e-7),
    ("shear_2d", 2, lambda x, y: 1.0, 5e-3),
]


@pytest.mark.parametrize("name,dim,f,bound", AREA_CASES)
def test_area_formula_fixed_deformations(name, dim, f, bound):
    if dim == 1:
        basis = build_basis(__import__("elastocharge").basis.ReferenceDomain(
            [(0.0, 1.0)]), 2)
        st = _affine_1d(basis) if name == "affine_1d" else _smooth_1d(basis)
        res = kin.area_formula_residual(st, f, grid_n=64)
    else:
        basis = build_basis(__import__("elastocharge").basis.ReferenceDomain(
            [(0.0, 1.0), (0.0, 1.0)]), 0)
        st = interpolate_2d(
            basis,
            lambda x, y: x + 0.2 * y, (lambda x, y: 1.0, lambda x, y: 0.2,
                                       lambda x, y: 0.0),
            lambda x, y: y + 0.1 * x * x, (lambda x, y: 0.2 * x,
                                           lambda x, y: 1.0, lambda x, y: 0.2))
        res = kin.area_formula_residual(st, f, grid_n=48)
    assert res["residual"] <= bound, (name, res)
    assert res["flagged_cells"] == 0


def test_area_formula_identity(basis_1d):
    st = DeformationState.identity(basis_1d)
    res = kin.area_formula_residual(st, lambda x: math.cos(x), grid_n=64)
    assert res["residual"] < 1e-9


def test_area_formula_rejects_sign_change(basis_1d):
    """A folding map (det changes sign) is out of contract."""
    st = state_1d(basis_1d, lambda x: math.sin(math.pi * x),
                  lambda x: math.pi * math.cos(math.pi * x))
    with pytest.raises(kin.SingularDeformationError):
        kin.area_formula_residual(st, lambda x: 1.0)
