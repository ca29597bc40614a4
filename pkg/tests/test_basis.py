import numpy as np
import pytest

from elastocharge.basis import (ReferenceDomain, build_basis, quadrature,
                                eval_shapes, _hermite_local)


def test_hermite_dof_counts(unit_interval):
    b0 = build_basis(unit_interval, 0)
    assert b0.dofs_per_component == 6  # 3 nodes x (value, slope)
    b1 = build_basis(unit_interval, 1)
    assert b1.dofs_per_component == 10
    assert build_basis(unit_interval, 2).dofs_per_component == 18


def test_bfs_dof_count(unit_square):
    b = build_basis(unit_square, 0)  # 2x2 grid
    assert b.dofs_per_component == 36  # 9 nodes x 4 dofs


def test_dofs_strictly_increasing(unit_interval):
    counts = [build_basis(unit_interval, k).dofs_per_component for k in range(4)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_unsupported_family_and_degenerate_extent(unit_interval):
    with pytest.raises(ValueError):
        build_basis(unit_interval, 0, family="bfs")
    with pytest.raises(ValueError):
        ReferenceDomain([(1.0, 1.0)])
    with pytest.raises(ValueError):
        build_basis(unit_interval, -1)


def test_partition_of_unity(basis_1d, basis_2d, rng):
    for _ in range(5):
        x = rng.uniform(0.01, 0.99)
        v = basis_1d.eval_shapes([x], 0)
        assert abs(v[basis_1d.value_dof_ids].sum() - 1.0) < 1e-12
        xy = rng.uniform(0.01, 0.99, 2)
        v2 = basis_2d.eval_shapes(xy, 0)
        assert abs(v2[basis_2d.value_dof_ids].sum() - 1.0) < 1e-12


def test_linear_reproduction_gradient(basis_1d):
    c = basis_1d.interpolate({(0,): lambda x: 3.0 * x + 1.0, (1,): lambda x: 3.0})
    for x in (0.1, 0.5, 0.93):
        g = basis_1d.function_value(c, [x], 1)
        assert abs(g[0] - 3.0) < 1e-12


def test_quadratic_hessian_reproduction(basis_2d):
    A = np.array([[2.0, 0.5], [0.5, 1.5]])
    f = lambda x, y: 0.5 * (A[0, 0] * x * x + 2 * A[0, 1] * x * y + A[1, 1] * y * y)
    c = basis_2d.interpolate({
        (0, 0): f,
        (1, 0): lambda x, y: A[0, 0] * x + A[0, 1] * y,
        (0, 1): lambda x, y: A[0, 1] * x + A[1, 1] * y,
        (1, 1): lambda x, y: A[0, 1]})
    for q in basis_2d.quad.points[::7]:
        H = basis_2d.function_value(c, q, 2)
        assert np.abs(H - A).max() < 1e-12


def test_eval_outside_domain_raises(basis_1d):
    with pytest.raises(ValueError):
        eval_shapes(basis_1d, [1.5], 0)


def test_quadrature_examples(unit_interval, unit_square):
    q = quadrature(unit_interval, 3)
    assert abs(np.sum(q.weights * q.points[:, 0] ** 3) - 0.25) < 1e-15
    q2 = quadrature(unit_square, 3)
    assert abs(q2.weights.sum() - 1.0) < 1e-14
    # order-3 rule does not integrate x^6 exactly (documented inexactness)
    err = abs(np.sum(q.weights * q.points[:, 0] ** 6) - 1.0 / 7.0)
    assert err > 1e-6
    with pytest.raises(ValueError):
        quadrature(unit_interval, 0)


def test_weights_sum_to_measure():
    dom = ReferenceDomain([(-1.0, 2.5), (0.0, 0.5)])
    b = build_basis(dom, 1)
    assert abs(b.quad.weights.sum() - dom.measure) < 1e-12


@pytest.mark.parametrize("dim", [1, 2])
def test_nestedness_by_projection(dim, rng):
    """Every coarse shape is reproduced by L2 projection onto the finer space."""
    dom = ReferenceDomain([(0.0, 1.0)] * dim)
    coarse = build_basis(dom, 0)
    fine = build_basis(dom, 1)
    Bf = fine.B0
    w = fine.quad.weights
    M = np.einsum("q,qa,qb->ab", w, Bf, Bf)
    pick = rng.choice(coarse.dofs_per_component, size=6, replace=False)
    for a in pick:
        c = np.zeros(coarse.dofs_per_component)
        c[a] = 1.0
        vals = np.array([coarse.function_value(c, p, 0) for p in fine.quad.points])
        rhs = np.einsum("q,q,qa->a", w, vals, Bf)
        proj = np.linalg.solve(M, rhs)
        # pointwise residual (no cancellation): the projection reproduces
        # the coarse shape exactly up to roundoff
        r = vals - Bf @ proj
        resid = np.sqrt(np.sum(w * r**2))
        scale = max(np.sqrt(np.sum(w * vals**2)), 1e-12)
        assert resid / scale < 1e-12


def test_prolongation_is_exact(basis_1d, rng):
    fine = build_basis(basis_1d.domain, basis_1d.level + 1)
    c = rng.standard_normal(basis_1d.dofs_per_component)
    cf = basis_1d.prolong(c, fine)
    for x in rng.uniform(0, 1, 7):
        assert abs(basis_1d.function_value(c, [x], 0)
                   - fine.function_value(cf, [x], 0)) < 1e-12


def test_c1_conformity_1d(basis_1d, rng):
    """Value and slope jumps across interior interfaces vanish."""
    c = rng.standard_normal(basis_1d.dofs_per_component)
    a, bnd = basis_1d.domain.extent[0]
    for k in range(1, basis_1d.n_el[0]):
        xk = a + k * basis_1d.h[0]
        left = np.nextafter(xk, -np.inf)
        right = np.nextafter(xk, np.inf)
        v_jump = abs(basis_1d.function_value(c, [left], 0)
                     - basis_1d.function_value(c, [right], 0))
        g_jump = abs(basis_1d.function_value(c, [left], 1)[0]
                     - basis_1d.function_value(c, [right], 1)[0])
        scale = max(1.0, abs(basis_1d.function_value(c, [xk], 0)))
        assert v_jump / scale < 1e-12
        assert g_jump < 1e-9


def test_c1_conformity_2d(basis_2d, rng):
    c = rng.standard_normal(basis_2d.dofs_per_component)
    x_if = 0.5  # interior interface of the 2x2 grid
    for y in rng.uniform(0.05, 0.95, 4):
        l = [np.nextafter(x_if, -np.inf), y]
        r = [np.nextafter(x_if, np.inf), y]
        assert abs(basis_2d.function_value(c, l, 0)
                   - basis_2d.function_value(c, r, 0)) < 1e-10
        gl = basis_2d.function_value(c, l, 1)
        gr = basis_2d.function_value(c, r, 1)
        assert np.abs(gl - gr).max() < 1e-8


def test_hermite_local_partition():
    xi = np.linspace(0, 1, 11)
    H = _hermite_local(xi, 0.3, 0)
    assert np.abs(H[0] + H[2] - 1.0).max() < 1e-14


def test_boundary_faces(basis_1d, basis_2d):
    assert [f.name for f in basis_1d.boundary] == ["left", "right"]
    lengths = {f.name: f.weights.sum() for f in basis_2d.boundary}
    for name in ("left", "right", "bottom", "top"):
        assert abs(lengths[name] - 1.0) < 1e-12
