"""C1-conforming nested Galerkin bases on rectangular reference domains.

Two shape-function families are provided: cubic Hermite elements on an
interval (d=1) and Bogner-Fox-Schmit rectangles (d=2), i.e. tensor-product
Hermite bicubics.  Both are C1 across element interfaces with
square-integrable second derivatives, and dyadic refinement makes the
level hierarchy exactly nested.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ReferenceDomain",
    "QuadratureRule",
    "GalerkinBasis",
    "BoundaryFace",
    "build_basis",
    "quadrature",
    "eval_shapes",
]

_FAMILIES = {1: ("hermite",), 2: ("bfs",)}


class ReferenceDomain:
    """Axis-aligned box reference domain with labeled boundary faces.

    Parameters
    ----------
    extent : sequence of (lo, hi) pairs, one per axis (d = 1 or 2).
    """

    def __init__(self, extent):
        extent = tuple((float(a), float(b)) for a, b in extent)
        if len(extent) not in (1, 2):
            raise ValueError("only d=1 and d=2 reference domains are supported")
        for a, b in extent:
            if not b > a:
                raise ValueError(f"degenerate extent ({a}, {b}): need lower < upper")
        self.extent = extent
        self.dim = len(extent)
        if self.dim == 1:
            self.boundary_tags = ("left", "right")
        else:
            self.boundary_tags = ("left", "right", "bottom", "top")

    @property
    def lengths(self):
        return np.array([b - a for a, b in self.extent])

    @property
    def measure(self):
        return float(np.prod(self.lengths))

    def contains(self, x, tol=1e-12):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return all(a - tol <= xi <= b + tol for xi, (a, b) in zip(x, self.extent))

    def __repr__(self):
        return f"ReferenceDomain(extent={self.extent})"


class QuadratureRule:
    """Tensor-Gauss quadrature: global points, positive weights, exactness order."""

    def __init__(self, points, weights, order, element=None):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.points.shape[0] == 1 and self.points.shape[1] > 2:
            self.points = self.points.T
        self.weights = np.asarray(weights, dtype=float)
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")
        self.order = int(order)
        # element index of each point, when the rule is element-structured
        self.element = None if element is None else np.asarray(element, dtype=int)

    @property
    def n(self):
        return len(self.weights)


def _gauss01(npts):
    """Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def quadrature(domain, order, n_elements=None):
    """Tensor-Gauss rule on `domain`, exact for per-axis polynomial degree <= order.

    `n_elements` (per axis, int or tuple) optionally splits the box into a
    uniform composite grid; default is a single element.
    """
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    d = domain.dim
    if n_elements is None:
        n_elements = 1
    if np.isscalar(n_elements):
        n_elements = (int(n_elements),) * d
    npts = (order + 2) // 2  # ceil((order+1)/2)
    xg, wg = _gauss01(npts)
    axes_pts, axes_wts = [], []
    for ax in range(d):
        a, b = domain.extent[ax]
        h = (b - a) / n_elements[ax]
        pts = np.concatenate([a + (e + xg) * h for e in range(n_elements[ax])])
        wts = np.concatenate([wg * h for _ in range(n_elements[ax])])
        axes_pts.append(pts)
        axes_wts.append(wts)
    if d == 1:
        points = axes_pts[0][:, None]
        weights = axes_wts[0]
        element = np.repeat(np.arange(n_elements[0]), npts)
    else:
        X, Y = np.meshgrid(axes_pts[0], axes_pts[1], indexing="ij")
        points = np.column_stack([X.ravel(), Y.ravel()])
        weights = np.outer(axes_wts[0], axes_wts[1]).ravel()
        ex = np.repeat(np.arange(n_elements[0]), npts)
        ey = np.repeat(np.arange(n_elements[1]), npts)
        EX, EY = np.meshgrid(ex, ey, indexing="ij")
        element = (EX * n_elements[1] + EY).ravel()
    return QuadratureRule(points, weights, 2 * npts - 1, element=element)


# ---------------------------------------------------------------------------
# cubic Hermite machinery (local coordinate xi in [0,1])

def _hermite_local(xi, h, deriv):
    """The four local Hermite cubics [v0, s0, v1, s1] at xi, d^deriv/dx^deriv.

    Slope shapes carry the element size h so that their dof is the physical
    slope; x-derivatives are chain-ruled through xi = (x - x_e)/h.
    """
    xi = np.asarray(xi, dtype=float)
    if deriv == 0:
        v0 = 1.0 - 3.0 * xi**2 + 2.0 * xi**3
        s0 = h * (xi - 2.0 * xi**2 + xi**3)
        v1 = 3.0 * xi**2 - 2.0 * xi**3
        s1 = h * (xi**3 - xi**2)
    elif deriv == 1:
        v0 = (-6.0 * xi + 6.0 * xi**2) / h
        s0 = 1.0 - 4.0 * xi + 3.0 * xi**2
        v1 = (6.0 * xi - 6.0 * xi**2) / h
        s1 = 3.0 * xi**2 - 2.0 * xi
    elif deriv == 2:
        v0 = (-6.0 + 12.0 * xi) / h**2
        s0 = (-4.0 + 6.0 * xi) / h
        v1 = (6.0 - 12.0 * xi) / h**2
        s1 = (6.0 * xi - 2.0) / h
    else:
        raise ValueError("deriv must be 0, 1 or 2")
    return np.stack([v0, s0, v1, s1])


class BoundaryFace:
    """Quadrature and shape tables on one boundary face."""

    def __init__(self, name, points, weights, normal, B0, B1):
        self.name = name
        self.points = points    # (Qb, d)
        self.weights = weights  # (Qb,)
        self.normal = normal    # (d,) outward unit normal (faces are axis-aligned)
        self.B0 = B0            # (Qb, N)
        self.B1 = B1            # (Qb, N, d)


class GalerkinBasis:
    """Scalar C1 shape-function space; vector fields use one copy per component.

    Attributes
    ----------
    level : refinement index (elements per axis = base_elements * 2**level)
    dofs_per_component : N
    quad : volume QuadratureRule with per-point element ids
    B0, B1, B2 : shape tables at quadrature points, shapes (Q,N), (Q,N,d), (Q,N,d,d)
    boundary : list of BoundaryFace
    value_dof_ids : indices of the value-type dofs (partition of unity holds there)
    """

    def __init__(self, domain, level, family, base_elements=2, quad_order=7):
        d = domain.dim
        if family not in _FAMILIES[d]:
            raise ValueError(f"family {family!r} not supported for d={d}")
        if level < 0:
            raise ValueError("level must be >= 0")
        self.domain = domain
        self.level = int(level)
        self.family = family
        self.base_elements = int(base_elements)
        n = self.base_elements * 2**self.level
        self.n_el = (n,) * d
        self.h = tuple((b - a) / n for a, b in domain.extent)
        self._dofs_per_node = 2 if d == 1 else 4
        nn = tuple(m + 1 for m in self.n_el)
        self.n_nodes = int(np.prod(nn))
        self.dofs_per_component = self._dofs_per_node * self.n_nodes
        self.nodes = self._build_nodes(nn)
        self.quad = quadrature(domain, quad_order, n_elements=self.n_el)
        self.B0 = self.eval_many(self.quad.points, 0)
        self.B1 = self.eval_many(self.quad.points, 1)
        self.B2 = self.eval_many(self.quad.points, 2)
        self.boundary = self._build_boundary(quad_order)
        self.value_dof_ids = np.arange(0, self.dofs_per_component, self._dofs_per_node)
        self._monitor_cache = None

    # -- construction helpers ------------------------------------------------

    def _build_nodes(self, nn):
        axes = [np.linspace(a, b, m) for (a, b), m in zip(self.domain.extent, nn)]
        if self.domain.dim == 1:
            return axes[0][:, None]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def _node_id(self, i, j=None):
        if self.domain.dim == 1:
            return i
        return i * (self.n_el[1] + 1) + j

    def _locate(self, x):
        """Element multi-index containing x (clipped to the grid)."""
        idx = []
        for ax in range(self.domain.dim):
            a, _ = self.domain.extent[ax]
            e = int(np.floor((x[ax] - a) / self.h[ax]))
            idx.append(min(max(e, 0), self.n_el[ax] - 1))
        return tuple(idx)

    def element_dofs(self, e):
        """Global dof indices of the element's local basis."""
        k = self._dofs_per_node
        if self.domain.dim == 1:
            (ex,) = e
            nids = [ex, ex + 1]
        else:
            ex, ey = e
            nids = [self._node_id(ex, ey), self._node_id(ex + 1, ey),
                    self._node_id(ex, ey + 1), self._node_id(ex + 1, ey + 1)]
        return np.concatenate([np.arange(n * k, n * k + k) for n in nids])

    # -- point evaluation ------------------------------------------------------

    def eval_shapes(self, x, deriv):
        """All N shapes at point x: (N,), (N,d) or (N,d,d) for deriv 0/1/2."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not self.domain.contains(x):
            raise ValueError(f"point {x} outside the reference domain")
        d = self.domain.dim
        N = self.dofs_per_component
        e = self._locate(x)
        dofs = self.element_dofs(e)
        if d == 1:
            a, _ = self.domain.extent[0]
            xi = (x[0] - a) / self.h[0] - e[0]
            if deriv == 0:
                out = np.zeros(N)
                out[dofs] = _hermite_local(xi, self.h[0], 0)
            elif deriv == 1:
                out = np.zeros((N, 1))
                out[dofs, 0] = _hermite_local(xi, self.h[0], 1)
            else:
                out = np.zeros((N, 1, 1))
                out[dofs, 0, 0] = _hermite_local(xi, self.h[0], 2)
            return out
        # d == 2: tensor products; local dof order per node = (v,v),(s,v),(v,s),(s,s)
        ax0, _ = self.domain.extent[0]
        ay0, _ = self.domain.extent[1]
        xi = (x[0] - ax0) / self.h[0] - e[0]
        eta = (x[1] - ay0) / self.h[1] - e[1]
        Hx = [_hermite_local(xi, self.h[0], k) for k in range(3)]
        Hy = [_hermite_local(eta, self.h[1], k) for k in range(3)]
        # local index: node n in [00,10,01,11], per-node types (a,b) with a,b in {v,s}
        # 1D local order [v0,s0,v1,s1] -> per node pick component ix in {0,1} + type
        def loc(table_x, table_y):
            vals = np.empty(16)
            p = 0
            for nx, ny in ((0, 0), (1, 0), (0, 1), (1, 1)):
                for a, b in ((0, 0), (1, 0), (0, 1), (1, 1)):  # (value, dx, dy, dxy)
                    vals[p] = table_x[2 * nx + a] * table_y[2 * ny + b]
                    p += 1
            return vals
        if deriv == 0:
            out = np.zeros(N)
            out[dofs] = loc(Hx[0], Hy[0])
            return out
        if deriv == 1:
            out = np.zeros((N, 2))
            out[dofs, 0] = loc(Hx[1], Hy[0])
            out[dofs, 1] = loc(Hx[0], Hy[1])
            return out
        out = np.zeros((N, 2, 2))
        out[dofs, 0, 0] = loc(Hx[2], Hy[0])
        out[dofs, 1, 1] = loc(Hx[0], Hy[2])
        mixed = loc(Hx[1], Hy[1])
        out[dofs, 0, 1] = mixed
        out[dofs, 1, 0] = mixed
        return out

    def eval_many(self, points, deriv):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.domain.dim == 1 and points.shape[1] == 1:
            return self._eval_batch_1d(points[:, 0], deriv)
        if self.domain.dim == 2 and points.shape[1] == 2:
            return self._eval_batch_2d(points, deriv)
        return np.stack([self.eval_shapes(p, deriv) for p in points])

    def _eval_batch_2d(self, pts, deriv):
        """Vectorized Bogner-Fox-Schmit evaluation over many points."""
        (ax0, bx), (ay0, by) = self.domain.extent
        if np.any(pts[:, 0] < ax0 - 1e-12) or np.any(pts[:, 0] > bx + 1e-12) \
                or np.any(pts[:, 1] < ay0 - 1e-12) or np.any(pts[:, 1] > by + 1e-12):
            raise ValueError("points outside the reference domain")
        hx, hy = self.h
        tx = (pts[:, 0] - ax0) / hx
        ty = (pts[:, 1] - ay0) / hy
        ex = np.clip(np.floor(tx).astype(int), 0, self.n_el[0] - 1)
        ey = np.clip(np.floor(ty).astype(int), 0, self.n_el[1] - 1)
        xi = tx - ex
        eta = ty - ey
        P = len(pts)
        N = self.dofs_per_component
        ny1 = self.n_el[1] + 1
        # columns of the 16 local dofs: 4 corner nodes x 4 per-node types
        nodes = np.stack([ex * ny1 + ey, (ex + 1) * ny1 + ey,
                          ex * ny1 + ey + 1, (ex + 1) * ny1 + ey + 1])  # (4, P)
        rows = np.arange(P)

        def scatter(table_x, table_y, out_slice):
            for ni, (nx, nyy) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
                base = 4 * nodes[ni]
                for ci, (a, b2) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
                    out_slice[rows, base + ci] = \
                        table_x[2 * nx + a] * table_y[2 * nyy + b2]

        if deriv == 0:
            Hx = _hermite_local(xi, hx, 0)
            Hy = _hermite_local(eta, hy, 0)
            out = np.zeros((P, N))
            scatter(Hx, Hy, out)
            return out
        if deriv == 1:
            Hx0 = _hermite_local(xi, hx, 0)
            Hx1 = _hermite_local(xi, hx, 1)
            Hy0 = _hermite_local(eta, hy, 0)
            Hy1 = _hermite_local(eta, hy, 1)
            out = np.zeros((P, N, 2))
            scatter(Hx1, Hy0, out[:, :, 0])
            scatter(Hx0, Hy1, out[:, :, 1])
            return out
        Hx = [_hermite_local(xi, hx, k) for k in range(3)]
        Hy = [_hermite_local(eta, hy, k) for k in range(3)]
        out = np.zeros((P, N, 2, 2))
        scatter(Hx[2], Hy[0], out[:, :, 0, 0])
        scatter(Hx[0], Hy[2], out[:, :, 1, 1])
        mixed = np.zeros((P, N))
        scatter(Hx[1], Hy[1], mixed)
        out[:, :, 0, 1] = mixed
        out[:, :, 1, 0] = mixed
        return out

    def _eval_batch_1d(self, xs, deriv):
        """Vectorized 1D Hermite evaluation over many points."""
        a, b = self.domain.extent[0]
        if np.any(xs < a - 1e-12) or np.any(xs > b + 1e-12):
            raise ValueError("points outside the reference domain")
        h = self.h[0]
        t = (xs - a) / h
        e = np.clip(np.floor(t).astype(int), 0, self.n_el[0] - 1)
        xi = t - e
        H = _hermite_local(xi, h, deriv)  # (4, P)
        P = len(xs)
        N = self.dofs_per_component
        out = np.zeros((P, N))
        rows = np.arange(P)
        for j in range(4):
            out[rows, 2 * e + j] = H[j]
        if deriv == 0:
            return out
        if deriv == 1:
            return out[:, :, None]
        return out[:, :, None, None]

    # -- interpolation and nesting ---------------------------------------------

    def interpolate(self, der_funcs):
        """Hermite interpolation of a scalar field given its nodal derivatives.

        `der_funcs` maps per-axis derivative multi-orders to callables of the
        node coordinates: d=1 needs keys (0,) and (1,); d=2 needs (0,0),
        (1,0), (0,1) and (1,1).  Returns the coefficient vector (N,).
        """
        coeffs = np.zeros(self.dofs_per_component)
        k = self._dofs_per_node
        if self.domain.dim == 1:
            orders = [(0,), (1,)]
        else:
            orders = [(0, 0), (1, 0), (0, 1), (1, 1)]
        for c, order in enumerate(orders):
            f = der_funcs[order]
            vals = np.array([f(*node) for node in self.nodes])
            coeffs[c::k] = vals
        return coeffs

    def function_value(self, coeffs, x, deriv=0):
        """Evaluate the field with coefficients `coeffs` at x (any deriv 0..2)."""
        tab = self.eval_shapes(x, deriv)
        return np.tensordot(coeffs, tab, axes=(0, 0))

    def prolong(self, coeffs, fine):
        """Exact embedding of this-level coefficients into a finer nested basis."""
        if fine.family != self.family or fine.base_elements != self.base_elements:
            raise ValueError("prolongation requires the same family hierarchy")
        if fine.level < self.level:
            raise ValueError("target basis must be at least as fine")
        k = self._dofs_per_node
        out = np.zeros(fine.dofs_per_component)
        if self.domain.dim == 1:
            for i, node in enumerate(fine.nodes):
                out[k * i + 0] = self.function_value(coeffs, node, 0)
                out[k * i + 1] = self.function_value(coeffs, node, 1)[0]
        else:
            for i, node in enumerate(fine.nodes):
                out[k * i + 0] = self.function_value(coeffs, node, 0)
                g = self.function_value(coeffs, node, 1)
                out[k * i + 1] = g[0]
                out[k * i + 2] = g[1]
                out[k * i + 3] = self.function_value(coeffs, node, 2)[0, 1]
        return out

    # -- monitor grid ------------------------------------------------------------

    def monitor_points(self, oversample=4):
        """Quadrature points plus a uniformly oversampled grid (cached tables).

        Returns (points, B1_table); used by the determinant monitor.
        """
        if self._monitor_cache is not None and self._monitor_cache[0] == oversample:
            return self._monitor_cache[1], self._monitor_cache[2]
        axes = [np.linspace(a, b, oversample * n + 1)
                for (a, b), n in zip(self.domain.extent, self.n_el)]
        if self.domain.dim == 1:
            grid = axes[0][:, None]
        else:
            X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
            grid = np.column_stack([X.ravel(), Y.ravel()])
        pts = np.vstack([self.quad.points, grid])
        B1 = self.eval_many(pts, 1)
        self._monitor_cache = (oversample, pts, B1)
        return pts, B1

    # -- boundary -----------------------------------------------------------------

    def _build_boundary(self, quad_order):
        d = self.domain.dim
        faces = []
        if d == 1:
            (a, b) = self.domain.extent[0]
            for name, x, nrm in (("left", a, -1.0), ("right", b, 1.0)):
                pts = np.array([[x]])
                B0 = self.eval_many(pts, 0)
                B1 = self.eval_many(pts, 1)
                faces.append(BoundaryFace(name, pts, np.array([1.0]),
                                          np.array([nrm]), B0, B1))
            return faces
        (ax0, ax1), (ay0, ay1) = self.domain.extent
        npts = (quad_order + 2) // 2
        xg, wg = _gauss01(npts)
        specs = [
            ("left", 1, ax0, np.array([-1.0, 0.0])),
            ("right", 1, ax1, np.array([1.0, 0.0])),
            ("bottom", 0, ay0, np.array([0.0, -1.0])),
            ("top", 0, ay1, np.array([0.0, 1.0])),
        ]
        for name, run_axis, fixed, nrm in specs:
            a, b = self.domain.extent[run_axis]
            n = self.n_el[run_axis]
            h = (b - a) / n
            s = np.concatenate([a + (e + xg) * h for e in range(n)])
            w = np.concatenate([wg * h for _ in range(n)])
            pts = np.empty((len(s), 2))
            pts[:, run_axis] = s
            pts[:, 1 - run_axis] = fixed
            B0 = self.eval_many(pts, 0)
            B1 = self.eval_many(pts, 1)
            faces.append(BoundaryFace(name, pts, w, nrm, B0, B1))
        return faces

    def __repr__(self):
        return (f"GalerkinBasis(family={self.family!r}, level={self.level}, "
                f"elements={self.n_el}, dofs={self.dofs_per_component})")


def build_basis(domain, level, family=None, base_elements=2, quad_order=7):
    """Construct the nested C1 basis at the given refinement level.

    Family defaults to cubic Hermite for d=1 and Bogner-Fox-Schmit for d=2.
    Dyadic refinement guarantees that every lower level's span is contained
    in the returned basis' span.
    """
    if family is None:
        family = "hermite" if domain.dim == 1 else "bfs"
    return GalerkinBasis(domain, level, family, base_elements=base_elements,
                         quad_order=quad_order)


def eval_shapes(basis, x, deriv):
    """Module-level alias for GalerkinBasis.eval_shapes."""
    return basis.eval_shapes(x, deriv)
