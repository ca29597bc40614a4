import numpy as np
import pytest

from elastocharge.basis import ReferenceDomain, build_basis
from elastocharge.energy import NonlocalKernel, NonlocalOperator, StoredEnergyModel
from elastocharge.kinematics import DeformationState


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def unit_interval():
    return ReferenceDomain([(0.0, 1.0)])


@pytest.fixture
def unit_square():
    return ReferenceDomain([(0.0, 1.0), (0.0, 1.0)])


@pytest.fixture
def basis_1d(unit_interval):
    return build_basis(unit_interval, 2)


@pytest.fixture
def basis_2d(unit_square):
    return build_basis(unit_square, 0)


@pytest.fixture
def model():
    return StoredEnergyModel()  # eps_b = mu_L/p_b: stress-free identity


@pytest.fixture
def biot_model():
    return StoredEnergyModel(M_B=2.0, beta=0.3, m_e=1.0, kappa_c=0.5)


@pytest.fixture
def nonlocal_1d(basis_1d):
    kernel = NonlocalKernel(gamma=0.75, strength=1e-3, delta=basis_1d.h[0], dim=1)
    return NonlocalOperator(kernel, basis_1d)


@pytest.fixture
def nonlocal_2d(basis_2d):
    kernel = NonlocalKernel(gamma=0.6, strength=1e-4,
                            delta=float(np.linalg.norm(basis_2d.h)), dim=2)
    return NonlocalOperator(kernel, basis_2d)


def interpolate_1d(basis, f, df):
    return basis.interpolate({(0,): f, (1,): df})


def state_1d(basis, f, df, vf=None, vdf=None):
    chi = interpolate_1d(basis, f, df)[None, :]
    chidot = None
    if vf is not None:
        chidot = interpolate_1d(basis, vf, vdf)[None, :]
    return DeformationState.from_coeffs(basis, chi, chidot)


def interpolate_2d(basis, fx, dfx, fy, dfy):
    """Interpolate a 2D map given per-component (f, [fx, fy, fxy]) callables."""
    chi = np.zeros((2, basis.dofs_per_component))
    chi[0] = basis.interpolate({(0, 0): fx, (1, 0): dfx[0], (0, 1): dfx[1],
                                (1, 1): dfx[2]})
    chi[1] = basis.interpolate({(0, 0): fy, (1, 0): dfy[0], (0, 1): dfy[1],
                                (1, 1): dfy[2]})
    return DeformationState.from_coeffs(basis, chi)


@pytest.fixture
def smooth_state_2d(basis_2d):
    """chi = (x + 0.1 sin(pi x) sin(pi y), y + 0.05 x^2 y): smooth, det > 0."""
    import math
    pi = math.pi
    fx = lambda x, y: x + 0.1 * math.sin(pi * x) * math.sin(pi * y)
    dfx = (lambda x, y: 1 + 0.1 * pi * math.cos(pi * x) * math.sin(pi * y),
           lambda x, y: 0.1 * pi * math.sin(pi * x) * math.cos(pi * y),
           lambda x, y: 0.1 * pi * pi * math.cos(pi * x) * math.cos(pi * y))
    fy = lambda x, y: y + 0.05 * x * x * y
    dfy = (lambda x, y: 0.1 * x * y,
           lambda x, y: 1 + 0.05 * x * x,
           lambda x, y: 0.1 * x)
    return interpolate_2d(basis_2d, fx, dfx, fy, dfy)
