"""Scenario configuration: TOML parsing, the expression mini-language,
cross-field validation, and construction of the runnable system.

Field data (charges, loads, initial data, density) are closed-form
expression strings in the coordinates x (, y) and, where meaningful, the
time t.  Expressions are parsed with sympy -- which also supplies the exact
spatial derivatives needed for Hermite interpolation of the initial data and
for the gradient of the charge density in the integration-by-parts electro
force -- and compiled to plain callables.

Units follow SI conventions but are not enforced dimensionally; the shipped
demos are nondimensionalized (the physical vacuum permittivity makes
desk-scale coupled dynamics hopelessly stiff).
"""

from __future__ import annotations

import copy
import io
import warnings

import numpy as np
import sympy
import tomli
from sympy.parsing.sympy_parser import parse_expr, standard_transformations

from .basis import ReferenceDomain, build_basis
from .energy import NonlocalKernel, NonlocalOperator, StoredEnergyModel
from .electrostatics import ElectrostaticParams, SpatialMesh
from .kinematics import DeformationState
from .dynamics import LoadSpec, System, mass_matrix
from .diffusion import DiffusionParams, DiffusionState, make_diffusion_space

__all__ = ["Scenario", "ScenarioError", "parse_scenario", "dumps_toml"]

MODES = ("dynamic", "static", "diffusion", "audit", "study")

_DEFAULTS = {
    "mode": "dynamic",
    "seed": 0,
    "domain": {"dim": 1, "extent": [[0.0, 1.0]]},
    "basis": {"level": 2, "base_elements": 2, "family": ""},
    "material": {
        "mu_L": 1.0, "kappa_L": 1.0, "eps_b": 0.25, "p_b": 4.0, "rho": "1.0",
        "biot": {},
    },
    "kernel": {"gamma": 0.75, "strength": 0.0, "delta": 0.0},
    "electrostatics": {
        "enabled": False, "eps0": 8.854e-12, "eps1": 0.0, "p_reg": 2.5,
        "R": 4.0, "cells": 128, "tol": 1e-12, "coupling_subdiv": 2,
    },
    "charge": {"q": "0", "q_ext": "0", "charge_factor": 1.0},
    "loads": {"f": [], "g": [], "mu_flat": "0", "alpha": 0.0},
    "initial": {"chi0": [], "v0": [], "m0": "1.0"},
    "time": {"T": 1.0, "dt": 1e-3, "dt_min_factor": 2.0**-10},
    "diffusion": {"enabled": False, "cells": 16, "M0": [[1.0]],
                  "coupling": "staggered"},
    "tolerances": {"newton_tol": 1e-12, "newton_max": 30, "det_floor": 1e-2},
    "output": {"cadence": 0, "probes": [], "figures": True},
    "study": {"axis": "dt", "values": [], "observable": ""},
}


class ScenarioError(ValueError):
    """Configuration error; the message names the field and the violated rule."""


def _merge(defaults, data, path=""):
    out = copy.deepcopy(defaults)
    for key, val in data.items():
        if key not in defaults:
            raise ScenarioError(f"unknown field {path}{key}")
        if isinstance(defaults[key], dict) and not path.endswith("biot."):
            if not isinstance(val, dict):
                raise ScenarioError(f"{path}{key} must be a table")
            if key == "biot":
                out[key] = copy.deepcopy(val)
            else:
                out[key] = _merge(defaults[key], val, path=f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


# ---------------------------------------------------------------------------
# expression mini-language


_ALLOWED_FUNCS = {
    name: getattr(sympy, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "sinh", "cosh",
                 "tanh", "atan", "asin", "acos", "Abs", "Min", "Max", "sign")
}
_ALLOWED_FUNCS["abs"] = sympy.Abs
_ALLOWED_FUNCS["pi"] = sympy.pi
_ALLOWED_FUNCS["E"] = sympy.E


class Expression:
    """A compiled scalar expression of the space coordinates (and optionally t)."""

    def __init__(self, text, dim, allow_t=False, name="expression"):
        self.text = str(text)
        self.dim = dim
        self.allow_t = allow_t
        self.name = name
        coords = sympy.symbols("x y")[:dim]
        t = sympy.Symbol("t")
        local = dict(_ALLOWED_FUNCS)
        local.update({s.name: s for s in coords})
        if allow_t:
            local["t"] = t
        try:
            expr = parse_expr(self.text, local_dict=local,
                              transformations=standard_transformations)
        except Exception as exc:
            raise ScenarioError(f"{name}: cannot parse {self.text!r}: {exc}") from exc
        rule = "coordinates x%s%s" % (", y" if dim == 2 else "",
                                      " and t" if allow_t else "")
        free = expr.free_symbols - set(coords) - ({t} if allow_t else set())
        if free:
            bad = ", ".join(sorted(s.name for s in free))
            raise ScenarioError(f"{name}: unknown symbols {bad}; allowed: {rule}")
        undef = expr.atoms(sympy.core.function.AppliedUndef)
        if undef:
            bad = ", ".join(sorted(f.func.__name__ for f in undef))
            raise ScenarioError(
                f"{name}: unknown functions {bad}; allowed: "
                + ", ".join(sorted(k for k in _ALLOWED_FUNCS if k not in ("pi", "E"))))
        self.sympy_expr = expr
        args = list(coords) + ([t] if allow_t else [])
        self._args = args
        self._fn = sympy.lambdify(args, expr, modules=["math"])

    def __call__(self, *xs):
        return float(self._fn(*xs))

    def spatial_gradient(self):
        """Component callables of the spatial gradient (same signature)."""
        coords = self._args[:self.dim]
        fns = [sympy.lambdify(self._args, sympy.diff(self.sympy_expr, c),
                              modules=["math"]) for c in coords]

        def grad(*xs):
            return np.array([float(f(*xs)) for f in fns])

        return grad

    def derivative(self, orders):
        """Callable of the mixed spatial derivative with the given orders."""
        coords = self._args[:self.dim]
        e = self.sympy_expr
        for c, k in zip(coords, orders):
            if k:
                e = sympy.diff(e, c, k)
        fn = sympy.lambdify(self._args, e, modules=["math"])
        return lambda *xs: float(fn(*xs))

    def time_derivative(self):
        t = self._args[-1]
        fn = sympy.lambdify(self._args, sympy.diff(self.sympy_expr, t),
                            modules=["math"])
        return lambda *xs: float(fn(*xs))

    def is_zero(self):
        return self.sympy_expr == 0

    def depends_on_t(self):
        return self.allow_t and sympy.Symbol("t") in self.sympy_expr.free_symbols


class VectorExpression:
    """A d-component vector of expressions."""

    def __init__(self, texts, dim, allow_t=False, name="vector expression"):
        if len(texts) != dim:
            raise ScenarioError(
                f"{name}: needs {dim} component expression(s), got {len(texts)}")
        self.parts = [Expression(s, dim, allow_t, name=f"{name}[{i}]")
                      for i, s in enumerate(texts)]
        self.dim = dim

    def __call__(self, *xs):
        return np.array([p(*xs) for p in self.parts])

    def is_zero(self):
        return all(p.is_zero() for p in self.parts)

    def time_derivative_callable(self):
        fns = [p.time_derivative() for p in self.parts]
        return lambda *xs: np.array([f(*xs) for f in fns])


# ---------------------------------------------------------------------------


class Scenario:
    """Validated scenario; `raw` is the fully normalized configuration dict."""

    def __init__(self, raw):
        self.raw = raw
        self._validate()

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.raw == other.raw

    def __getitem__(self, key):
        return self.raw[key]

    # -- validation ----------------------------------------------------------

    def _validate(self):
        raw = self.raw
        if raw["mode"] not in MODES:
            raise ScenarioError(f"mode: {raw['mode']!r} is not one of {MODES}")
        dom = raw["domain"]
        if dom["dim"] not in (1, 2):
            raise ScenarioError("domain.dim: only 1 and 2 are supported")
        if len(dom["extent"]) != dom["dim"]:
            raise ScenarioError("domain.extent: one (lo, hi) pair per axis required")
        for a, b in dom["extent"]:
            if not b > a:
                raise ScenarioError(
                    f"domain.extent: degenerate axis ({a}, {b}); need lower < upper")
        d = dom["dim"]
        bas = raw["basis"]
        if bas["level"] < 0:
            raise ScenarioError("basis.level: must be >= 0")
        if bas["family"] and bas["family"] != ("hermite" if d == 1 else "bfs"):
            raise ScenarioError(
                f"basis.family: {bas['family']!r} unsupported for dim {d} "
                f"(use {'hermite' if d == 1 else 'bfs'})")
        mat = raw["material"]
        for key in ("mu_L", "kappa_L", "eps_b", "p_b"):
            if mat[key] <= 0:
                raise ScenarioError(f"material.{key}: must be positive")
        if mat["biot"]:
            for key in ("M_B", "m_e", "kappa_c"):
                if mat["biot"].get(key, 0.0) <= 0:
                    raise ScenarioError(f"material.biot.{key}: must be positive")
            if mat["biot"].get("beta", 0.0) < 0:
                raise ScenarioError("material.biot.beta: must be >= 0")
        ker = raw["kernel"]
        if ker["strength"] < 0:
            raise ScenarioError("kernel.strength: must be >= 0")
        if ker["strength"] > 0 and ker["gamma"] <= d / 2.0 - 1.0:
            raise ScenarioError(
                f"kernel.gamma: {ker['gamma']} violates gamma > d/2 - 1 = {d/2-1}")
        el = raw["electrostatics"]
        if el["enabled"]:
            if el["p_reg"] <= d:
                raise ScenarioError(
                    f"electrostatics.p_reg: {el['p_reg']} violates the "
                    f"regularization requirement p > d = {d}")
            if el["eps0"] <= 0:
                raise ScenarioError("electrostatics.eps0: must be positive")
            if el["eps1"] < 0:
                raise ScenarioError("electrostatics.eps1: must be >= 0")
            if el["R"] <= 0:
                raise ScenarioError("electrostatics.R: must be positive")
        tl = raw["tolerances"]
        if tl["det_floor"] <= 0:
            raise ScenarioError("tolerances.det_floor: must be positive")
        tm = raw["time"]
        if tm["dt"] <= 0:
            raise ScenarioError("time.dt: must be positive")
        if tm["T"] < 0:
            raise ScenarioError("time.T: must be >= 0")
        dif = raw["diffusion"]
        if dif["enabled"]:
            if not mat["biot"]:
                raise ScenarioError(
                    "diffusion.enabled: requires material.biot parameters")
            M0 = np.atleast_2d(np.asarray(dif["M0"], dtype=float))
            if M0.shape != (d, d):
                raise ScenarioError(f"diffusion.M0: must be a {d}x{d} SPD matrix")
            if np.linalg.eigvalsh(0.5 * (M0 + M0.T)).min() <= 0:
                raise ScenarioError("diffusion.M0: must be SPD")
            if dif["coupling"] not in ("staggered", "fixed_point"):
                raise ScenarioError(
                    "diffusion.coupling: must be 'staggered' or 'fixed_point'")
        if raw["loads"]["alpha"] < 0:
            raise ScenarioError("loads.alpha: must be >= 0")
        # expressions parse and have the right arity (also enforces that
        # q_ext is time-independent)
        self._expressions()

    def _expressions(self):
        raw = self.raw
        d = raw["domain"]["dim"]
        ex = {}
        ex["rho"] = Expression(raw["material"]["rho"], d, name="material.rho")
        ex["q"] = Expression(raw["charge"]["q"], d, name="charge.q")
        ex["q_ext"] = Expression(raw["charge"]["q_ext"], d, allow_t=False,
                                 name="charge.q_ext")
        chi0 = raw["initial"]["chi0"]
        if chi0:
            ex["chi0"] = VectorExpression(chi0, d, name="initial.chi0")
        else:
            ex["chi0"] = VectorExpression(["x", "y"][:d], d, name="initial.chi0")
        v0 = raw["initial"]["v0"]
        if v0:
            ex["v0"] = VectorExpression(v0, d, allow_t=False, name="initial.v0")
        else:
            if raw["mode"] == "dynamic":
                warnings.warn("initial.v0 missing; defaulting to the zero field")
            ex["v0"] = VectorExpression(["0"] * d, d, name="initial.v0")
        ex["m0"] = Expression(raw["initial"]["m0"], d, name="initial.m0")
        if raw["loads"]["f"]:
            ex["f"] = VectorExpression(raw["loads"]["f"], d, allow_t=True,
                                       name="loads.f")
        if raw["loads"]["g"]:
            ex["g"] = VectorExpression(raw["loads"]["g"], d, allow_t=True,
                                       name="loads.g")
        ex["mu_flat"] = Expression(raw["loads"]["mu_flat"], d, allow_t=True,
                                   name="loads.mu_flat")
        return ex

    # -- construction ----------------------------------------------------------

    def build(self):
        """Construct the runnable bundle (system, loads, initial state, meta)."""
        raw = self.raw
        d = raw["domain"]["dim"]
        ex = self._expressions()
        domain = ReferenceDomain(raw["domain"]["extent"])
        basis = build_basis(domain, raw["basis"]["level"],
                            family=raw["basis"]["family"] or None,
                            base_elements=raw["basis"]["base_elements"])
        model_kwargs = dict(mu_L=raw["material"]["mu_L"],
                            kappa_L=raw["material"]["kappa_L"],
                            eps_b=raw["material"]["eps_b"],
                            p_b=raw["material"]["p_b"])
        if raw["material"]["biot"]:
            b = raw["material"]["biot"]
            model_kwargs.update(M_B=b["M_B"], beta=b.get("beta", 0.0),
                                m_e=b["m_e"], kappa_c=b["kappa_c"])
        model = StoredEnergyModel(**model_kwargs)
        delta = raw["kernel"]["delta"] or float(np.linalg.norm(basis.h))
        kernel = NonlocalKernel(gamma=raw["kernel"]["gamma"],
                                strength=raw["kernel"]["strength"],
                                delta=delta, dim=d)
        model.check_barrier_exponent(d, kernel.gamma)
        op = NonlocalOperator(kernel, basis)
        M = mass_matrix(basis, ex["rho"])
        elec_params = elec_mesh = None
        q_fun = grad_q_fun = None
        el = raw["electrostatics"]
        if el["enabled"]:
            elec_params = ElectrostaticParams(
                eps0=el["eps0"], eps1=el["eps1"], p_reg=el["p_reg"],
                R=el["R"], cells=el["cells"], tol=el["tol"]).validate(d)
            elec_mesh = SpatialMesh.box(d, el["R"], el["cells"])
            if not raw["diffusion"]["enabled"] and not ex["q"].is_zero():
                q_fun = ex["q"]
                grad_q_fun = ex["q"].spatial_gradient()
        loads = LoadSpec(
            f=None if "f" not in ex or ex["f"].is_zero() else ex["f"],
            g=None if "g" not in ex or ex["g"].is_zero() else ex["g"],
            q_ext=None if ex["q_ext"].is_zero() else ex["q_ext"],
            mu_flat=ex["mu_flat"],
            alpha=raw["loads"]["alpha"],
        )
        if loads.g is not None:
            loads.g_dot = ex["g"].time_derivative_callable()
        system = System(
            basis=basis, model=model, nonlocal_op=op, mass=M,
            elec_params=elec_params, elec_mesh=elec_mesh,
            q_fun=q_fun, grad_q_fun=grad_q_fun,
            charge_from_m=raw["diffusion"]["enabled"] and el["enabled"],
            charge_factor=raw["charge"]["charge_factor"],
            det_floor=raw["tolerances"]["det_floor"],
            newton_tol=raw["tolerances"]["newton_tol"],
            newton_max=raw["tolerances"]["newton_max"],
            dt_min_factor=raw["time"]["dt_min_factor"],
            coupling_subdiv=el["coupling_subdiv"],
        )
        chi = self._interpolate_map(basis, ex["chi0"])
        chidot = self._interpolate_map(basis, ex["v0"])
        mech = DeformationState.from_coeffs(basis, chi, chidot)
        diff = None
        if raw["diffusion"]["enabled"]:
            space = make_diffusion_space(domain, raw["diffusion"]["cells"])
            params = DiffusionParams(
                M0=np.atleast_2d(np.asarray(raw["diffusion"]["M0"], dtype=float)),
                alpha=raw["loads"]["alpha"], mu_flat=ex["mu_flat"])
            m0 = np.array([ex["m0"](*xy) for xy in space.nodes])
            if np.any(m0 < model.m_floor):
                raise ScenarioError(
                    "initial.m0: initial concentration below the positivity floor")
            diff = DiffusionState(space, m0, np.zeros(space.n_dofs), params)
        return {"system": system, "loads": loads, "mech": mech, "diff": diff,
                "kernel": kernel, "domain": domain, "expressions": ex}

    @staticmethod
    def _interpolate_map(basis, vec_expr):
        d = basis.domain.dim
        chi = np.zeros((d, basis.dofs_per_component))
        for i, part in enumerate(vec_expr.parts):
            if d == 1:
                ders = {(0,): part, (1,): part.derivative((1,))}
            else:
                ders = {(0, 0): part, (1, 0): part.derivative((1, 0)),
                        (0, 1): part.derivative((0, 1)),
                        (1, 1): part.derivative((1, 1))}
            chi[i] = basis.interpolate(ders)
        return chi

    def serialize(self):
        return dumps_toml(self.raw)


def parse_scenario(path_or_text, overrides=None):
    """Load, normalize and validate a scenario TOML file (or literal text)."""
    if isinstance(path_or_text, (bytes, str)) and "\n" in str(path_or_text):
        text = path_or_text if isinstance(path_or_text, str) else path_or_text.decode()
        data = tomli.loads(text)
    else:
        with open(path_or_text, "rb") as fh:
            try:
                data = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ScenarioError(f"{path_or_text}: TOML parse error: {exc}") from exc
    raw = _merge(_DEFAULTS, data)
    if overrides:
        for key, val in overrides.items():
            _apply_override(raw, key, val)
    return Scenario(raw)


def _apply_override(raw, dotted, value):
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ScenarioError(f"override {dotted}: unknown table {p!r}")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node and parts[0] != "material":
        raise ScenarioError(f"override {dotted}: unknown field")
    try:
        node[leaf] = tomli.loads(f"v = {value}")["v"]
    except tomli.TOMLDecodeError:
        node[leaf] = value  # bare string


# ---------------------------------------------------------------------------
# minimal TOML emitter (tomli has no writer; the schema is plain enough)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def dumps_toml(data):
    """Serialize the normalized scenario dict back to TOML text."""
    out = io.StringIO()
    scalars = {k: v for k, v in data.items() if not isinstance(v, dict)}
    for k, v in scalars.items():
        out.write(f"{k} = {_fmt(v)}\n")

    def write_table(name, table):
        subs = {k: v for k, v in table.items() if isinstance(v, dict)}
        plain = {k: v for k, v in table.items() if not isinstance(v, dict)}
        out.write(f"\n[{name}]\n")
        for k, v in plain.items():
            out.write(f"{k} = {_fmt(v)}\n")
        for k, v in subs.items():
            if v:
                write_table(f"{name}.{k}", v)

    for k, v in data.items():
        if isinstance(v, dict):
            write_table(k, v)
    return out.getvalue()
