"""Energy bookkeeping and convergence studies.

The ledger keeps one row per accepted step with the kinetic, stored,
nonlocal and electrostatic energies (field and charge-coupling parts
separately), cumulative dissipation, the external-work integrals split by
source, the energy-balance residual

    [T + E](t) - [T + E](0) + D_cum - (W_f + W_g + W_mu + W_qext),

and the determinant-monitor minimum.  Columns are exported to CSV in a
fixed schema; anything extra (alternative work accounting, solver stats)
goes to the run's diag.json instead.
"""

from __future__ import annotations

import numpy as np

from . import electrostatics as es
from .dynamics import kinetic_energy, boundary_traction_pairing
from .energy import stored_energy

__all__ = [
    "LEDGER_COLUMNS",
    "EnergyLedger",
    "ledger_update",
    "total_energy",
    "energy_columns",
    "richardson_rates",
    "convergence_study",
]

LEDGER_COLUMNS = (
    "t", "dt", "T_kin", "E_store", "E_nonlocal", "E_elec_field",
    "E_elec_coupling", "D_cum", "W_f", "W_g", "W_mu", "W_qext",
    "residual", "min_det",
)


def energy_columns(system, state):
    """Kinetic, stored, nonlocal and electrostatic energies of a state."""
    mech = state.mech
    w = mech.basis.quad.weights
    if system.model.has_biot and state.diff is not None:
        m_quad = state.diff.space.eval(state.diff.m, mech.basis.quad.points)
        phi_vals = stored_energy(system.model, mech.F, m_quad)
    else:
        phi_vals = stored_energy(system.model, mech.F)
    E_store = float(np.sum(w * phi_vals))
    E_nl = system.nonlocal_op.energy(mech)
    E_field = 0.0
    E_cpl = 0.0
    if state.pot is not None:
        E_field = es.field_energy(state.pot)
        coupling = state.info.get("coupling")
        if coupling is None:
            coupling = es.CouplingQuadrature(mech, state.pot.mesh,
                                             subdiv=system.coupling_subdiv)
        q_vals = system.charge_values(coupling, state.diff)
        if q_vals is not None:
            E_cpl = coupling.coupling_energy(q_vals, state.pot)
    T = kinetic_energy(system.mass, mech.chidot)
    return {"T_kin": T, "E_store": E_store, "E_nonlocal": E_nl,
            "E_elec_field": E_field, "E_elec_coupling": E_cpl}


def total_energy(system, state):
    """T + E evaluated independently of any ledger row."""
    c = energy_columns(system, state)
    return (c["T_kin"] + c["E_store"] + c["E_nonlocal"]
            + c["E_elec_coupling"] - c["E_elec_field"])


class EnergyLedger:
    """Append-only per-step energy record with CSV export."""

    def __init__(self):
        self.rows = []
        self.extras = []

    def append(self, row, extra=None):
        self.rows.append({k: float(row[k]) for k in LEDGER_COLUMNS})
        self.extras.append(extra or {})

    @property
    def first(self):
        return self.rows[0]

    @property
    def last(self):
        return self.rows[-1]

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def row_total_energy(self, row):
        return (row["T_kin"] + row["E_store"] + row["E_nonlocal"]
                + row["E_elec_coupling"] - row["E_elec_field"])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(LEDGER_COLUMNS) + "\n")
            for r in self.rows:
                fh.write(",".join("%.17e" % r[k] for k in LEDGER_COLUMNS) + "\n")

    @staticmethod
    def read_csv(path):
        data = np.genfromtxt(path, delimiter=",", names=True)
        return data


def ledger_update(ledger, system, state, loads=None, dt=0.0, min_det=None):
    """Build and append the row for an accepted state.

    Cumulative columns (D_cum, W_*) extend the previous row using the step
    increments the stepper stored in state.info; the balance residual uses
    the ledger's first row as the reference time.
    """
    cols = energy_columns(system, state)
    prev = ledger.last if ledger.rows else None
    info = state.info
    row = dict(cols)
    row["t"] = state.t
    row["dt"] = dt
    row["D_cum"] = (prev["D_cum"] if prev else 0.0) + info.get("dD", 0.0)
    row["W_f"] = (prev["W_f"] if prev else 0.0) + info.get("dW_f", 0.0)
    row["W_g"] = (prev["W_g"] if prev else 0.0) + info.get("dW_g", 0.0)
    row["W_mu"] = (prev["W_mu"] if prev else 0.0) + info.get("dW_mu", 0.0)
    row["W_qext"] = (prev["W_qext"] if prev else 0.0) + info.get("dW_qext", 0.0)
    if min_det is None:
        rep = info.get("det_report")
        min_det = rep.min_det if rep is not None else float(np.min(state.mech.detF))
    row["min_det"] = min_det
    if prev is None:
        row["residual"] = 0.0
    else:
        first = ledger.first
        E_now = ledger_total(row)
        E_0 = ledger_total(first)
        work = row["W_f"] + row["W_g"] + row["W_mu"] + row["W_qext"]
        row["residual"] = E_now - E_0 + row["D_cum"] - work
    extra = {}
    if loads is not None and loads.g is not None and loads.g_dot is not None:
        # alternative traction-work accounting, integrated by parts in time
        # (trapezoid accumulation of the g-dot pairing)
        chi = state.mech.chi
        gdot_pair = boundary_traction_pairing(
            system.basis, type(loads)(g=loads.g_dot), state.t, chi)
        g_now = boundary_traction_pairing(system.basis, loads, state.t, chi)
        if ledger.rows:
            prev = ledger.extras[-1]
            accum = prev.get("W_g_alt_accum", 0.0) \
                + 0.5 * dt * (prev.get("gdot_pair", gdot_pair) + gdot_pair)
            extra["W_g_alt_accum"] = accum
            extra["gdot_pair"] = gdot_pair
            g_0 = ledger.extras[0]["g_chi_0"]
            extra["W_g_alt"] = g_now - g_0 - accum
        else:
            extra["g_chi_0"] = g_now
            extra["gdot_pair"] = gdot_pair
            extra["W_g_alt_accum"] = 0.0
            extra["W_g_alt"] = 0.0
    ledger.append(row, extra)
    return row


def ledger_total(row):
    return (row["T_kin"] + row["E_store"] + row["E_nonlocal"]
            + row["E_elec_coupling"] - row["E_elec_field"])


# ---------------------------------------------------------------------------
# convergence studies


def richardson_rates(values, observables):
    """Observed orders from successive differences of a scalar observable.

    `values` must refine geometrically (constant ratio); the rate between
    triple (i, i+1, i+2) is log(|o_i - o_{i+1}| / |o_{i+1} - o_{i+2}|) /
    log(ratio).  Also reports whether the differences shrink monotonically.
    """
    values = np.asarray(values, dtype=float)
    obs = np.asarray(observables, dtype=float)
    if len(values) < 3:
        raise ValueError("need at least 3 values on the study axis")
    ratios = values[:-1] / values[1:]
    if np.max(np.abs(ratios / ratios[0] - 1.0)) > 1e-9:
        raise ValueError("study axis must refine by a constant ratio")
    r = abs(ratios[0])
    diffs = np.abs(np.diff(obs))
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.log(diffs[:-1] / diffs[1:]) / np.log(r)
    monotone = bool(np.all(np.diff(diffs) <= 0.0))
    return {"values": values.tolist(), "observables": obs.tolist(),
            "differences": diffs.tolist(), "rates": rates.tolist(),
            "refinement_ratio": float(r), "monotone": monotone}


def convergence_study(run_observable, values, label=""):
    """Run `run_observable(value)` along the axis and fit observed orders.

    Non-monotone difference decay is reported (not raised) in the table.
    """
    obs = [float(run_observable(v)) for v in values]
    table = richardson_rates(values, obs)
    table["axis"] = label
    return table
