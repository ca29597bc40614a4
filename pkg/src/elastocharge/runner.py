"""Scenario execution: the dynamic / static / diffusion / audit / study modes,
with ledger CSV, probe trajectories, JSON snapshots and diagnostics output.

All outputs are deterministic for a fixed scenario and seed: assembly and
reduction orders are fixed, and the only random sampling (audit mode) uses
the scenario seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import diffusion as df
from . import dynamics as dyn
from . import electrostatics as es
from .energy import InfeasibleStateError
from .scenario import Scenario, parse_scenario

__all__ = ["run", "run_path"]


def run_path(path, out_dir, overrides=None, mode=None, figures=None):
    scenario = parse_scenario(path, overrides=overrides)
    if mode:
        scenario.raw["mode"] = mode
        scenario = Scenario(scenario.raw)
    return run(scenario, out_dir, figures=figures)


def run(scenario, out_dir, figures=None):
    """Execute the scenario; returns the diagnostics dict written to diag.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "snapshots").mkdir(exist_ok=True)
    mode = scenario["mode"]
    t0 = time.time()
    do_figures = scenario["output"]["figures"] if figures is None else figures
    try:
        if mode == "dynamic":
            result = _run_dynamic(scenario, out)
        elif mode == "diffusion":
            result = _run_dynamic(scenario, out, freeze_mechanics=True)
        elif mode == "static":
            result = _run_static(scenario, out)
        elif mode == "audit":
            from .audit import run_audit
            result = run_audit(scenario, out)
        elif mode == "study":
            result = _run_study(scenario, out)
        else:  # pragma: no cover - validated earlier
            raise ValueError(mode)
        result["status"] = result.get("status", "ok")
    except dyn.StepRejected as exc:
        result = {"status": "det_floor_violation", "error": str(exc)}
        if exc.report is not None:
            result["det_report"] = exc.report.as_dict()
    result["mode"] = mode
    result["seed"] = scenario["seed"]
    result["wall_time_s"] = time.time() - t0
    with open(out / "diag.json", "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True, default=_json_default)
    if do_figures and mode in ("dynamic", "diffusion") and (out / "ledger.csv").exists():
        from .report import render_run
        render_run(out)
    return result


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _initial_state(bundle, loads):
    system = bundle["system"]
    mech = bundle["mech"]
    pot, coupling = dyn.solve_constraint(system, mech, loads, bundle["diff"])
    state = dyn.SimulationState(0.0, mech, pot, bundle["diff"],
                                info={"coupling": coupling})
    return state


def _snapshot(state, path):
    data = {
        "t": state.t,
        "chi": state.mech.chi.tolist(),
        "chidot": state.mech.chidot.tolist(),
        "min_det": float(np.min(state.mech.detF)),
    }
    if state.pot is not None:
        data["phi"] = state.pot.coeffs.tolist()
        data["phi_residual"] = state.pot.residual_norm
    if state.diff is not None:
        data["m"] = state.diff.m.tolist()
        data["mu"] = state.diff.mu.tolist()
    with open(path, "w") as fh:
        json.dump(data, fh)


def _run_dynamic(scenario, out, freeze_mechanics=False):
    bundle = scenario.build()
    system = bundle["system"]
    loads = bundle["loads"]
    raw = scenario.raw
    T = raw["time"]["T"]
    dt = raw["time"]["dt"]
    cadence = raw["output"]["cadence"]
    probes = np.asarray(raw["output"]["probes"], dtype=float) \
        if raw["output"]["probes"] else None
    diffusion_on = bundle["diff"] is not None
    fixed_point = raw["diffusion"]["coupling"] == "fixed_point"

    state = _initial_state(bundle, loads)
    ledger = diag.EnergyLedger()
    diag.ledger_update(ledger, system, state, loads, dt=0.0)
    probe_rows = []
    if probes is not None:
        probe_rows.append([0.0] + state.mech.map_points(probes).ravel().tolist())
    _snapshot(state, out / "snapshots" / ("step_%06d.json" % 0))

    step_idx = 0
    rejections = 0
    stepper = df.diffusion_step if diffusion_on else None
    failure = None
    try:
        while state.t < T - 1e-12:
            dt_req = min(dt, T - state.t)
            if freeze_mechanics:
                state = _frozen_mech_step(system, state, dt_req, loads, stepper)
            elif fixed_point and diffusion_on:
                state = dyn.step(system, state, dt_req, loads, stepper and
                                 _fixed_point_wrapper(stepper))
            else:
                state = dyn.step(system, state, dt_req, loads, stepper)
            step_idx += 1
            dt_used = state.info.get("dt", dt_req)
            if dt_used < dt_req * (1.0 - 1e-12):
                rejections += 1
            diag.ledger_update(ledger, system, state, loads, dt=dt_used)
            if probes is not None:
                probe_rows.append([state.t]
                                  + state.mech.map_points(probes).ravel().tolist())
            if cadence and step_idx % cadence == 0:
                _snapshot(state, out / "snapshots" / ("step_%06d.json" % step_idx))
    except dyn.StepRejected as exc:
        failure = exc
    ledger.to_csv(out / "ledger.csv")
    if probes is not None:
        with open(out / "trajectory.csv", "w") as fh:
            d = system.basis.domain.dim
            names = ["t"] + [f"probe{i}_{ax}" for i in range(len(probes))
                             for ax in "xy"[:d]]
            fh.write(",".join(names) + "\n")
            for row in probe_rows:
                fh.write(",".join("%.17e" % v for v in row) + "\n")
    _snapshot(state, out / "snapshots" / ("step_%06d.json" % step_idx))
    result = {
        "steps": step_idx,
        "rejections": rejections,
        "final_t": state.t,
        "final_row": ledger.last,
        "max_abs_residual": float(np.max(np.abs(ledger.column("residual")))),
        "min_det_over_run": float(np.min(ledger.column("min_det"))),
    }
    H = np.array([ledger.row_total_energy(r) for r in ledger.rows])
    scale = max(abs(H[0]), 1e-300)
    result["max_energy_drift_rel"] = float(np.max(np.abs(H - H[0])) / scale)
    alt = [e.get("W_g_alt") for e in ledger.extras if "W_g_alt" in e]
    if alt:
        wg = ledger.column("W_g")
        result["traction_work_alt_max_diff"] = float(
            np.max(np.abs(np.array(alt) - wg[:len(alt)])))
    if failure is not None:
        result["status"] = "det_floor_violation"
        result["error"] = str(failure)
        result["failed_at_step"] = step_idx + 1
        if failure.report is not None:
            result["det_report"] = failure.report.as_dict()
    return result


def _fixed_point_wrapper(stepper, iters=3):
    """Iterate the staggered mech/diffusion pair inside one step."""

    def wrapped(system, result, dt_used):
        new_diff, dinfo = stepper(system, result, dt_used)
        for _ in range(iters - 1):
            mid = result.diff.with_fields(
                m=0.5 * (result.diff.m + new_diff.m))
            retry = replace(result, diff=mid)
            new_diff, dinfo = stepper(system, retry, dt_used)
        return new_diff, dinfo

    return wrapped


def _frozen_mech_step(system, state, dt, loads, stepper):
    """Diffusion-only advance: mechanics (and potential source geometry) frozen."""
    dt_min = dt * system.dt_min_factor * 0.999
    dt_try = dt
    while dt_try >= dt_min:
        interim = dyn.SimulationState(state.t + dt_try, state.mech, state.pot,
                                      state.diff, info={"dt": dt_try})
        try:
            new_diff, dinfo = stepper(system, interim, dt_try)
        except (es.NewtonDivergenceError, InfeasibleStateError):
            dt_try *= 0.5
            continue
        pot = state.pot
        if system.has_electro and system.charge_from_m:
            pot, _ = dyn.solve_constraint(system, state.mech, loads, new_diff,
                                          warm=state.pot.coeffs if state.pot else None)
        return dyn.SimulationState(state.t + dt_try, state.mech, pot, new_diff,
                                   info={"dt": dt_try, **dinfo})
    raise dyn.StepRejected(f"diffusion step rejected at t = {state.t:.6g}")


def _run_static(scenario, out):
    bundle = scenario.build()
    system = bundle["system"]
    loads = bundle["loads"]
    state = _initial_state(bundle, loads)
    mech, E, iters = dyn.static_equilibrium(system, state, loads)
    pot, coupling = dyn.solve_constraint(system, mech, loads, state.diff)
    final = dyn.SimulationState(0.0, mech, pot, state.diff,
                                info={"coupling": coupling})
    ledger = diag.EnergyLedger()
    diag.ledger_update(ledger, system, final, loads, dt=0.0)
    ledger.to_csv(out / "ledger.csv")
    _snapshot(final, out / "snapshots" / ("step_%06d.json" % 0))
    from .dynamics import _forces, _m_at_quad, gauge_fixed_dofs
    m_quad = _m_at_quad(system, state.diff)
    R, _, _ = _forces(system, mech, 0.0, loads, m_quad, state.diff, None)
    free = np.setdiff1d(np.arange(R.size), gauge_fixed_dofs(system.basis))
    return {"equilibrium_energy": E, "iterations": iters,
            "final_row": ledger.last,
            "force_residual": float(np.linalg.norm(R.ravel()[free])),
            "min_det": float(np.min(mech.detF))}


def _run_study(scenario, out):
    raw = scenario.raw
    axis = raw["study"]["axis"]
    values = raw["study"]["values"]
    if axis not in ("dt", "level", "R"):
        raise ValueError(f"study.axis must be dt, level or R, got {axis!r}")
    if len(values) < 3:
        raise ValueError("study.values: need at least 3 values")
    observable = raw["study"]["observable"] or {
        "dt": "drift", "level": "static_energy", "R": "phi_on_body"}[axis]
    # a level study must compare minimizations of one fixed functional, so
    # an auto-sized kernel mollification radius is pinned from the coarsest
    # level before fanning out
    pinned_delta = None
    if axis == "level" and raw["kernel"]["delta"] == 0 \
            and raw["kernel"]["strength"] > 0:
        coarse = json_roundtrip(raw)
        coarse["basis"]["level"] = int(min(values))
        pinned_delta = float(np.linalg.norm(
            Scenario(coarse).build()["system"].basis.h))
    obs_vals = []
    for v in values:
        sub = json_roundtrip(raw)
        if pinned_delta is not None:
            sub["kernel"]["delta"] = pinned_delta
        subdir = out / "study" / f"{axis}_{v:g}"
        if axis == "dt":
            sub["time"]["dt"] = float(v)
            sub["mode"] = "dynamic"
        elif axis == "level":
            sub["basis"]["level"] = int(v)
            sub["mode"] = "static"
        else:
            sub["electrostatics"]["R"] = float(v)
            sub["mode"] = "dynamic" if observable in ("drift",
                                                      "probe_displacement") \
                else "static"
        sub["output"]["figures"] = False
        sub["study"]["values"] = []
        obs_vals.append(_observable(Scenario(sub), subdir, observable, axis))
    params = {"dt": np.asarray(values, dtype=float),
              "level": 2.0 ** -np.asarray(values, dtype=float),
              "R": 1.0 / np.asarray(values, dtype=float)}[axis]
    table = diag.richardson_rates(params, obs_vals)
    table["axis"] = axis
    table["axis_values"] = list(values)
    table["observable"] = observable
    with open(out / "rates.json", "w") as fh:
        json.dump(table, fh, indent=1, default=_json_default)
    return {"rates": table}


def json_roundtrip(raw):
    return json.loads(json.dumps(raw))


def _observable(scenario, subdir, observable, axis):
    if observable == "phi_on_body":
        # gauge-invariant field strength: a compactly supported net charge
        # has no decaying potential in d < 3, so raw phi carries an
        # R-dependent additive constant that forces never see
        bundle = scenario.build()
        system, loads = bundle["system"], bundle["loads"]
        state = _initial_state(bundle, loads)
        pts, _ = system.basis.monitor_points()
        img = state.mech.map_points(pts)
        g = state.pot.eval_grad(img)
        return float(np.max(np.linalg.norm(g, axis=1)))
    result = run(scenario, subdir, figures=False)
    if observable == "drift":
        return result["max_energy_drift_rel"]
    if observable == "static_energy":
        return result["equilibrium_energy"]
    if observable == "probe_displacement":
        data = np.genfromtxt(subdir / "trajectory.csv", delimiter=",", names=True)
        return float(np.atleast_1d(data[data.dtype.names[1]])[-1])
    raise ValueError(f"unknown study observable {observable!r}")
