"""Figure rendering for completed runs: energy traces, balance residual and
determinant monitor, written as PNG files alongside the ledger CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_run"]


def render_run(out_dir):
    """Render the standard figures for the run directory's ledger.csv."""
    out = Path(out_dir)
    data = np.genfromtxt(out / "ledger.csv", delimiter=",", names=True)
    data = np.atleast_1d(data)
    figdir = out / "figures"
    figdir.mkdir(exist_ok=True)
    t = data["t"]

    fig, ax = plt.subplots(figsize=(7, 4.2))
    for name, label in (("T_kin", "kinetic"), ("E_store", "stored"),
                        ("E_nonlocal", "nonlocal"),
                        ("E_elec_field", "electrostatic field"),
                        ("E_elec_coupling", "charge coupling")):
        col = np.atleast_1d(data[name])
        if np.any(col != 0.0):
            ax.plot(t, col, label=label, lw=1.2)
    total = (data["T_kin"] + data["E_store"] + data["E_nonlocal"]
             + data["E_elec_coupling"] - data["E_elec_field"])
    ax.plot(t, np.atleast_1d(total), "k--", label="total", lw=1.5)
    ax.set_xlabel("t")
    ax.set_ylabel("energy")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("energy traces")
    fig.tight_layout()
    fig.savefig(figdir / "energies.png", dpi=130)
    plt.close(fig)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    axes[0].plot(t, np.atleast_1d(data["residual"]), lw=1.0)
    axes[0].set_xlabel("t")
    axes[0].set_title("energy-balance residual")
    dcum = np.atleast_1d(data["D_cum"])
    if np.any(dcum != 0.0):
        axes[1].plot(t, dcum, lw=1.0, color="tab:red")
        axes[1].set_title("cumulative dissipation")
    else:
        drift = np.abs(total - total.flat[0]) / max(abs(float(total.flat[0])), 1e-300)
        axes[1].semilogy(t, np.maximum(np.atleast_1d(drift), 1e-18), lw=1.0,
                         color="tab:red")
        axes[1].set_title("relative energy drift")
    axes[1].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(figdir / "balance.png", dpi=130)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(t, np.atleast_1d(data["min_det"]), lw=1.2)
    ax.set_xlabel("t")
    ax.set_ylabel("min det F")
    ax.set_title("determinant monitor")
    fig.tight_layout()
    fig.savefig(figdir / "min_det.png", dpi=130)
    plt.close(fig)

    traj = out / "trajectory.csv"
    if traj.exists():
        tdata = np.atleast_1d(np.genfromtxt(traj, delimiter=",", names=True))
        fig, ax = plt.subplots(figsize=(7, 3.2))
        for name in tdata.dtype.names[1:]:
            ax.plot(tdata["t"], np.atleast_1d(tdata[name]), label=name, lw=1.0)
        ax.set_xlabel("t")
        ax.set_title("probe trajectories")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(figdir / "probes.png", dpi=130)
        plt.close(fig)
    return figdir
