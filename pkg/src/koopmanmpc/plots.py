"""Figure rendering for the experiment reports."""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .plants import Trajectory

METHODS = ["dmd", "edmd", "bedmd", "nmpc"]
LABELS = {"dmd": "DMD (MPC)", "edmd": "EDMD (MPC)",
          "bedmd": "bEDMD (K-NMPC)", "nmpc": "NMPC benchmark"}
COLORS = {"dmd": "tab:blue", "edmd": "tab:orange",
          "bedmd": "tab:green", "nmpc": "tab:red"}
STATE_NAMES = ["y", "z", r"$\theta$", r"$\dot{y}$", r"$\dot{z}$", r"$\dot{\theta}$"]


def _read_summary(path):
    rows = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            cells = line.strip().split(",")
            rows[cells[0]] = {h: c for h, c in zip(header, cells)}
    return rows


def plot_open_loop(out_dir: str, fig_dir: str) -> None:
    path = os.path.join(out_dir, "open_loop_summary.csv")
    if not os.path.exists(path):
        return
    rows = _read_summary(path)
    methods = [m for m in ("dmd", "edmd", "bedmd") if m in rows]
    means = [float(rows[m]["mse_mean"]) for m in methods]
    stds = [float(rows[m]["mse_std"]) for m in methods]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(range(len(methods)), means, yerr=stds, capsize=4,
           color=[COLORS[m] for m in methods])
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels([LABELS[m].split(" ")[0] for m in methods])
    ax.set_ylabel("open-loop MSE")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(os.path.join(fig_dir, "open_loop_mse.png"), dpi=150)
    plt.close(fig)


def _plot_traces(files, fig_path, reference=None):
    fig, axes = plt.subplots(2, 4, figsize=(13, 5.5), sharex=True)
    for method, (traj, style) in files.items():
        t = traj.times
        for i in range(6):
            ax = axes[i // 3][i % 3]
            ax.plot(t, traj.states[:, i], style, color=COLORS[method],
                    label=LABELS[method] if i == 0 and style == "-" else None,
                    linewidth=1.2)
        for i in range(traj.inputs.shape[1]):
            ax = axes[i][3]
            ax.step(t[:-1], traj.inputs[:, i], style, color=COLORS[method],
                    where="post", linewidth=1.0)
    if reference is not None:
        t = reference.times
        for i in range(6):
            ax = axes[i // 3][i % 3]
            ax.plot(t, reference.states[:, i], ":", color="black", linewidth=1.0)
    for i in range(6):
        ax = axes[i // 3][i % 3]
        ax.set_title(STATE_NAMES[i])
    axes[0][3].set_title("$T_1$")
    axes[1][3].set_title("$T_2$")
    for ax in axes[1]:
        ax.set_xlabel("t [s]")
    handles, labels = axes[0][0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc="lower center", ncol=len(handles),
                   frameon=False)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)


def plot_trajgen(out_dir: str, fig_dir: str) -> None:
    files = {}
    for method in METHODS:
        planned = os.path.join(out_dir, f"trajgen_trace_{method}_planned.csv")
        realized = os.path.join(out_dir, f"trajgen_trace_{method}_realized.csv")
        if os.path.exists(planned):
            files[method] = (Trajectory.from_csv(planned), "-")
        if os.path.exists(realized):
            files[method + "_r"] = (Trajectory.from_csv(realized), "--")
    if not files:
        return
    planned = {m: files[m] for m in METHODS if m in files}
    _plot_traces(planned, os.path.join(fig_dir, "trajgen_traces.png"))
    realized_combined = {m: files[m + "_r"] for m in METHODS if m + "_r" in files}
    if realized_combined:
        _plot_traces(realized_combined,
                     os.path.join(fig_dir, "trajgen_realized_traces.png"))


def plot_closed_loop(out_dir: str, fig_dir: str) -> None:
    files = {}
    for method in METHODS:
        path = os.path.join(out_dir, f"closed_loop_trace_{method}.csv")
        if os.path.exists(path):
            files[method] = (Trajectory.from_csv(path), "-")
    if not files:
        return
    ref_path = os.path.join(out_dir, "closed_loop_reference.csv")
    reference = Trajectory.from_csv(ref_path) if os.path.exists(ref_path) else None
    _plot_traces(files, os.path.join(fig_dir, "closed_loop_traces.png"),
                 reference=reference)


def render_all(out_dir: str) -> None:
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    plot_open_loop(out_dir, fig_dir)
    plot_trajgen(out_dir, fig_dir)
    plot_closed_loop(out_dir, fig_dir)
