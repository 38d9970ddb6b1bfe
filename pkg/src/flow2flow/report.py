"""Figures from the training metrics and sweep CSVs.

Renders with the Agg backend straight to files, next to the CSV unless told
otherwise. Returns the written paths so callers can list or check them.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError, DataError
from .evaluate import read_sweep_csv
from .training import METRICS_HEADER

__all__ = ["render_metrics_figures", "render_sweep_figures"]


def _read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        lines = f.read().strip().split("\n")
    if not lines or lines[0] != METRICS_HEADER:
        raise DataError(f"{path} does not start with the metrics header")
    cols = METRICS_HEADER.split(",")
    raw = [line.split(",") for line in lines[1:] if line]
    if not raw:
        raise DataError(f"{path} has no data rows")
    out: dict[str, np.ndarray] = {"phase": np.array([r[1] for r in raw])}
    for j, name in enumerate(cols):
        if name != "phase":
            out[name] = np.array([float(r[j]) for r in raw])
    return out


def _check_targets(paths, overwrite: bool):
    for p in paths:
        if os.path.exists(p) and not overwrite:
            raise ConfigError(f"{p} exists; pass overwrite to replace it")


def _save(fig, path):
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_metrics_figures(metrics_csv, out_dir=None, overwrite: bool = False) -> list[str]:
    m = _read_metrics(metrics_csv)
    out_dir = out_dir or os.path.dirname(os.path.abspath(metrics_csv))
    os.makedirs(out_dir, exist_ok=True)
    targets = [os.path.join(out_dir, name) for name in
               ("flow_losses.png", "adversarial_losses.png",
                "bits_per_dim.png", "latent_terms.png")]
    _check_targets(targets, overwrite)
    g = m["phase"] == "g"
    d = m["phase"] == "d"

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(m["iter"][g], m["l_flow_v"][g], label="flow NLL, visible", lw=1)
    ax.plot(m["iter"][g], m["l_flow_r"][g], label="flow NLL, infrared", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("Exact-likelihood terms")
    _save(fig, targets[0])

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(m["iter"][g], m["l_id_g"][g], label="identity, generator", lw=1)
    ax.plot(m["iter"][d], m["l_id_d"][d], label="identity, discriminator", lw=1)
    ax.plot(m["iter"][g], m["l_mod_g"][g], label="modality, generator", lw=1)
    ax.plot(m["iter"][d], m["l_mod_d"][d], label="modality, discriminator", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("Adversarial terms")
    _save(fig, targets[1])

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(m["iter"][g], m["bpd_v"][g], label="visible", lw=1)
    ax.plot(m["iter"][g], m["bpd_r"][g], label="infrared", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("bits/dim")
    ax.legend()
    ax.set_title("Bits per dimension")
    _save(fig, targets[2])

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(m["iter"][g], m["l_noise"][g], label="latent clustering", lw=1, color="tab:green")
    ax.set_xlabel("iteration")
    ax.set_ylabel("clustering loss")
    ax2 = ax.twinx()
    ax2.plot(m["iter"][g], m["sat_count"][g], label="artanh saturations",
             lw=1, color="tab:red")
    ax2.set_ylabel("saturation count")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2)
    ax.set_title("Latent-space terms")
    _save(fig, targets[3])
    return targets


def render_sweep_figures(sweep_csv, out_dir=None, overwrite: bool = False) -> list[str]:
    rows = read_sweep_csv(sweep_csv)
    out_dir = out_dir or os.path.dirname(os.path.abspath(sweep_csv))
    os.makedirs(out_dir, exist_ok=True)
    targets = [os.path.join(out_dir, "sweep_rank1.png"),
               os.path.join(out_dir, "sweep_map.png")]
    _check_targets(targets, overwrite)
    modes = sorted({r[0] for r in rows})
    for target, idx, label in ((targets[0], 2, "Rank-1"), (targets[1], 3, "mAP")):
        fig, ax = plt.subplots(figsize=(7, 4))
        for mode in modes:
            pts = sorted((r[1], r[idx]) for r in rows if r[0] == mode)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    label=f"expanded: {mode}")
        ax.set_xlabel("expansion multiple")
        ax.set_ylabel(label)
        ax.set_ylim(0.0, 1.05)
        ax.legend()
        ax.set_title(f"{label} vs. training-sample expansion")
        _save(fig, target)
    return targets
