"""Static SVG figures, each rebuilt from the CSVs of a run directory."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src.settings import LOCAL_OVERLAY_WINDOW  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "sahmm-vae"
plt.rcParams["svg.fonttype"] = "none"

_TRACE_PARAMETERS = {
    "means": "state means",
    "variances": "state variances",
    "ar_means": "AR means",
    "ar_coefs": "AR coefficients",
    "innov_variances": "innovation variances",
    "scales": "innovation scales",
    "flow_skew": "flow skew",
    "flow_tail": "flow tail weight",
}


def _save(fig: plt.Figure, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _source_ids(frame: pd.DataFrame, prefix: str) -> list[int]:
    return sorted(int(c.split("_")[-1]) for c in frame.columns if c.startswith(prefix))


def plot_loss(run_dir: Path) -> Path:
    """Loss components and per-source |corr| against epoch."""
    frame = pd.read_csv(run_dir / "loss.csv")
    fig, (ax_loss, ax_corr) = plt.subplots(1, 2, figsize=(10, 3.5))
    for column in ("total", "rec"):
        ax_loss.plot(frame["epoch"], frame[column], label=column)
    ax_loss.plot(frame["epoch"], frame["logq"] - frame["logp"], label="logq - logp")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_yscale("symlog")
    ax_loss.legend()
    for j in _source_ids(frame, "corr_"):
        ax_corr.plot(frame["epoch"], frame[f"corr_{j}"], label=f"source {j}")
    ax_corr.set_ylim(0.0, 1.05)
    ax_corr.set_xlabel("epoch")
    ax_corr.set_ylabel("|corr|")
    ax_corr.legend()
    return _save(fig, run_dir / "loss.svg")


def plot_prior_trace(run_dir: Path) -> Path:
    """Evolution of the state parameters, transition diagonals and posterior variances."""
    frame = pd.read_csv(run_dir / "prior_trace.csv")
    names = [p for p in _TRACE_PARAMETERS if p in set(frame["parameter"])]
    panels = ["A", *names, "posterior_variance"]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3), squeeze=False)
    for ax, name in zip(axes[0], panels, strict=True):
        subset = frame[frame["parameter"] == name]
        if name == "A":
            subset = subset[subset["row"] == subset["col"]]
        for (source, row, col), group in subset.groupby(["source", "row", "col"]):
            label = f"s{source}" if name == "posterior_variance" else f"s{source} k{col}"
            ax.plot(group["epoch"], group["value"], label=label)
        title = {"A": "self-transition", "posterior_variance": "posterior variances"}
        ax.set_title(title.get(name, _TRACE_PARAMETERS.get(name, name)), fontsize=9)
        ax.set_xlabel("epoch")
        ax.legend(fontsize=6)
    return _save(fig, run_dir / "prior_trace.svg")


def plot_sources(run_dir: Path) -> Path:
    frame = pd.read_csv(run_dir / "sources.csv")
    ids = _source_ids(frame, "true_")
    fig, axes = plt.subplots(len(ids), 1, figsize=(10, 2.2 * len(ids)), squeeze=False)
    for ax, j in zip(axes[:, 0], ids, strict=True):
        ax.plot(frame["t"], frame[f"true_{j}"], lw=0.8, label="true")
        ax.plot(frame["t"], frame[f"est_{j}"], lw=0.8, ls="--", label="estimated")
        ax.set_ylabel(f"source {j}")
        ax.legend(loc="upper right", fontsize=7)
    axes[-1, 0].set_xlabel("t")
    return _save(fig, run_dir / "sources.svg")


def plot_states(run_dir: Path) -> Path:
    frame = pd.read_csv(run_dir / "states.csv")
    ids = _source_ids(frame, "true_")
    fig, axes = plt.subplots(len(ids), 1, figsize=(10, 1.8 * len(ids)), squeeze=False)
    for ax, j in zip(axes[:, 0], ids, strict=True):
        ax.step(frame["t"], frame[f"true_{j}"], where="post", label="true")
        ax.step(frame["t"], frame[f"matched_{j}"] + 0.05, where="post", label="decoded")
        ax.set_ylabel(f"source {j}")
        ax.legend(loc="upper right", fontsize=7)
    axes[-1, 0].set_xlabel("t")
    return _save(fig, run_dir / "states.svg")


def plot_overlay(run_dir: Path, window: int = LOCAL_OVERLAY_WINDOW) -> Path:
    """Local window of estimated source with true and decoded state paths on a twin axis."""
    sources = pd.read_csv(run_dir / "sources.csv").head(window)
    states = pd.read_csv(run_dir / "states.csv").head(window)
    ids = _source_ids(sources, "true_")
    fig, axes = plt.subplots(len(ids), 1, figsize=(10, 2.4 * len(ids)), squeeze=False)
    for ax, j in zip(axes[:, 0], ids, strict=True):
        ax.plot(sources["t"], sources[f"true_{j}"], lw=0.8, color="0.6", label="true source")
        ax.plot(sources["t"], sources[f"est_{j}"], lw=0.8, label="estimated source")
        twin = ax.twinx()
        twin.step(states["t"], states[f"true_{j}"], where="post", color="tab:green", lw=0.8)
        twin.step(states["t"], states[f"matched_{j}"], where="post", color="tab:red", lw=0.8, ls=":")
        twin.set_ylabel("state")
        ax.set_ylabel(f"source {j}")
        ax.legend(loc="upper left", fontsize=7)
    axes[-1, 0].set_xlabel("t")
    return _save(fig, run_dir / "overlay.svg")


def plot_transitions(run_dir: Path) -> Path:
    """Heatmaps of learned and empirical matrices, one column per source."""
    frame = pd.read_csv(run_dir / "transitions.csv")
    kinds = list(dict.fromkeys(frame["matrix"]))
    sources = sorted(frame["source"].unique())
    fig, axes = plt.subplots(
        len(kinds), len(sources), figsize=(3 * len(sources), 2.8 * len(kinds)), squeeze=False
    )
    for r, kind in enumerate(kinds):
        for c, source in enumerate(sources):
            subset = frame[(frame["matrix"] == kind) & (frame["source"] == source)]
            K = int(subset["row"].max())
            grid = np.zeros((K, K))
            grid[subset["row"] - 1, subset["col"] - 1] = subset["value"]
            ax = axes[r, c]
            ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
            for a in range(K):
                for b in range(K):
                    ax.text(b, a, f"{grid[a, b]:.2f}", ha="center", va="center", fontsize=7, color="w")
            ax.set_title(f"{kind}, source {source}", fontsize=9)
            ax.set_xticks(range(K), [str(k + 1) for k in range(K)])
            ax.set_yticks(range(K), [str(k + 1) for k in range(K)])
    return _save(fig, run_dir / "transitions.svg")


def render_all(run_dir: str | Path) -> list[Path]:
    """Regenerate every figure whose CSV exists in ``run_dir``."""
    run_dir = Path(run_dir)
    plotters = [
        (("loss.csv",), plot_loss),
        (("prior_trace.csv",), plot_prior_trace),
        (("sources.csv",), plot_sources),
        (("states.csv",), plot_states),
        (("sources.csv", "states.csv"), plot_overlay),
        (("transitions.csv",), plot_transitions),
    ]
    written = []
    for csv_names, plotter in plotters:
        if all((run_dir / name).exists() for name in csv_names):
            written.append(plotter(run_dir))
    logger.info(f"Wrote {len(written)} figures to {run_dir}")
    return written
