"""Report emission: delimited CSV outputs with rendered figures beside them."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .config import RunConfig
from .depth import DepthMatrix
from .fileio import write_csv
from .pipeline import CorpusItem, FusionModel
from .scenes import CorruptionSpec, DepthStats, inject_corruption


def _save_figure(fig, path) -> None:
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# attention-vs-depth profile


def attention_profile(model: FusionModel, corpus: list[CorpusItem], cfg: RunConfig,
                      conditions: tuple[str, ...] = ("clean", "image_noise")) -> list[dict]:
    """Mean attention mass received per image key cell, bucketed by cell depth.

    Rows: condition, bin_low, bin_high, mean_attention, n_cells. The noisy
    condition perturbs view features with the configured sigma.
    """
    depth_flat = model.depth_matrix.values.ravel()
    max_depth = float(depth_flat.max())
    width = cfg.profile.bin_width
    n_bins = max(int(math.ceil(max_depth / width)), 1)
    edges = np.arange(n_bins + 1, dtype=np.float64) * width
    bin_of = np.clip(np.searchsorted(edges, depth_flat, side="right") - 1, 0, n_bins - 1)

    rows = []
    for condition in conditions:
        mass_sum = np.zeros_like(depth_flat)
        for item in corpus:
            scene = item.scene
            dists = item.depth_dists
            if condition == "image_noise":
                spec = CorruptionSpec(kind="image_feature_noise",
                                      noise_sigma=cfg.corruption.noise_sigma,
                                      seed=cfg.corruption.seed)
                scene = inject_corruption(scene, spec)
            v_bev, i_bev, _ = model.bev_maps(scene, dists)
            mass_sum += model.global_block.attention_column_mass(
                v_bev, i_bev, model.pos_encoding, model.active_depth_encoding())
        mass = mass_sum / len(corpus)
        for b in range(n_bins):
            sel = bin_of == b
            rows.append({
                "condition": condition,
                "bin_low": float(edges[b]),
                "bin_high": float(edges[b + 1]),
                "mean_attention": float(mass[sel].mean()) if sel.any() else 0.0,
                "n_cells": int(sel.sum()),
            })
    return rows


def profile_mean_in_range(rows: list[dict], condition: str, low: float, high: float) -> float:
    """Cell-weighted mean attention over bins inside [low, high)."""
    total, cells = 0.0, 0
    for r in rows:
        if r["condition"] == condition and r["bin_low"] >= low and r["bin_high"] <= high:
            total += r["mean_attention"] * r["n_cells"]
            cells += r["n_cells"]
    return total / cells if cells else 0.0


def write_attention_profile(out_dir, rows: list[dict]) -> None:
    out_dir = Path(out_dir)
    write_csv(out_dir / "attention_profile.csv",
              ["condition", "bin_low", "bin_high", "mean_attention", "n_cells"],
              [(r["condition"], r["bin_low"], r["bin_high"], r["mean_attention"], r["n_cells"])
               for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for condition in sorted({r["condition"] for r in rows}):
        sel = [r for r in rows if r["condition"] == condition and r["n_cells"] > 0]
        mids = [(r["bin_low"] + r["bin_high"]) / 2 for r in sel]
        ax.plot(mids, [r["mean_attention"] for r in sel], marker="o", label=condition)
    ax.set_xlabel("cell depth (m)")
    ax.set_ylabel("mean attention mass per image cell")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_figure(fig, out_dir / "attention_profile.png")


# ---------------------------------------------------------------------------
# scene statistics


def write_depth_stats(out_dir, stats: DepthStats) -> None:
    out_dir = Path(out_dir)
    write_csv(out_dir / "stats.csv",
              ["bin_low", "bin_high", "mean_points", "mean_pixels", "n_objects"],
              stats.rows())
    mids = 0.5 * (stats.bin_edges[:-1] + stats.bin_edges[1:])
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.bar(mids, stats.mean_points, width=0.8 * np.diff(stats.bin_edges),
            color="tab:blue", alpha=0.7, label="points / object")
    ax1.set_xlabel("object depth (m)")
    ax1.set_ylabel("mean points per object", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(mids, stats.mean_pixels, color="tab:orange", marker="s", label="pixels / object")
    ax2.set_ylabel("mean projected pixels per object", color="tab:orange")
    fig.tight_layout()
    _save_figure(fig, out_dir / "stats.png")


# ---------------------------------------------------------------------------
# training curves and ablations


def write_loss_trace(out_dir, losses: list[float], name: str = "loss") -> None:
    out_dir = Path(out_dir)
    write_csv(out_dir / f"{name}.csv", ["step", "loss"],
              [(i, v) for i, v in enumerate(losses)])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(losses)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_figure(fig, out_dir / f"{name}.png")


def write_ablation_report(out_dir, results: list[dict]) -> None:
    """results: per-variant dicts with name, final_loss, and the loss trace."""
    out_dir = Path(out_dir)
    write_csv(out_dir / "ablation.csv", ["variant", "final_loss", "initial_loss"],
              [(r["name"], r["final_loss"], r["initial_loss"]) for r in results])
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in results:
        ax.plot(r["losses"], label=r["name"])
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_figure(fig, out_dir / "ablation.png")


# ---------------------------------------------------------------------------
# depth matrix dump


def write_depth_dump(out_dir, matrix: DepthMatrix) -> None:
    out_dir = Path(out_dir)
    w, h = matrix.grid.width, matrix.grid.height
    rows = [(x, y, float(matrix.values[x, y])) for x in range(w) for y in range(h)]
    write_csv(out_dir / "depth.csv", ["x", "y", "depth"], rows)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix.values.T, origin="lower", cmap="viridis")
    fig.colorbar(im, ax=ax, label="depth (m)")
    ax.set_xlabel("x cell")
    ax.set_ylabel("y cell")
    fig.tight_layout()
    _save_figure(fig, out_dir / "depth.png")
