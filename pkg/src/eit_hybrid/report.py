"""Figure output: ground-truth vs reconstruction panels and loss curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import GridSpec  # noqa: E402
from .grid_calculus import first_derivatives  # noqa: E402
from .pinn import TERMS  # noqa: E402


def derivative_panels(sigma: np.ndarray, grid: GridSpec) -> list[np.ndarray]:
    """sigma, d sigma/dx, d sigma/dy as N x N arrays; NaN off the disk / outside interior."""
    dx, dy = first_derivatives(sigma, grid)
    out = np.where(grid.mask, sigma, np.nan)
    nan = lambda v: np.where(grid.interior_mask, grid.to_full(v, grid.interior_ids), np.nan)
    return [out, nan(dx), nan(dy)]


def render_panels(sigma_gt, sigma_rec, grid: GridSpec, path, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [derivative_panels(np.asarray(sigma_gt, float), grid), derivative_panels(np.asarray(sigma_rec, float), grid)]
    names = ["sigma", "d sigma / dx", "d sigma / dy"]
    fig, axes = plt.subplots(3, 2, figsize=(6.4, 9.0))
    for c, (label, panels) in enumerate(zip(["ground truth", "reconstruction"], cols)):
        for r, img in enumerate(panels):
            ax = axes[r, c]
            ref = cols[0][r]
            lim = np.nanmax(np.abs(ref)) if r else None
            if r == 0:
                vmin = min(np.nanmin(cols[0][0]), np.nanmin(cols[1][0]))
                vmax = max(np.nanmax(cols[0][0]), np.nanmax(cols[1][0]))
                im = ax.imshow(img, origin="lower", extent=(-1, 1, -1, 1), vmin=vmin, vmax=vmax, cmap="viridis", interpolation="nearest")
            else:
                lim = lim if lim and np.isfinite(lim) and lim > 0 else 1.0
                im = ax.imshow(img, origin="lower", extent=(-1, 1, -1, 1), vmin=-lim, vmax=lim, cmap="RdBu_r", interpolation="nearest")
            ax.set_title(f"{label}: {names[r]}", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_loss_history(history: np.ndarray, path, title: str = "PINN loss") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    steps = np.arange(len(history))
    for k, name in enumerate((*TERMS, "total")):
        y = np.asarray(history[:, k])
        if np.any(y > 0):
            ax.semilogy(steps, np.where(y > 0, y, np.nan), lw=1.6 if name == "total" else 0.8, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_train_curves(train_loss, val_loss, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.semilogy(train_loss, label="train")
    ax.semilogy(val_loss, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked MSE (normalised)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_report(sigma_gt, sigma_rec, grid: GridSpec, history: np.ndarray, out_dir, case: str) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        render_panels(sigma_gt, sigma_rec, grid, out_dir / f"case_{case}_panels.png", f"case {case}"),
        render_loss_history(history, out_dir / f"case_{case}_loss.png", f"case {case}: PINN loss"),
    ]
