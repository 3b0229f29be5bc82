"""Figures written next to the CSV/text outputs of the CLI."""
from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# no timestamps/versions in the PNG, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: str | os.PathLike) -> None:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_losses(steps: Sequence[dict], val: Sequence[dict], path: str | os.PathLike) -> None:
    """Per-step generator/discriminator losses and per-epoch validation L1/IoU."""
    with plt.rc_context(_RC):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.2))
        if steps:
            s = np.array([r["step"] for r in steps])
            for key, label in (("l_sup", "supervise"), ("l_rec", "reconstruct"), ("l_pix", "pixel L1"),
                               ("l_adv_d", "adv (D)"), ("l_adv_g", "adv (G)")):
                vals = np.array([r.get(key, 0.0) for r in steps], dtype=float)
                if np.any(vals):
                    ax0.plot(s, vals, lw=0.9, label=label)
            ax0.set_yscale("log")
            ax0.set_xlabel("step")
            ax0.set_ylabel("loss")
            if ax0.lines:
                ax0.legend(frameon=False)
        if val:
            e = [r["epoch"] for r in val]
            ax1.plot(e, [r["val_l1"] for r in val], "o-", ms=3, label="val L1")
            ax1.plot(e, [r["val_iou"] for r in val], "s-", ms=3, label="val IoU")
            ax1.set_xlabel("epoch")
            ax1.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_samples(rows: Sequence[tuple[np.ndarray, ...]], path: str | os.PathLike,
                 titles: Sequence[str] = ("input", "output", "target")) -> None:
    """Grid of uint8 images, one row per sample."""
    if not rows:
        return
    ncol = len(rows[0])
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(len(rows), ncol, figsize=(1.3 * ncol, 1.3 * len(rows)), squeeze=False)
        for i, row in enumerate(rows):
            for j, img in enumerate(row):
                ax = axes[i][j]
                ax.imshow(img, cmap="gray_r", vmin=0, vmax=255, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0 and j < len(titles):
                    ax.set_title(titles[j])
        fig.tight_layout()
        _save(fig, path)
