"""Transfer-only inference with median-filter clean-up."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .engine import no_grad
from .glyph_data import GlyphImage, from_tensor, load_pgm, preprocess, save_pgm, to_tensor
from .models import Network, forward_transfer


def median_filter(img: GlyphImage, k: int = 3) -> GlyphImage:
    """k x k median with edge replication; k must be odd."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 1, got {k}")
    if k == 1:
        return GlyphImage(img.pixels.copy())
    return GlyphImage(ndimage.median_filter(img.pixels, size=k, mode="nearest"))


def stylize(G: Network, img: GlyphImage, median: int = 3, threshold: int = 127) -> GlyphImage:
    """resize -> binarize -> transfer net (eval) -> threshold -> median filter."""
    side = G.cfg.image_size
    x = to_tensor(preprocess(img, side, threshold))
    G.eval()
    with no_grad():
        out, _ = forward_transfer(G, x)
    return median_filter(from_tensor(out), median)


def infer_files(
    G: Network,
    inputs: Sequence[str | os.PathLike],
    out_dir: str | os.PathLike,
    median: int = 3,
    threshold: int = 127,
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for src in inputs:
        src = Path(src)
        dst = out_dir / f"{src.stem}_styled.pgm"
        save_pgm(stylize(G, load_pgm(src), median, threshold), dst)
        written.append(dst)
    return written
