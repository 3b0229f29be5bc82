"""Glyph images: PGM I/O, preprocessing, synthetic paired corpora, splitting and batching.

Ink is 255 (maps to +1 in tensors), background is 0 (maps to -1).
On disk a corpus is ``{root}/{style}/{train|val}/{char_id}_{x|y}.pgm`` plus a
tab-separated ``manifest.tsv`` at the root.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .engine import Rng, Tensor

MANIFEST = "manifest.tsv"
DEFAULT_THRESHOLD = 127


class PGMError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass
class GlyphImage:
    pixels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise ValueError(f"GlyphImage needs a 2-D pixel array, got shape {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def ink(self) -> int:
        return int(np.count_nonzero(self.pixels >= 128))

    def __eq__(self, other) -> bool:
        return isinstance(other, GlyphImage) and np.array_equal(self.pixels, other.pixels)


@dataclass
class GlyphPair:
    char_id: str
    x: GlyphImage
    y: GlyphImage


@dataclass
class Corpus:
    pairs: list[GlyphPair]
    split: dict[str, str] = field(default_factory=dict)  # char_id -> "train" | "val"
    style: str = "custom"

    def select(self, which: str) -> list[GlyphPair]:
        return [p for p in self.pairs if self.split.get(p.char_id) == which]

    def char_ids(self, which: str | None = None) -> list[str]:
        if which is None:
            return [p.char_id for p in self.pairs]
        return [p.char_id for p in self.select(which)]

    def __len__(self) -> int:
        return len(self.pairs)


# --------------------------------------------------------------------- PGM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise PGMError("malformed PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PGMError("malformed PGM header: missing separator before raster")
    magic = fields[0]
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as e:
        raise PGMError(f"malformed PGM header: {e}") from None
    return magic, w, h, maxval, pos + 1


def load_pgm(path: str | os.PathLike) -> GlyphImage:
    """Read a binary (P5) 8-bit PGM."""
    buf = Path(path).read_bytes()
    if buf[:2] in (b"P2", b"P1", b"P3", b"P4", b"P6"):
        raise PGMError(f"{path}: unsupported format {buf[:2].decode()}, only binary P5 PGM is read")
    if buf[:2] != b"P5":
        raise PGMError(f"{path}: not a PGM file")
    magic, w, h, maxval, start = _parse_header(buf)
    if maxval != 255:
        raise PGMError(f"{path}: maxval {maxval} unsupported (need 255)")
    if w <= 0 or h <= 0:
        raise PGMError(f"{path}: bad dimensions {w}x{h}")
    raster = buf[start:start + w * h]
    if len(raster) < w * h:
        raise PGMError(f"{path}: truncated raster ({len(raster)} of {w * h} bytes)")
    return GlyphImage(np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy())


def save_pgm(img: GlyphImage, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    path.write_bytes(header + img.pixels.tobytes())


# ------------------------------------------------------------ preprocessing


def binarize(img: GlyphImage, threshold: int = DEFAULT_THRESHOLD) -> GlyphImage:
    return GlyphImage(np.where(img.pixels >= threshold, 255, 0).astype(np.uint8))


def resize(img: GlyphImage, side: int) -> GlyphImage:
    """Bilinear resample to side x side (pixel-centre aligned)."""
    if side < 1:
        raise ValueError("resize target must be >= 1")
    h, w = img.pixels.shape
    if (h, w) == (side, side):
        return GlyphImage(img.pixels.copy())
    src = img.pixels.astype(np.float64)

    def coords(n_in):
        c = (np.arange(side) + 0.5) * (n_in / side) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    r0, r1, fr = coords(h)
    c0, c1, fc = coords(w)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bot = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return GlyphImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def preprocess(img: GlyphImage, side: int, threshold: int = DEFAULT_THRESHOLD) -> GlyphImage:
    return binarize(resize(img, side), threshold)


def hflip(img: GlyphImage) -> GlyphImage:
    return GlyphImage(img.pixels[:, ::-1])


def pair_flip(pair: GlyphPair, rng: Rng, p: float = 0.5) -> GlyphPair:
    """Mirror x and y together with probability p (one draw per call)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    if rng.random() < p:
        return GlyphPair(pair.char_id, hflip(pair.x), hflip(pair.y))
    return pair


def to_tensor(img: GlyphImage) -> Tensor:
    """uint8 image -> (1, 1, h, w) tensor in [-1, 1]; 0 -> -1, 255 -> +1."""
    data = img.pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return Tensor(data[None, None])


def from_tensor(t: Tensor | np.ndarray) -> GlyphImage:
    """Threshold at 0: positive -> 255, otherwise 0."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 4 or data.shape[:2] != (1, 1):
        raise ValueError(f"from_tensor expects shape (1, 1, h, w), got {data.shape}")
    return GlyphImage(np.where(data[0, 0] > 0, 255, 0).astype(np.uint8))


# ---------------------------------------------------------- synthetic glyphs

LATTICE = 5
_DIRECTIONS = [(0, 1), (1, 0), (1, 1), (1, -1)]


@dataclass
class StyleTransform:
    """Deterministic binary-image restyling standing in for a calligraphic hand.

    kinds: identity, thicken (dilation radius), thin (erosion radius),
    shear (horizontal shift per row, relative), wave (amplitude in pixels,
    period as a fraction of the side), composite (apply ``parts`` in order).
    """

    kind: str = "identity"
    magnitude: float = 1.0
    period: float = 0.5
    seed: int = 0
    parts: list["StyleTransform"] = field(default_factory=list)

    KINDS = ("identity", "thicken", "thin", "shear", "wave", "composite")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown style kind {self.kind!r}; choose from {self.KINDS}")

    @classmethod
    def parse(cls, spec: str, seed: int = 0) -> "StyleTransform":
        """``"thicken"``, ``"shear:0.3"``, ``"thicken+shear"`` ..."""
        names = [s for s in spec.split("+") if s]
        if not names:
            raise ValueError("empty style")
        parts = []
        for name in names:
            kind, _, mag = name.partition(":")
            st = cls(kind=kind, seed=seed)
            if mag:
                st.magnitude = float(mag)
            elif kind == "shear":
                st.magnitude = 0.25
            elif kind == "wave":
                st.magnitude = 1.5
            parts.append(st)
        if len(parts) == 1:
            return parts[0]
        return cls(kind="composite", seed=seed, parts=parts)

    def __call__(self, img: GlyphImage) -> GlyphImage:
        ink = img.pixels >= 128
        out = self._apply(ink)
        return GlyphImage(np.where(out, 255, 0).astype(np.uint8))

    def _apply(self, ink: np.ndarray) -> np.ndarray:
        k = self.kind
        if k == "identity":
            return ink.copy()
        if k == "composite":
            for part in self.parts:
                ink = part._apply(ink)
            return ink
        if k in ("thicken", "thin"):
            r = max(1, int(round(self.magnitude)))
            struct = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
            if k == "thicken":
                return ndimage.binary_dilation(ink, structure=struct)
            return ndimage.binary_erosion(ink, structure=ndimage.generate_binary_structure(2, 1), iterations=r)
        h, w = ink.shape
        rows = np.arange(h)
        if k == "shear":
            shift = self.magnitude * (rows - (h - 1) / 2)
        else:  # wave
            phase = 2 * np.pi * Rng(self.seed).random()
            shift = self.magnitude * np.sin(2 * np.pi * rows / (self.period * h) + phase)
        shift = np.rint(shift).astype(int)
        out = np.zeros_like(ink)
        cols = np.arange(w)
        for r in range(h):
            src = cols - shift[r]
            ok = (src >= 0) & (src < w)
            out[r, ok] = ink[r, src[ok]]
        return out

    @property
    def name(self) -> str:
        if self.kind == "composite":
            return "+".join(p.name for p in self.parts)
        return self.kind


def _draw_segment(canvas: np.ndarray, p0, p1, half_width: float) -> None:
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    py, px = yy + 0.5, xx + 0.5
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = ((py - y0) * dy + (px - x0) * dx) / max(dy * dy + dx * dx, 1e-12)
    t = np.clip(t, 0, 1)
    d2 = (py - (y0 + t * dy)) ** 2 + (px - (x0 + t * dx)) ** 2
    canvas |= d2 <= half_width * half_width


def stroke_glyph(char_index: int, size: int, seed: int) -> tuple[GlyphImage, int]:
    """Procedural 'standard font' glyph: 3-12 straight strokes on a 5x5 lattice.

    Deterministic in (char_index, size, seed). Returns the image and its
    stroke count.
    """
    rng = np.random.default_rng([seed, char_index])
    margin = size / 5
    step = (size - 2 * margin) / (LATTICE - 1)
    half_width = max(1.0, size / 24)
    n_strokes = int(rng.integers(3, 13))
    canvas = np.zeros((size, size), dtype=bool)
    for _ in range(n_strokes):
        while True:
            r, c = rng.integers(0, LATTICE, size=2)
            dr, dc = _DIRECTIONS[rng.integers(len(_DIRECTIONS))]
            length = int(rng.integers(1, 3))
            r1, c1 = r + dr * length, c + dc * length
            if 0 <= r1 < LATTICE and 0 <= c1 < LATTICE:
                break
        p0 = (margin + r * step, margin + c * step)
        p1 = (margin + r1 * step, margin + c1 * step)
        _draw_segment(canvas, p0, p1, half_width)
    return GlyphImage(np.where(canvas, 255, 0).astype(np.uint8)), n_strokes


def synth_corpus(n_chars: int, size: int, style: StyleTransform, seed: int) -> Corpus:
    if size < 16 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 16, got {size}")
    pairs = []
    for i in range(n_chars):
        x, _ = stroke_glyph(i, size, seed)
        pairs.append(GlyphPair(f"c{i:05d}", x, style(x)))
    return Corpus(pairs, {}, style.name)


# ---------------------------------------------------------- split and batch


def split_corpus(corpus: Corpus, val_fraction: float, seed: int) -> Corpus:
    """Character-level train/val split; no char_id lands on both sides."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    chars = sorted(set(corpus.char_ids()))
    if len(chars) < 2:
        raise CorpusError("need at least 2 distinct characters to split")
    n_val = int(round(val_fraction * len(chars)))
    n_val = min(max(n_val, 1), len(chars) - 1)
    order = Rng(seed).permutation(len(chars))
    val = {chars[i] for i in order[:n_val]}
    split = {c: ("val" if c in val else "train") for c in chars}
    return Corpus(list(corpus.pairs), split, corpus.style)


def stack_pairs(pairs: Sequence[GlyphPair]) -> tuple[Tensor, Tensor]:
    X = np.stack([to_tensor(p.x).data[0] for p in pairs])
    Y = np.stack([to_tensor(p.y).data[0] for p in pairs])
    return Tensor(X), Tensor(Y)


def batch_iter(
    corpus: Corpus,
    split: str,
    batch: int,
    rng: Rng,
    augment: bool = False,
    flip_p: float = 0.5,
    with_ids: bool = False,
) -> Iterator:
    """One shuffled epoch of (X, Y) batches; the last batch may be short.

    With ``with_ids`` each item is (X, Y, char_ids).
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    pairs = corpus.select(split)
    if not pairs:
        raise CorpusError(f"split {split!r} is empty")
    order = rng.permutation(len(pairs))
    for start in range(0, len(pairs), batch):
        chunk = [pairs[i] for i in order[start:start + batch]]
        if augment:
            chunk = [pair_flip(p, rng, flip_p) for p in chunk]
        X, Y = stack_pairs(chunk)
        if with_ids:
            yield X, Y, [p.char_id for p in chunk]
        else:
            yield X, Y


# ------------------------------------------------------------ disk layout


def save_corpus(corpus: Corpus, root: str | os.PathLike) -> Path:
    """Write PGMs and the manifest; returns the manifest path."""
    root = Path(root)
    if not corpus.split:
        raise CorpusError("corpus has no split; call split_corpus first")
    lines = []
    for p in corpus.pairs:
        part = corpus.split[p.char_id]
        xr = f"{corpus.style}/{part}/{p.char_id}_x.pgm"
        yr = f"{corpus.style}/{part}/{p.char_id}_y.pgm"
        save_pgm(p.x, root / xr)
        save_pgm(p.y, root / yr)
        lines.append(f"{p.char_id}\t{xr}\t{yr}\t{part}\n")
    manifest = root / MANIFEST
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    return manifest


def load_corpus(root: str | os.PathLike, side: int | None = None, threshold: int = DEFAULT_THRESHOLD) -> Corpus:
    """Read a corpus directory; optionally resize+binarize every image to ``side``."""
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise CorpusError(f"no {MANIFEST} in {root}")
    pairs, split = [], {}
    styles = set()
    with open(manifest, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise CorpusError(f"{manifest}:{n}: expected 4 tab-separated fields, got {len(cols)}")
            cid, xr, yr, part = cols
            if part not in ("train", "val"):
                raise CorpusError(f"{manifest}:{n}: split must be train or val, got {part!r}")
            if cid in split and split[cid] != part:
                raise CorpusError(f"{manifest}:{n}: char {cid} appears in both splits")
            x, y = load_pgm(root / xr), load_pgm(root / yr)
            if side is not None:
                x, y = preprocess(x, side, threshold), preprocess(y, side, threshold)
            elif x.pixels.shape != y.pixels.shape:
                raise CorpusError(f"{manifest}:{n}: x and y sizes differ")
            pairs.append(GlyphPair(cid, x, y))
            split[cid] = part
            styles.add(xr.split("/")[0])
    style = styles.pop() if len(styles) == 1 else "mixed"
    return Corpus(pairs, split, style)
