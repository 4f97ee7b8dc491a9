"""Procedural generator of document-like pages with labeled text lines.

Pages are grayscale, bright strokes on a dark background, built from a
fixed table of 12x8 glyph bitmaps scaled per line. Every page carries exact
line boxes and transcriptions, so the labels are true by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box
from .errors import DatasetError, GenerationError
from .fileio import atomic_write_text, write_pgm

GLYPH_H, GLYPH_W = 12, 8

_GLYPH_ART = {
    "a": ("..####..", ".##..##.", "##....##", "##....##", "##....##", "########",
          "##....##", "##....##", "##....##", "##....##", "##....##", "##....##"),
    "b": ("######..", "##...##.", "##....##", "##...##.", "######..", "######..",
          "##...##.", "##....##", "##....##", "##....##", "##...##.", "######.."),
    "c": ("..####..", ".##..##.", "##....##", "##......", "##......", "##......",
          "##......", "##......", "##......", "##....##", ".##..##.", "..####.."),
    "d": ("#####...", "##..##..", "##...##.", "##....##", "##....##", "##....##",
          "##....##", "##....##", "##....##", "##...##.", "##..##..", "#####..."),
    "e": ("########", "##......", "##......", "##......", "##......", "######..",
          "######..", "##......", "##......", "##......", "##......", "########"),
    "f": ("########", "##......", "##......", "##......", "##......", "######..",
          "######..", "##......", "##......", "##......", "##......", "##......"),
    "g": ("..####..", ".##..##.", "##....##", "##......", "##......", "##......",
          "##..####", "##....##", "##....##", "##....##", ".##..##.", "..####.."),
    "h": ("##....##", "##....##", "##....##", "##....##", "##....##", "########",
          "########", "##....##", "##....##", "##....##", "##....##", "##....##"),
    "i": (".######.", "...##...", "...##...", "...##...", "...##...", "...##...",
          "...##...", "...##...", "...##...", "...##...", "...##...", ".######."),
    "j": ("..######", "....##..", "....##..", "....##..", "....##..", "....##..",
          "....##..", "....##..", "##..##..", "##..##..", ".####...", "..##...."),
    "k": ("##....##", "##...##.", "##..##..", "##.##...", "####....", "###.....",
          "####....", "##.##...", "##..##..", "##...##.", "##....##", "##....##"),
    "l": ("##......", "##......", "##......", "##......", "##......", "##......",
          "##......", "##......", "##......", "##......", "##......", "########"),
    "m": ("##....##", "###..###", "########", "##.##.##", "##.##.##", "##....##",
          "##....##", "##....##", "##....##", "##....##", "##....##", "##....##"),
    "n": ("##....##", "###...##", "####..##", "##.##.##", "##.##.##", "##..####",
          "##...###", "##....##", "##....##", "##....##", "##....##", "##....##"),
    "o": ("..####..", ".##..##.", "##....##", "##....##", "##....##", "##....##",
          "##....##", "##....##", "##....##", "##....##", ".##..##.", "..####.."),
    "p": ("######..", "##...##.", "##....##", "##....##", "##...##.", "######..",
          "##......", "##......", "##......", "##......", "##......", "##......"),
}


def _art_to_bitmap(rows):
    if len(rows) != GLYPH_H or any(len(r) != GLYPH_W for r in rows):
        raise DatasetError("glyph art must be 12 rows of 8 columns")
    return np.array([[1.0 if ch == "#" else 0.0 for ch in r] for r in rows])


class GlyphSet:
    """Built-in bitmap font: symbol -> 12x8 binary array."""

    def __init__(self, symbols="abcdefghijklmnop"):
        self.glyphs = {}
        for s in symbols:
            if s not in _GLYPH_ART:
                raise DatasetError(f"no built-in glyph for {s!r}")
            self.glyphs[s] = _art_to_bitmap(_GLYPH_ART[s])

    def scaled(self, symbol, scale):
        """Nearest-neighbor upscale to round(12*s) x round(8*s) pixels."""
        base = self.glyphs[symbol]
        gh = int(np.floor(GLYPH_H * scale + 0.5))
        gw = int(np.floor(GLYPH_W * scale + 0.5))
        rr = (np.arange(gh) * GLYPH_H) // gh
        cc = (np.arange(gw) * GLYPH_W) // gw
        return base[np.ix_(rr, cc)]


@dataclass
class PageSpec:
    width: int = 256
    height: int = 192
    lines_range: tuple = (2, 5)
    text_len_range: tuple = (3, 12)
    scale_range: tuple = (2.5, 2.9)
    noise: float = 0.03
    margin: int = 10
    seed: int = 0
    alphabet: str = "abcdefghijkl"
    min_line_sep: int = 2


@dataclass
class Sample:
    image: np.ndarray
    annotations: list = field(default_factory=list)   # [(Box, text)]


def _plan_line(spec, glyphs, rng):
    """Draw (text, scale, glyph size, spacings); None if nothing fits."""
    scale = rng.uniform(*spec.scale_range)
    gh = int(np.floor(GLYPH_H * scale + 0.5))
    gw = int(np.floor(GLYPH_W * scale + 0.5))
    usable_w = spec.width - 2 * spec.margin
    max_sp = int(np.ceil(1.25 * gw))
    lo, hi = spec.text_len_range
    max_len = (usable_w + max_sp) // (gw + max_sp)
    hi = min(hi, int(max_len))
    if hi < lo:
        return None
    length = int(rng.integers(lo, hi + 1))
    syms = list(spec.alphabet)
    text = "".join(syms[rng.integers(0, len(syms))] for _ in range(length))
    spacings = [int(np.floor(gw * rng.uniform(0.75, 1.25) + 0.5))
                for _ in range(length - 1)]
    line_w = length * gw + sum(spacings)
    if line_w > usable_w:
        return None
    return text, scale, gh, gw, spacings, line_w


def render_page(spec, rng, glyphs=None):
    """Generate one page; raises GenerationError after 100 layout attempts."""
    glyphs = glyphs or GlyphSet(spec.alphabet)
    usable_h = spec.height - 2 * spec.margin
    for _attempt in range(100):
        n_lines = int(rng.integers(spec.lines_range[0], spec.lines_range[1] + 1))
        plans = [_plan_line(spec, glyphs, rng) for _ in range(n_lines)]
        if any(p is None for p in plans):
            continue
        total_h = sum(p[2] for p in plans) + spec.min_line_sep * (n_lines - 1)
        slack = usable_h - total_h
        if slack < 0:
            continue
        canvas = np.zeros((spec.height, spec.width))
        annotations = []
        y = spec.margin
        remaining = slack
        for idx, (text, scale, gh, gw, spacings, line_w) in enumerate(plans):
            gap = int(rng.integers(0, remaining + 1))
            remaining -= gap
            y += gap + (spec.min_line_sep if idx > 0 else 0)
            x = int(rng.integers(spec.margin,
                                 spec.width - spec.margin - line_w + 1))
            cx = x
            for ci, sym in enumerate(text):
                bm = glyphs.scaled(sym, scale)
                canvas[y:y + gh, cx:cx + gw] = np.maximum(
                    canvas[y:y + gh, cx:cx + gw], bm)
                cx += gw + (spacings[ci] if ci < len(spacings) else 0)
            annotations.append((Box(float(x), float(y), float(line_w), float(gh)),
                                text))
            y += gh
        if spec.noise > 0:
            canvas = np.clip(canvas + rng.normal(0.0, spec.noise, canvas.shape),
                             0.0, 1.0)
        return Sample(canvas, annotations)
    raise GenerationError("page layout infeasible after 100 attempts")


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def split_counts(n, fractions):
    f_train, f_val, _ = fractions
    n_train = int(np.floor(n * f_train + 0.5))
    n_val = int(np.floor(n * f_val + 0.5))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise DatasetError(f"split fractions {fractions} invalid for n={n}")
    return {"train": n_train, "val": n_val, "test": n_test}


def generate_dataset(spec, n, out_dir, fractions=(0.8, 0.1, 0.1), base_seed=None):
    """Write n pages plus one tab-separated manifest per split.

    Each sample gets its own RNG seeded by (base seed, split, index), so
    regeneration is byte-identical and splits never share a stream. On any
    IO failure the partially written files are removed.
    """
    base_seed = spec.seed if base_seed is None else base_seed
    counts = split_counts(n, fractions)
    glyphs = GlyphSet(spec.alphabet)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    created = []
    try:
        manifests = {}
        for si, split in enumerate(SPLITS):
            rows = []
            for i in range(counts[split]):
                rng = np.random.default_rng(
                    np.random.SeedSequence([int(base_seed), si, i]))
                sample = render_page(spec, rng, glyphs)
                rel = os.path.join("images", f"{split}_{i:05d}.pgm")
                path = os.path.join(out_dir, rel)
                write_pgm(path, sample.image)
                created.append(path)
                fields = [rel]
                for box, text in sample.annotations:
                    fields += [f"{box.x:g}", f"{box.y:g}", f"{box.w:g}",
                               f"{box.h:g}", text]
                rows.append("\t".join(fields))
            mpath = os.path.join(out_dir, f"{split}.tsv")
            atomic_write_text(mpath, "\n".join(rows) + ("\n" if rows else ""))
            created.append(mpath)
            manifests[split] = mpath
        return manifests
    except BaseException:
        for p in created:
            try:
                os.unlink(p)
            except OSError:
                pass
        raise


@dataclass
class ManifestEntry:
    image_path: str
    annotations: list                                # [(Box, text)]


def load_manifest(path):
    """Parse one split manifest; image paths resolve next to the manifest."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if (len(fields) - 1) % 5 != 0:
                raise DatasetError(f"{path}:{ln}: malformed manifest row")
            anns = []
            for i in range(1, len(fields), 5):
                x, y, w, h = (float(v) for v in fields[i:i + 4])
                anns.append((Box(x, y, w, h), fields[i + 4]))
            entries.append(ManifestEntry(os.path.join(root, fields[0]), anns))
    return entries
