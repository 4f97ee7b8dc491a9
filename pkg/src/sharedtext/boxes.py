"""Axis-aligned boxes in image pixels, plus IoU, offset coding, and NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DimensionError(f"box extents must be positive, got {self.w}x{self.h}")

    @property
    def cx(self):
        return self.x + self.w / 2.0

    @property
    def cy(self):
        return self.y + self.h / 2.0

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h])

    def clipped(self, width, height):
        """Intersection with the image rectangle, or None if empty."""
        x0 = max(self.x, 0.0)
        y0 = max(self.y, 0.0)
        x1 = min(self.x + self.w, float(width))
        y1 = min(self.y + self.h, float(height))
        if x1 <= x0 or y1 <= y0:
            return None
        return Box(x0, y0, x1 - x0, y1 - y0)


def iou(a: Box, b: Box) -> float:
    xi = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    yi = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = xi * yi
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b):
    """Pairwise IoU of two [N,4] / [M,4] arrays of (x, y, w, h) rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0 = a[:, 0:1], a[:, 1:2]
    ax1, ay1 = ax0 + a[:, 2:3], ay0 + a[:, 3:4]
    bx0, by0 = b[:, 0], b[:, 1]
    bx1, by1 = bx0 + b[:, 2], by0 + b[:, 3]
    xi = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0, None)
    yi = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0, None)
    inter = xi * yi
    union = a[:, 2:3] * a[:, 3:4] + b[:, 2] * b[:, 3] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode_box(anchor, gt):
    """Offsets (tx, ty, tw, th) carrying the anchor onto the ground truth."""
    ax, ay, aw, ah = _unpack(anchor)
    gx, gy, gw, gh = _unpack(gt)
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise DimensionError("encode_box requires positive extents")
    tx = ((gx + gw / 2) - (ax + aw / 2)) / aw
    ty = ((gy + gh / 2) - (ay + ah / 2)) / ah
    tw = np.log(gw / aw)
    th = np.log(gh / ah)
    return _pack_like(anchor, tx, ty, tw, th)


def decode_box(anchor, t):
    """Exact inverse of encode_box; returns a Box for Box anchors."""
    ax, ay, aw, ah = _unpack(anchor)
    tx, ty, tw, th = _unpack(t)
    cx = (ax + aw / 2) + tx * aw
    cy = (ay + ah / 2) + ty * ah
    w = aw * np.exp(tw)
    h = ah * np.exp(th)
    if isinstance(anchor, Box):
        return Box(float(cx - w / 2), float(cy - h / 2), float(w), float(h))
    return _pack_like(anchor, cx - w / 2, cy - h / 2, w, h)


def _unpack(v):
    if isinstance(v, Box):
        return v.x, v.y, v.w, v.h
    a = np.asarray(v, dtype=np.float64)
    return a[..., 0], a[..., 1], a[..., 2], a[..., 3]


def _pack_like(template, x, y, w, h):
    if isinstance(template, Box):
        return (float(x), float(y), float(w), float(h))
    return np.stack([x, y, w, h], axis=-1)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


def nms(detections, iou_thr=0.3):
    """Greedy NMS by descending score; equal scores break by coordinates."""
    order = sorted(detections,
                   key=lambda d: (-d.score, d.box.x, d.box.y, d.box.w, d.box.h))
    kept = []
    for d in order:
        if all(iou(d.box, k.box) <= iou_thr for k in kept):
            kept.append(d)
    return kept
