"""Fixed-height, aspect-preserving max pooling of text regions.

A detected region covering hf x wf feature cells is pooled onto an
``out_height`` x ``Wout`` grid with ``Wout = max(1, round(wf * H / hf))``,
so the output width tracks the region's aspect ratio while the height stays
constant. Bins are integer floor splits of the region, each output cell is
the max of its bin per channel, and backward routes gradient only to the
recorded argmax cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import EmptyRegionError, SharedTextError


@dataclass
class TextPoolConfig:
    out_height: int = 8

    def __post_init__(self):
        if self.out_height < 1:
            raise SharedTextError("pooled height must be >= 1")


@dataclass
class PooledTextFeature:
    data: ad.Tensor                      # [C, H, Wout]
    source_rect: tuple                   # (y0, x0, hf, wf) in feature cells
    feature_hw: tuple                    # (Hf, Wf) of the pooled-from map
    argmax: np.ndarray = field(repr=False, default=None)  # flat indices, -1 = empty bin


def round_half_up(x):
    return int(np.floor(x + 0.5))


def project_region(box, stride, fm_h, fm_w):
    """Image-space box -> outward-rounded, clipped feature rectangle.

    Outward rounding (floor on the near edge, ceil on the far edge) keeps
    every feature cell the box touches, so imprecise boxes lose no ink.
    """
    x0 = int(np.floor(box.x / stride))
    y0 = int(np.floor(box.y / stride))
    x1 = int(np.ceil((box.x + box.w) / stride))
    y1 = int(np.ceil((box.y + box.h) / stride))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, fm_w), min(y1, fm_h)
    if x1 <= x0 or y1 <= y0:
        raise EmptyRegionError(
            f"region {box} projects to an empty rectangle at stride {stride}")
    return y0, x0, y1 - y0, x1 - x0


def _bin_edges(extent, bins):
    return [int(np.floor(i * extent / bins)) for i in range(bins + 1)]


def text_pool(features, box, stride, cfg):
    """Pool one region of ``features`` [1,C,Hf,Wf] to [C, H, Wout].

    Participates in autodiff: backward scatter-adds the upstream gradient
    onto the recorded argmax cells of ``features``. Bins that receive no
    cells (region shorter than H, or narrower than Wout) output 0 and carry
    no gradient.
    """
    features = ad.as_tensor(features)
    _, c, fm_h, fm_w = features.shape
    y0, x0, hf, wf = project_region(box, stride, fm_h, fm_w)
    hh = cfg.out_height
    wout = max(1, round_half_up(wf * hh / hf))

    region = features.data[0, :, y0:y0 + hf, x0:x0 + wf]
    rows = _bin_edges(hf, hh)
    cols = _bin_edges(wf, wout)
    out = np.zeros((c, hh, wout))
    argmax = np.full((c, hh, wout), -1, dtype=np.int64)
    ch = np.arange(c)
    for i in range(hh):
        r0, r1 = rows[i], rows[i + 1]
        if r1 <= r0:
            continue
        for j in range(wout):
            c0, c1 = cols[j], cols[j + 1]
            if c1 <= c0:
                continue
            seg = region[:, r0:r1, c0:c1].reshape(c, -1)
            am = seg.argmax(axis=1)          # first max in row-major bin order
            out[:, i, j] = seg[ch, am]
            rr, cc = np.divmod(am, c1 - c0)
            argmax[:, i, j] = (y0 + r0 + rr) * fm_w + (x0 + c0 + cc)

    pooled = PooledTextFeature(None, (y0, x0, hf, wf), (fm_h, fm_w), argmax)

    def backward(g):
        features.accumulate_grad(
            text_pool_backward(g, pooled).reshape(features.shape))

    pooled.data = ad._make(out, (features,), backward)
    return pooled


def text_pool_backward(upstream_grad, pooled):
    """Scatter the upstream gradient [C,H,Wout] back onto the feature map."""
    if pooled.argmax is None:
        raise SharedTextError("text_pool_backward needs the forward argmax record")
    fm_h, fm_w = pooled.feature_hw
    c = pooled.argmax.shape[0]
    grad = np.zeros((c, fm_h * fm_w))
    flat_idx = pooled.argmax.reshape(c, -1)
    flat_g = np.asarray(upstream_grad, dtype=np.float64).reshape(c, -1)
    valid = flat_idx >= 0
    ch_idx, pos = np.nonzero(valid)
    np.add.at(grad, (ch_idx, flat_idx[ch_idx, pos]), flat_g[ch_idx, pos])
    return grad.reshape(c, fm_h, fm_w)
