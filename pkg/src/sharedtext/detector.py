"""Two-stage text detector: anchor proposals plus position-sensitive scoring.

Stage one scores and regresses a grid of text-shaped anchors (wide aspect
ratios, three scales). Stage two re-scores each surviving proposal with
position-sensitive RoI pooling, where every spatial bin of the proposal
reads its own dedicated group of channels, and refines the box with a
class-agnostic regression pooled the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .boxes import Box, Detection, decode_box, encode_box, iou_matrix, nms
from .errors import ConfigError, EmptyRegionError
from .text_pool import _bin_edges, project_region


@dataclass
class DetectorConfig:
    scales: tuple = (4, 8, 16)
    ratios: tuple = (0.5, 0.2, 0.1)     # height:width fractions (1:2, 1:5, 1:10)
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    rpn_sample: int = 128
    rpn_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.5
    roi_neg_iou: float = 0.4
    roi_sample: int = 64
    pool_grid: int = 3                  # k of the k x k position-sensitive grid
    pre_nms_top: int = 100
    nms_iou: float = 0.3
    score_thr: float = 0.5
    rpn_channels: int = 64
    min_box_px: float = 2.0

    @property
    def shapes_per_site(self):
        return len(self.scales) * len(self.ratios)


def generate_anchors(fm_h, fm_w, stride, scales=(4, 8, 16), ratios=(0.5, 0.2, 0.1)):
    """[A, 4] anchors (x, y, w, h) tiling the feature map, site-major.

    An anchor of scale s and height:width ratio r has area (s*stride)^2,
    height sqrt(area*r), width sqrt(area/r), centered on its feature cell.
    """
    if not scales or not ratios:
        raise ConfigError("anchor scales and ratios must be non-empty")
    shapes = []
    for s in scales:
        area = float(s * stride) ** 2
        for r in ratios:
            h = np.sqrt(area * r)
            w = np.sqrt(area / r)
            shapes.append((w, h))
    shapes = np.array(shapes)                       # [S, 2] (w, h)
    jj, ii = np.meshgrid(np.arange(fm_w), np.arange(fm_h))
    cx = (jj.reshape(-1, 1) + 0.5) * stride
    cy = (ii.reshape(-1, 1) + 0.5) * stride
    w = np.broadcast_to(shapes[:, 0], (fm_h * fm_w, len(shapes)))
    h = np.broadcast_to(shapes[:, 1], (fm_h * fm_w, len(shapes)))
    anchors = np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1)
    return anchors.reshape(-1, 4)


@dataclass
class AnchorAssignment:
    """Per-anchor labels (1 positive, 0 negative, -1 ignore) and targets."""
    labels: np.ndarray
    targets: np.ndarray
    matched_gt: np.ndarray = field(repr=False, default=None)


def assign_anchors(anchors, gts, pos_thr=0.7, neg_thr=0.3):
    """Label anchors against ground truths.

    Anchors with max IoU >= pos_thr are positive, <= neg_thr negative, and
    in between ignored; additionally every ground truth claims its best
    anchor as positive so no target goes unrepresented.
    """
    if not (0.0 < neg_thr < pos_thr < 1.0):
        raise ConfigError("need 0 < neg_thr < pos_thr < 1")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    a = anchors.shape[0]
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if gts.shape[0] == 0:
        return AnchorAssignment(np.zeros(a, dtype=np.int8),
                                np.zeros((a, 4)), np.full(a, -1, dtype=np.int64))
    ious = iou_matrix(anchors, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(a), best_gt]
    labels = np.full(a, -1, dtype=np.int8)
    labels[best_iou <= neg_thr] = 0
    labels[best_iou >= pos_thr] = 1
    matched = best_gt.copy()
    for g in range(gts.shape[0]):                   # best-match rule
        a_star = int(ious[:, g].argmax())
        labels[a_star] = 1
        matched[a_star] = g
    targets = np.zeros((a, 4))
    pos = labels == 1
    if pos.any():
        targets[pos] = encode_box(anchors[pos], gts[matched[pos]])
    matched[labels != 1] = -1
    return AnchorAssignment(labels, targets, matched)


def sample_assignment(assignment, rng, size, pos_fraction=0.5):
    """Pick a balanced training sample of anchor indices (positives first)."""
    pos = np.flatnonzero(assignment.labels == 1)
    neg = np.flatnonzero(assignment.labels == 0)
    n_pos = min(len(pos), int(size * pos_fraction))
    if n_pos < len(pos):
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), size - n_pos)
    if n_neg < len(neg):
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.concatenate([np.sort(pos), np.sort(neg)])


def detection_loss(cls_logits, reg_preds, labels, reg_targets, gamma=1.0):
    """Classification plus label-gated box regression for one sample.

    Cross entropy is averaged over the sample; the regression term averages
    the summed coordinate losses over positives only (the gate: negatives
    contribute no regression), weighted by gamma.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size == 0:
        raise ConfigError("detection_loss on an empty sample")
    cls_loss = ad.softmax_cross_entropy(cls_logits, labels, reduction="mean")
    pos = np.flatnonzero(labels == 1)
    if pos.size:
        reg_rows = ad.take_rows(reg_preds, pos)
        reg_sum = ad.smooth_l1(reg_rows, np.asarray(reg_targets)[pos], reduction="sum")
        reg_loss = ad.scale(reg_sum, 1.0 / pos.size)
        total = ad.add(cls_loss, ad.scale(reg_loss, gamma))
        reg_val = reg_loss.item()
    else:
        total = cls_loss
        reg_val = 0.0
    return total, {"cls": cls_loss.item(), "reg": reg_val}


# ---------------------------------------------------------------------------
# position-sensitive RoI pooling
# ---------------------------------------------------------------------------

def ps_roi_pool(score_maps, box, stride, k):
    """Score a box against position-sensitive maps [1, k*k*C, H, W] -> [C].

    The box splits into a k x k grid; bin (i, j) average-pools only its own
    C channels (group i*k+j), and the k*k bin votes are averaged. Gradient
    flows back only into cells and channels that contributed. Empty bins
    (box smaller than the grid) vote 0.
    """
    score_maps = ad.as_tensor(score_maps)
    _, ch, fm_h, fm_w = score_maps.shape
    if ch % (k * k) != 0:
        raise ConfigError(f"{ch} channels not divisible by k^2={k * k}")
    c = ch // (k * k)
    y0, x0, hf, wf = project_region(box, stride, fm_h, fm_w)
    rows = _bin_edges(hf, k)
    cols = _bin_edges(wf, k)
    votes = np.zeros(c)
    contrib = []                                    # (group, r0, r1, c0, c1, n)
    for i in range(k):
        r0, r1 = y0 + rows[i], y0 + rows[i + 1]
        for j in range(k):
            c0, c1 = x0 + cols[j], x0 + cols[j + 1]
            if r1 <= r0 or c1 <= c0:
                continue
            g = i * k + j
            seg = score_maps.data[0, g * c:(g + 1) * c, r0:r1, c0:c1]
            n = (r1 - r0) * (c1 - c0)
            votes += seg.reshape(c, -1).mean(axis=1)
            contrib.append((g, r0, r1, c0, c1, n))
    votes /= k * k

    def backward(gout):
        grad = np.zeros_like(score_maps.data)
        for g, r0, r1, c0, c1, n in contrib:
            grad[0, g * c:(g + 1) * c, r0:r1, c0:c1] += \
                (gout / (k * k * n)).reshape(c, 1, 1)
        score_maps.accumulate_grad(grad)

    return ad._make(votes, (score_maps,), backward)


# ---------------------------------------------------------------------------
# head parameters and forward passes
# ---------------------------------------------------------------------------

def init_detector_params(cfg, in_channels, rng):
    params = {}

    def conv(name, cin, cout, k):
        fan_in = cin * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        params[f"det/{name}/w"] = ad.Tensor(w, requires_grad=True)
        params[f"det/{name}/b"] = ad.Tensor(np.zeros(cout), requires_grad=True)

    s = cfg.shapes_per_site
    k2 = cfg.pool_grid ** 2
    conv("rpn_conv", in_channels, cfg.rpn_channels, 3)
    conv("rpn_cls", cfg.rpn_channels, s * 2, 1)
    conv("rpn_reg", cfg.rpn_channels, s * 4, 1)
    conv("ps_cls", in_channels, k2 * 2, 1)
    conv("ps_reg", in_channels, k2 * 4, 1)
    return params


def rpn_forward(features, params, cfg):
    """Anchor logits [A, 2] and regressions [A, 4] in anchor grid order."""
    x = ad.relu(ad.conv2d(features, params["det/rpn_conv/w"],
                          params["det/rpn_conv/b"], stride=1, pad=1))
    s = cfg.shapes_per_site
    h, w = x.shape[2], x.shape[3]

    def heads(name, per):
        y = ad.conv2d(x, params[f"det/{name}/w"], params[f"det/{name}/b"])
        y = ad.reshape(y, (s, per, h, w))
        y = ad.transpose(y, (2, 3, 0, 1))           # site-major anchor order
        return ad.reshape(y, (h * w * s, per))

    return heads("rpn_cls", 2), heads("rpn_reg", 4)


def ps_score_maps(features, params):
    cls_maps = ad.conv2d(features, params["det/ps_cls/w"], params["det/ps_cls/b"])
    reg_maps = ad.conv2d(features, params["det/ps_reg/w"], params["det/ps_reg/b"])
    return cls_maps, reg_maps


def propose(anchors, rpn_cls_data, rpn_reg_data, image_hw, cfg, top=None):
    """Decode the highest-scoring anchors into clipped proposal boxes."""
    h_img, w_img = image_hw
    z = rpn_cls_data - rpn_cls_data.max(axis=1, keepdims=True)
    e = np.exp(z)
    scores = e[:, 1] / e.sum(axis=1)
    top = cfg.pre_nms_top if top is None else top
    order = np.argsort(-scores, kind="stable")[:top]
    raw = decode_box(anchors[order], rpn_reg_data[order])
    out = []
    for row, idx in zip(raw, order):
        try:
            box = Box(*row).clipped(w_img, h_img)
        except Exception:
            box = None
        if box is None or box.w < cfg.min_box_px or box.h < cfg.min_box_px:
            continue
        out.append((box, float(scores[idx])))
    return out


def detect(image, model, score_thr=None, pre_nms_top=None):
    """Full detection pipeline on one image; returns surviving Detections."""
    bundle = model.forward_features(ad.as_tensor(image))
    return detect_from_features(bundle.det, model, bundle.image_hw,
                                score_thr=score_thr, pre_nms_top=pre_nms_top)


def detect_from_features(det_feat, model, image_hw, score_thr=None,
                         pre_nms_top=None):
    """Detection from precomputed detector-branch features."""
    cfg = model.det_cfg
    score_thr = cfg.score_thr if score_thr is None else score_thr
    h_img, w_img = image_hw
    rpn_cls, rpn_reg = rpn_forward(det_feat, model.params, cfg)
    anchors = model.anchors_for(det_feat.shape[2], det_feat.shape[3])
    proposals = propose(anchors, rpn_cls.data, rpn_reg.data,
                        (h_img, w_img), cfg, top=pre_nms_top)
    cls_maps, reg_maps = ps_score_maps(det_feat, model.params)
    k = cfg.pool_grid
    dets = []
    for box, _ in proposals:
        try:
            votes = ps_roi_pool(cls_maps, box, model.head_stride, k).data
            offs = ps_roi_pool(reg_maps, box, model.head_stride, k).data
        except EmptyRegionError:
            continue
        z = votes - votes.max()
        p_text = float(np.exp(z[1]) / np.exp(z).sum())
        refined = decode_box(box, tuple(offs))
        refined = refined.clipped(w_img, h_img)
        if refined is None or refined.w < cfg.min_box_px or refined.h < cfg.min_box_px:
            continue
        dets.append(Detection(refined, p_text))
    kept = nms(dets, cfg.nms_iou)
    return [d for d in kept if d.score > score_thr]
