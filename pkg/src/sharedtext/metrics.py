"""Line-level evaluation protocol and the shared-computation report.

A predicted line is correct end to end only when its box overlaps a ground
truth with IoU strictly above the threshold AND the transcription matches
exactly. Detection quality alone uses all-points interpolated average
precision; recognition quality on ground-truth boxes uses sequence and
character accuracy; word error rate covers free-text comparison.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import flop_count
from .boxes import iou


@dataclass
class EndToEndResult:
    pairs: list = field(default_factory=list)     # (det index, gt index, correct)
    n_correct: int = 0
    n_gts: int = 0
    n_dets: int = 0

    @property
    def recall(self):
        return self.n_correct / self.n_gts if self.n_gts else 0.0

    @property
    def accuracy(self):
        return self.n_correct / self.n_dets if self.n_dets else 0.0

    @property
    def f_measure(self):
        p, r = self.accuracy, self.recall
        return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


def match_end_to_end(detections_with_text, gts, iou_thr=0.5):
    """Greedy one-to-one matching of (box, text, score) against (box, text).

    Detections claim ground truths in descending score order; a claimed pair
    counts as correct only with IoU > iou_thr and byte-exact text equality.
    """
    result = EndToEndResult(n_gts=len(gts), n_dets=len(detections_with_text))
    order = sorted(range(len(detections_with_text)),
                   key=lambda i: -detections_with_text[i][2])
    taken = [False] * len(gts)
    for di in order:
        dbox, dtext, _ = detections_with_text[di]
        best_iou, best_g = 0.0, -1
        for g, (gbox, _) in enumerate(gts):
            if taken[g]:
                continue
            v = iou(dbox, gbox)
            if v > best_iou:
                best_iou, best_g = v, g
        if best_g >= 0 and best_iou > iou_thr:
            taken[best_g] = True
            correct = dtext == gts[best_g][1]
            result.pairs.append((di, best_g, correct))
            if correct:
                result.n_correct += 1
    return result


def combine_end_to_end(results):
    total = EndToEndResult()
    for r in results:
        total.n_correct += r.n_correct
        total.n_gts += r.n_gts
        total.n_dets += r.n_dets
    return total


def average_precision(per_image_dets, per_image_gts, iou_thr=0.5):
    """All-points interpolated AP over scored boxes, text ignored.

    ``per_image_dets[i]`` is a list of (Box, score); ``per_image_gts[i]`` a
    list of Box. Returns NaN when there are no ground truths.
    """
    n_gts = sum(len(g) for g in per_image_gts)
    if n_gts == 0:
        return float("nan")
    flat = [(score, img, box)
            for img, dets in enumerate(per_image_dets)
            for box, score in dets]
    flat.sort(key=lambda t: -t[0])
    taken = [[False] * len(g) for g in per_image_gts]
    tp = np.zeros(len(flat))
    for i, (_, img, box) in enumerate(flat):
        best_iou, best_g = 0.0, -1
        for g, gbox in enumerate(per_image_gts[img]):
            if taken[img][g]:
                continue
            v = iou(box, gbox)
            if v > best_iou:
                best_iou, best_g = v, g
        if best_g >= 0 and best_iou > iou_thr:
            taken[img][best_g] = True
            tp[i] = 1.0
    if not flat:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gts
    precision = cum_tp / np.arange(1, len(flat) + 1)
    # precision envelope, then sum recall steps
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def edit_distance(a, b):
    """Levenshtein distance between two sequences."""
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ai != b[j - 1]))
        prev = cur
    return prev[m]


def wer(ref_words, hyp_words):
    """Word-level edit distance normalized by the reference length."""
    ref = list(ref_words)
    if not ref:
        raise ValueError("word error rate undefined for an empty reference")
    return edit_distance(ref, list(hyp_words)) / len(ref)


def seq_char_accuracy(pairs):
    """(exact-match rate, 1 - char edit distance / reference chars) over pairs."""
    if not pairs:
        return 0.0, 0.0
    exact = sum(1 for gt, hyp in pairs if gt == hyp)
    total_ed = sum(edit_distance(gt, hyp) for gt, hyp in pairs)
    total_len = sum(len(gt) for gt, _ in pairs)
    if total_len == 0:
        char_acc = 1.0 if total_ed == 0 else 0.0
    else:
        char_acc = max(0.0, 1.0 - total_ed / total_len)
    return exact / len(pairs), char_acc


# ---------------------------------------------------------------------------
# shared-computation saving report
# ---------------------------------------------------------------------------

@dataclass
class SavingRow:
    boundary: str | None
    shared_flops: int
    standalone_flops: int
    saving_pct: float
    median_s: float
    mad_s: float
    speedup: float = 1.0


@dataclass
class SavingReport:
    input_hw: tuple
    rows: list = field(default_factory=list)


def _median_mad(values):
    v = np.asarray(values)
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med)))


def saving_report(config_builder, boundaries, input_hw, timing_runs=20, seed=0):
    """Analytic FLOP saving and measured recognition-stage time per boundary.

    ``config_builder(boundary)`` returns a backbone config with that sharing
    boundary. The timed quantity is the recognizer's marginal work for one
    image with three text regions: branch suffix forward, text pooling, and
    the recognition head, with the shared prefix treated as already paid
    for by the detector.
    """
    from . import model as jm                       # deferred: model imports metrics

    report = SavingReport(input_hw=tuple(input_hw))
    base_time = None
    for boundary in boundaries:
        cfg = config_builder(boundary)
        last = cfg.layers[-1].name
        standalone = flop_count(cfg, None, last, input_hw)
        shared = (flop_count(cfg, None, boundary, input_hw)
                  if boundary is not None else 0)
        model = jm.build_model_for_backbone(cfg, seed=seed)
        timer = jm.recognition_stage_timer(model, input_hw, n_regions=3)
        times = []
        for _ in range(max(int(timing_runs), 1)):
            t0 = time.perf_counter()
            timer()
            times.append(time.perf_counter() - t0)
        med, mad = _median_mad(times)
        if base_time is None:
            base_time = med
        report.rows.append(SavingRow(
            boundary=boundary,
            shared_flops=shared,
            standalone_flops=standalone,
            saving_pct=100.0 * shared / standalone,
            median_s=med,
            mad_s=mad,
            speedup=base_time / med if med > 0 else float("inf"),
        ))
    return report
