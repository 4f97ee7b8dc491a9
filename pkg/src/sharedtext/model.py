"""Joint detection + recognition model, multi-task training, and inference.

One trunk pass per image feeds both heads. The combined loss is the
detection loss summed with a weighted total of per-line CTC losses; the
weight is the recognition trade-off and must stay positive. Training runs
either jointly (all parameters, every step) or separately (detection-only
warm-up, then the shared prefix frozen while both heads keep learning).
"""

from __future__ import annotations

import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import detector as det
from . import metrics as ev
from .boxes import Box
from .errors import (CheckpointCorruptError, CheckpointFormatError,
                     ConfigError, DatasetError, EmptyRegionError,
                     InfeasibleLabelError, NumericError)
from .fileio import atomic_write_bytes, atomic_write_text, read_pgm
from .recognizer import (AlphabetCodec, RecognizerConfig, ctc_loss,
                         fcr_forward, greedy_decode, init_recognizer_params)
from .text_pool import text_pool

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STXT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    recognition_weight: float = 1.0     # weight of the CTC term; > 0
    regression_weight: float = 1.0      # weight of box regression inside detection
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 12
    batch: int = 1
    seed: int = 0
    strategy: str = "joint"             # joint | separate
    warmup_epochs: int = 2
    recognition_source: str = "ground_truth"
    box_jitter: float = 0.1

    def __post_init__(self):
        if self.recognition_weight <= 0:
            raise ConfigError("recognition weight must be positive")
        if self.regression_weight < 0:
            raise ConfigError("regression weight must be non-negative")
        if self.strategy not in ("joint", "separate"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")


def train_config_from(run_cfg) -> TrainConfig:
    return TrainConfig(
        recognition_weight=run_cfg.get_float("train.recognition_weight"),
        regression_weight=run_cfg.get_float("train.regression_weight"),
        lr=run_cfg.get_float("train.lr"),
        beta1=run_cfg.get_float("train.beta1"),
        beta2=run_cfg.get_float("train.beta2"),
        eps=run_cfg.get_float("train.eps"),
        epochs=run_cfg.get_int("train.epochs"),
        batch=run_cfg.get_int("train.batch"),
        seed=run_cfg.get_int("train.seed"),
        strategy=run_cfg.get("train.strategy"),
        warmup_epochs=run_cfg.get_int("train.warmup_epochs"),
        recognition_source=run_cfg.get("train.recognition_source"),
        box_jitter=run_cfg.get_float("train.box_jitter"),
    )


@dataclass
class FeatureBundle:
    shared: ad.Tensor | None
    det: ad.Tensor
    rec: ad.Tensor
    image_hw: tuple


class JointModel:
    """Parameter container plus the single-trunk-pass forward."""

    def __init__(self, run_cfg, seed=None, backbone_cfg=None):
        from .config import RunConfig  # local: config builds on leaf modules

        self.run_cfg = run_cfg if run_cfg is not None else RunConfig()
        self.backbone_cfg = backbone_cfg or self.run_cfg.backbone_config()
        self.det_cfg = self.run_cfg.detector_config()
        self.pool_cfg = self.run_cfg.pool_config()
        self.codec = AlphabetCodec(self.run_cfg.get("data.alphabet"))
        self.rec_cfg = RecognizerConfig(
            in_channels=self.backbone_cfg.out_channels(),
            num_classes=self.codec.num_classes,
            hidden=self.run_cfg.get_int("recognizer.hidden"),
            pool_height=self.pool_cfg.out_height,
            context_convs=self.run_cfg.get_int("recognizer.context_convs"),
        )
        self.head_stride = self.backbone_cfg.total_pool_stride()
        seed = self.run_cfg.get_int("train.seed") if seed is None else seed
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA11]))
        self.params = {}
        self.params.update(bb.init_backbone_params(self.backbone_cfg, rng))
        self.params.update(det.init_detector_params(
            self.det_cfg, self.backbone_cfg.out_channels(), rng))
        self.params.update(init_recognizer_params(self.rec_cfg, rng))
        self.shared_runs = 0
        self._anchor_cache = {}

    def _count_shared(self):
        self.shared_runs += 1

    def forward_features(self, image) -> FeatureBundle:
        image = ad.as_tensor(image)
        shared, d, r = bb.forward_shared(image, self.backbone_cfg, self.params,
                                         on_shared_run=self._count_shared)
        return FeatureBundle(shared, d, r, (image.shape[2], image.shape[3]))

    def anchors_for(self, fm_h, fm_w):
        key = (fm_h, fm_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = det.generate_anchors(
                fm_h, fm_w, self.head_stride,
                self.det_cfg.scales, self.det_cfg.ratios)
        return self._anchor_cache[key]

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def trainable_names(self, phase):
        if phase == "joint":
            return set(self.params)
        if phase == "warmup":
            return {n for n in self.params
                    if n.startswith("shared/") or n.startswith("det/")}
        if phase == "heads":
            return {n for n in self.params if not n.startswith("shared/")}
        raise ConfigError(f"unknown training phase {phase!r}")


def build_model(run_cfg, seed=None) -> JointModel:
    return JointModel(run_cfg, seed=seed)


def build_model_for_backbone(backbone_cfg, seed=0) -> JointModel:
    """Model around an explicit trunk config; used by the efficiency report."""
    from .config import RunConfig

    cfg = RunConfig()
    cfg.values["backbone.sharing_boundary"] = backbone_cfg.sharing_boundary or "none"
    return JointModel(cfg, seed=seed, backbone_cfg=backbone_cfg)


# ---------------------------------------------------------------------------
# multi-task loss
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    loss: ad.Tensor = field(repr=False, default=None)
    total: float = 0.0
    det_total: float = 0.0
    ctc_total: float = 0.0
    cls: float = 0.0                    # classification, both detection stages
    reg: float = 0.0                    # box regression, both detection stages
    skipped_lines: int = 0


def _jitter_box(box, amount, rng, image_hw):
    if amount <= 0:
        return box
    h_img, w_img = image_hw
    d = rng.uniform(-1.0, 1.0, size=4) * amount * box.h
    jittered = Box(box.x + d[0], box.y + d[1],
                   max(box.w + d[2], 2.0), max(box.h + d[3], 2.0))
    return jittered.clipped(w_img, h_img) or box


def _detection_losses(model, bundle, gt_array, cfg, rng):
    """Anchor-stage plus proposal-stage losses; returns loss tensor, parts,
    and the positive proposals for detection-sourced recognition."""
    fm_h, fm_w = bundle.det.shape[2], bundle.det.shape[3]
    anchors = model.anchors_for(fm_h, fm_w)
    dcfg = model.det_cfg
    rpn_cls, rpn_reg = det.rpn_forward(bundle.det, model.params, dcfg)
    assign = det.assign_anchors(anchors, gt_array, dcfg.pos_iou, dcfg.neg_iou)
    idx = det.sample_assignment(assign, rng, dcfg.rpn_sample, dcfg.rpn_pos_fraction)
    rpn_loss, rpn_parts = det.detection_loss(
        ad.take_rows(rpn_cls, idx), ad.take_rows(rpn_reg, idx),
        assign.labels[idx], assign.targets[idx], gamma=cfg.regression_weight)

    proposals = det.propose(anchors, rpn_cls.data, rpn_reg.data,
                            bundle.image_hw, dcfg)
    prop_boxes = [p[0] for p in proposals]
    prop_boxes += [Box(*row) for row in gt_array]    # keep positives available
    prop_array = np.array([[b.x, b.y, b.w, b.h] for b in prop_boxes]).reshape(-1, 4)
    passign = det.assign_anchors(prop_array, gt_array,
                                 dcfg.roi_pos_iou, dcfg.roi_neg_iou)
    pidx = det.sample_assignment(passign, rng, dcfg.roi_sample,
                                 dcfg.rpn_pos_fraction)
    cls_maps, reg_maps = det.ps_score_maps(bundle.det, model.params)
    k = dcfg.pool_grid
    logits_rows, reg_rows, labels, targets = [], [], [], []
    pos_proposals = []
    for i in pidx:
        box = prop_boxes[i]
        try:
            votes = det.ps_roi_pool(cls_maps, box, model.head_stride, k)
            offs = det.ps_roi_pool(reg_maps, box, model.head_stride, k)
        except EmptyRegionError:
            continue
        logits_rows.append(ad.reshape(votes, (1, 2)))
        reg_rows.append(ad.reshape(offs, (1, 4)))
        labels.append(int(passign.labels[i]))
        targets.append(passign.targets[i])
        if passign.labels[i] == 1:
            pos_proposals.append((box, int(passign.matched_gt[i])))
    if logits_rows:
        head_loss, head_parts = det.detection_loss(
            ad.concat(logits_rows, axis=0), ad.concat(reg_rows, axis=0),
            np.array(labels), np.array(targets), gamma=cfg.regression_weight)
        total = ad.add(rpn_loss, head_loss)
        parts = {"cls": rpn_parts["cls"] + head_parts["cls"],
                 "reg": rpn_parts["reg"] + head_parts["reg"]}
    else:
        total, parts = rpn_loss, dict(rpn_parts)
    return total, parts, pos_proposals


def joint_loss(image, gt_boxes, gt_texts, model, cfg, rng,
               include_recognition=True) -> LossBreakdown:
    """Combined loss for one labeled image.

    Detection covers both stages; recognition pools each text line from the
    recognizer branch (ground-truth boxes by default, optionally jittered)
    and sums the CTC losses. Lines whose region or label is unusable are
    skipped and counted, never fatal.
    """
    if len(gt_boxes) != len(gt_texts):
        raise DatasetError("one transcription per box required")
    bundle = model.forward_features(image)
    gt_array = np.array([[b.x, b.y, b.w, b.h] for b in gt_boxes]).reshape(-1, 4)
    det_loss, parts, pos_proposals = _detection_losses(
        model, bundle, gt_array, cfg, rng)

    skipped = 0
    ctc_terms = []
    if include_recognition and gt_texts:
        if cfg.recognition_source == "ground_truth":
            line_boxes = [(_jitter_box(b, cfg.box_jitter, rng, bundle.image_hw), t)
                          for b, t in zip(gt_boxes, gt_texts)]
        else:
            best = {}
            for box, g in pos_proposals:
                best.setdefault(g, box)
            line_boxes = [(best[g], gt_texts[g]) for g in sorted(best)]
            skipped += len(gt_texts) - len(line_boxes)
        for box, text in line_boxes:
            try:
                pooled = text_pool(bundle.rec, box, model.head_stride,
                                   model.pool_cfg)
                logits = fcr_forward(pooled, model.params, model.rec_cfg)
                lp = ad.log_softmax(logits, axis=1)
                ctc_terms.append(ctc_loss(lp, model.codec.encode(text)))
            except (EmptyRegionError, InfeasibleLabelError) as e:
                log.debug("skipping line %r: %s", text, e)
                skipped += 1
    elif include_recognition:
        pass                                         # no lines on this page

    if ctc_terms:
        ctc_sum = ctc_terms[0]
        for term in ctc_terms[1:]:
            ctc_sum = ad.add(ctc_sum, term)
        total = ad.add(det_loss, ad.scale(ctc_sum, cfg.recognition_weight))
        ctc_val = ctc_sum.item()
    else:
        total = det_loss
        ctc_val = 0.0
    return LossBreakdown(loss=total, total=total.item(), det_total=det_loss.item(),
                         ctc_total=ctc_val, cls=parts["cls"], reg=parts["reg"],
                         skipped_lines=skipped)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def end_to_end_infer(image, model, score_thr=None):
    """Detect lines, then transcribe each from the recognizer branch.

    The trunk (and with it the shared prefix) runs exactly once per image;
    every detection reuses the same feature maps. Returns a list of
    (Box, text, score).
    """
    bundle = model.forward_features(image)
    detections = det.detect_from_features(bundle.det, model, bundle.image_hw,
                                          score_thr=score_thr)
    out = []
    for d in detections:
        try:
            pooled = text_pool(bundle.rec, d.box, model.head_stride, model.pool_cfg)
        except EmptyRegionError:
            log.debug("skipping detection %s: empty pooled region", d.box)
            continue
        logits = fcr_forward(pooled, model.params, model.rec_cfg)
        lp = ad.log_softmax(logits, axis=1)
        out.append((d.box, greedy_decode(lp, model.codec), d.score))
    return out


def recognition_stage_timer(model, input_hw, n_regions=3):
    """Closure timing the recognizer's marginal work for one image.

    The shared prefix is precomputed outside the closure (the detector has
    already paid for it); the closure runs the recognizer branch suffix,
    text pooling, and the recognition head for a fixed set of line regions.
    """
    h, w = input_hw
    rng = np.random.default_rng(7)
    image = ad.Tensor(rng.random((1, 1, h, w)))
    prefix, suffix = model.backbone_cfg.split()
    if prefix:
        base = bb.run_stack(image, prefix, model.params, "shared").detach()
    else:
        base = image
    line_h = 4 * model.head_stride
    regions = [Box(8.0, 8.0 + i * (line_h + 8), max(w - 16.0, 16.0), float(line_h))
               for i in range(n_regions)]

    def run():
        feats = bb.run_stack(base, suffix, model.params, "rec")
        for box in regions:
            pooled = text_pool(feats, box, model.head_stride, model.pool_cfg)
            fcr_forward(pooled, model.params, model.rec_cfg)

    return run


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    phase: str
    total: float
    det: float
    ctc: float
    cls: float
    reg: float
    skipped: int
    val_f: float

    def row(self):
        return [self.epoch, self.phase, self.total, self.det, self.ctc,
                self.cls, self.reg, self.skipped, self.val_f]


METRICS_HEADER = ["epoch", "phase", "total", "det", "ctc", "cls", "reg",
                  "skipped_lines", "val_f"]


class _ImageCache:
    """Images kept as uint8; converted per use so memory stays small."""

    def __init__(self, entries):
        self.entries = entries
        self._data = [None] * len(entries)

    def __len__(self):
        return len(self.entries)

    def image(self, i):
        if self._data[i] is None:
            img = read_pgm(self.entries[i].image_path)
            self._data[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        return self._data[i].astype(np.float64) / 255.0

    def annotations(self, i):
        return self.entries[i].annotations


def _phase_for(epoch, cfg):
    if cfg.strategy == "joint":
        return "joint"
    return "warmup" if epoch < cfg.warmup_epochs else "heads"


def train(entries, run_cfg, out_dir=None, val_entries=None, resume=None,
          progress=None):
    """Train on manifest entries; returns (model, stats list, adam state, rng).

    With ``resume`` (a loaded Checkpoint) training continues from the saved
    epoch, optimizer moments, and RNG state, reproducing an unbroken run
    exactly. Per-epoch stats are appended to ``out_dir``/metrics.csv.
    """
    if not entries:
        raise DatasetError("training set is empty")
    cfg = train_config_from(run_cfg)
    cache = _ImageCache(entries)
    val_cache = _ImageCache(val_entries) if val_entries else None

    if resume is not None:
        model = model_from_checkpoint(resume)
        state = ad.AdamState()
        state.m = {k: v.copy() for k, v in resume.adam_m.items()}
        state.v = {k: v.copy() for k, v in resume.adam_v.items()}
        state.t = resume.adam_t
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        model = build_model(run_cfg)
        state = ad.AdamState()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7247]))
        start_epoch = 0

    stats = []
    for epoch in range(start_epoch, cfg.epochs):
        phase = _phase_for(epoch, cfg)
        trainable = model.trainable_names(phase)
        order = rng.permutation(len(cache))
        sums = np.zeros(5)
        skipped = 0
        pos = 0
        while pos < len(order):
            batch = order[pos:pos + cfg.batch]
            pos += cfg.batch
            model.zero_grads()
            for i in batch:
                anns = cache.annotations(int(i))
                boxes = [b for b, _ in anns]
                texts = [t for _, t in anns]
                lb = joint_loss(cache.image(int(i)), boxes, texts, model, cfg,
                                rng, include_recognition=(phase != "warmup"))
                if not np.isfinite(lb.total):
                    raise NumericError(
                        f"training diverged at epoch {epoch}: loss {lb.total}")
                lb.loss.backward()
                sums += [lb.total, lb.det_total, lb.ctc_total, lb.cls, lb.reg]
                skipped += lb.skipped_lines
            grads = {}
            for name in trainable:
                t = model.params[name]
                if t.grad is not None:
                    grads[name] = t.grad / len(batch)
            ad.adam_step({n: model.params[n].data for n in grads}, grads, state,
                         lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        means = sums / len(cache)
        val_f = float("nan")
        if val_cache is not None and len(val_cache):
            results = []
            for i in range(len(val_cache)):
                preds = end_to_end_infer(val_cache.image(i), model)
                results.append(ev.match_end_to_end(preds, val_cache.annotations(i)))
            val_f = ev.combine_end_to_end(results).f_measure
        st = EpochStats(epoch, phase, *(float(v) for v in means), skipped, val_f)
        stats.append(st)
        if out_dir is not None:
            _write_metrics(out_dir, stats)
        if progress is not None:
            progress(st)
    return model, stats, state, rng


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _write_metrics(out_dir, stats):
    import os

    lines = [",".join(METRICS_HEADER)]
    lines += [",".join(_fmt(v) for v in s.row()) for s in stats]
    atomic_write_text(os.path.join(out_dir, "metrics.csv"), "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    config_text: str
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    rng_state: dict
    epoch: int


def make_checkpoint(model, state, rng, epoch) -> Checkpoint:
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        config_text=model.run_cfg.to_text(),
        params={n: t.data.copy() for n, t in model.params.items()},
        adam_m={n: v.copy() for n, v in state.m.items()},
        adam_v={n: v.copy() for n, v in state.v.items()},
        adam_t=state.t,
        rng_state=rng.bit_generator.state,
        epoch=epoch,
    )


def _write_record(buf, name, arr):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    buf.write(struct.pack("<BB", 0, arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(arr.astype("<f8").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_record(r):
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode("utf-8")
    tag, ndim = r.unpack("<BB")
    if tag != 0:
        raise CheckpointCorruptError(f"unknown dtype tag {tag}")
    shape = tuple(r.unpack("<I")[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape).copy()
    return name, arr


def save_checkpoint(path, ckpt):
    """Binary little-endian format; save -> load -> save is byte identical."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    cb = ckpt.config_text.encode("utf-8")
    buf.write(struct.pack("<Q", len(cb)))
    buf.write(cb)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        _write_record(buf, name, ckpt.params[name])
    opt = {f"{n}.m": v for n, v in ckpt.adam_m.items()}
    opt.update({f"{n}.v": v for n, v in ckpt.adam_v.items()})
    buf.write(struct.pack("<I", len(opt)))
    for name in sorted(opt):
        _write_record(buf, name, opt[name])
    buf.write(struct.pack("<Q", ckpt.adam_t))
    rb = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(rb)))
    buf.write(rb)
    buf.write(struct.pack("<I", ckpt.epoch))
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (clen,) = r.unpack("<Q")
    config_text = r.take(clen).decode("utf-8")
    (n_params,) = r.unpack("<I")
    params = dict(_read_record(r) for _ in range(n_params))
    (n_opt,) = r.unpack("<I")
    adam_m, adam_v = {}, {}
    for _ in range(n_opt):
        name, arr = _read_record(r)
        if name.endswith(".m"):
            adam_m[name[:-2]] = arr
        elif name.endswith(".v"):
            adam_v[name[:-2]] = arr
        else:
            raise CheckpointCorruptError(f"unexpected optimizer record {name!r}")
    (adam_t,) = r.unpack("<Q")
    (rlen,) = r.unpack("<I")
    rng_state = json.loads(r.take(rlen).decode("utf-8"))
    (epoch,) = r.unpack("<I")
    return Checkpoint(version, config_text, params, adam_m, adam_v,
                      adam_t, rng_state, epoch)


def model_from_checkpoint(ckpt) -> JointModel:
    from .config import parse_config_text

    run_cfg = parse_config_text(ckpt.config_text)
    model = build_model(run_cfg)
    if set(model.params) != set(ckpt.params):
        raise CheckpointCorruptError("checkpoint parameter set mismatch")
    for name, arr in ckpt.params.items():
        if model.params[name].data.shape != arr.shape:
            raise CheckpointCorruptError(f"shape mismatch for {name}")
        model.params[name].data = arr.copy()
    return model
