"""Flat key=value run configuration.

One plain-text file drives every command: page generation, backbone layout
and sharing boundary, detector settings, pooled height, recognition head,
and training. Unknown keys are rejected so typos fail loudly, and the
effective config (defaults included) is echoed into each run directory.
"""

from __future__ import annotations

from .backbone import BackboneConfig, compact_trunk, vgg_prefix
from .detector import DetectorConfig
from .errors import ConfigError
from .synth import PageSpec
from .text_pool import TextPoolConfig

# key -> (default as text, help)
DEFAULTS = {
    "data.page_width": ("256", "page width in pixels"),
    "data.page_height": ("192", "page height in pixels"),
    "data.lines_min": ("2", "min text lines per page"),
    "data.lines_max": ("5", "max text lines per page"),
    "data.text_len_min": ("3", "min symbols per line"),
    "data.text_len_max": ("12", "max symbols per line (width permitting)"),
    "data.scale_min": ("2.5", "min glyph scale factor"),
    "data.scale_max": ("2.9", "max glyph scale factor"),
    "data.noise": ("0.03", "additive Gaussian noise sigma"),
    "data.margin": ("10", "page margin in pixels"),
    "data.alphabet": ("abcdefghijkl", "symbols drawn on pages"),
    "data.train_frac": ("0.8", "fraction of samples in the train split"),
    "data.val_frac": ("0.1", "fraction of samples in the val split"),
    "data.test_frac": ("0.1", "fraction of samples in the test split"),
    "backbone.trunk": ("compact", "trunk layout: compact | vgg"),
    "backbone.widths": ("8,8,16,16,32,32,32,64,64,64", "conv channel widths"),
    "backbone.sharing_boundary": ("conv2_2", "last shared layer, or none"),
    "detector.scales": ("4,8,16", "anchor scales (multiples of the stride)"),
    "detector.ratios": ("0.5,0.2,0.1", "anchor height:width fractions"),
    "detector.pos_iou": ("0.7", "anchor positive IoU threshold"),
    "detector.neg_iou": ("0.3", "anchor negative IoU threshold"),
    "detector.rpn_sample": ("128", "anchors sampled per image"),
    "detector.rpn_pos_fraction": ("0.5", "max positive fraction in the sample"),
    "detector.roi_pos_iou": ("0.5", "proposal positive IoU threshold"),
    "detector.roi_neg_iou": ("0.4", "proposal negative IoU threshold"),
    "detector.roi_sample": ("64", "proposals sampled per image"),
    "detector.pool_grid": ("3", "position-sensitive grid size k"),
    "detector.pre_nms_top": ("100", "proposals kept before scoring"),
    "detector.nms_iou": ("0.3", "final NMS IoU threshold"),
    "detector.score_thr": ("0.5", "detection score threshold"),
    "detector.rpn_channels": ("64", "RPN hidden channels"),
    "pool.height": ("4", "pooled text height in feature cells"),
    "recognizer.hidden": ("64", "recognition head channels"),
    "recognizer.context_convs": ("2", "1x3 context convs after collapse"),
    "train.strategy": ("joint", "training strategy: joint | separate"),
    "train.epochs": ("12", "training epochs"),
    "train.batch": ("1", "images per optimizer step"),
    "train.lr": ("0.001", "Adam learning rate"),
    "train.beta1": ("0.9", "Adam beta1"),
    "train.beta2": ("0.999", "Adam beta2"),
    "train.eps": ("1e-8", "Adam epsilon"),
    "train.recognition_weight": ("1.0", "weight of the recognition loss term"),
    "train.regression_weight": ("1.0", "weight of the box regression term"),
    "train.seed": ("0", "run seed"),
    "train.warmup_epochs": ("2", "detection-only epochs (separate strategy)"),
    "train.recognition_source": ("ground_truth",
                                 "recognition training boxes: ground_truth | detections"),
    "train.box_jitter": ("0.1", "box jitter as a fraction of line height"),
    "eval.iou_thr": ("0.5", "IoU threshold for matching"),
    "eval.ap_score_thr": ("0.05", "score floor when ranking detections for AP"),
    "bench.timing_runs": ("20", "timing repetitions per boundary"),
    "bench.boundaries": ("none,conv1_2,conv2_2,conv3_3,conv4_3",
                         "sharing boundaries to compare"),
}


class RunConfig:
    """Typed view over the flat key=value table."""

    def __init__(self, values=None):
        self.values = {k: v for k, (v, _) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v
        self._validate()

    # -- raw accessors ----------------------------------------------------
    def get(self, key):
        return self.values[key]

    def get_int(self, key):
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}")

    def get_float(self, key):
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {self.values[key]!r}")

    def get_list(self, key, conv=float):
        try:
            return tuple(conv(v) for v in self.values[key].split(",") if v != "")
        except ValueError:
            raise ConfigError(f"{key} must be comma-separated values")

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = str(value)
        self._validate()

    def _validate(self):
        if self.get_float("train.recognition_weight") <= 0:
            raise ConfigError("train.recognition_weight must be > 0")
        if self.get_float("train.regression_weight") < 0:
            raise ConfigError("train.regression_weight must be >= 0")
        if self.values["train.strategy"] not in ("joint", "separate"):
            raise ConfigError("train.strategy must be joint or separate")
        if self.values["train.recognition_source"] not in ("ground_truth", "detections"):
            raise ConfigError("train.recognition_source must be ground_truth or detections")
        if self.values["backbone.trunk"] not in ("compact", "vgg"):
            raise ConfigError("backbone.trunk must be compact or vgg")

    # -- structured views -------------------------------------------------
    def page_spec(self):
        return PageSpec(
            width=self.get_int("data.page_width"),
            height=self.get_int("data.page_height"),
            lines_range=(self.get_int("data.lines_min"), self.get_int("data.lines_max")),
            text_len_range=(self.get_int("data.text_len_min"),
                            self.get_int("data.text_len_max")),
            scale_range=(self.get_float("data.scale_min"),
                         self.get_float("data.scale_max")),
            noise=self.get_float("data.noise"),
            margin=self.get_int("data.margin"),
            seed=self.get_int("train.seed"),
            alphabet=self.get("data.alphabet"),
        )

    def split_fractions(self):
        return (self.get_float("data.train_frac"), self.get_float("data.val_frac"),
                self.get_float("data.test_frac"))

    def boundary(self):
        b = self.values["backbone.sharing_boundary"]
        return None if b.lower() in ("none", "") else b

    def backbone_config(self, boundary="unset") -> BackboneConfig:
        if boundary == "unset":
            boundary = self.boundary()
        widths = self.get_list("backbone.widths", int)
        builder = compact_trunk if self.values["backbone.trunk"] == "compact" else vgg_prefix
        return builder(widths=widths, in_channels=1, sharing_boundary=boundary)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            scales=self.get_list("detector.scales", float),
            ratios=self.get_list("detector.ratios", float),
            pos_iou=self.get_float("detector.pos_iou"),
            neg_iou=self.get_float("detector.neg_iou"),
            rpn_sample=self.get_int("detector.rpn_sample"),
            rpn_pos_fraction=self.get_float("detector.rpn_pos_fraction"),
            roi_pos_iou=self.get_float("detector.roi_pos_iou"),
            roi_neg_iou=self.get_float("detector.roi_neg_iou"),
            roi_sample=self.get_int("detector.roi_sample"),
            pool_grid=self.get_int("detector.pool_grid"),
            pre_nms_top=self.get_int("detector.pre_nms_top"),
            nms_iou=self.get_float("detector.nms_iou"),
            score_thr=self.get_float("detector.score_thr"),
            rpn_channels=self.get_int("detector.rpn_channels"),
        )

    def pool_config(self) -> TextPoolConfig:
        return TextPoolConfig(out_height=self.get_int("pool.height"))

    def bench_boundaries(self):
        out = []
        for b in self.get("bench.boundaries").split(","):
            b = b.strip()
            out.append(None if b.lower() == "none" else b)
        return out

    def to_text(self):
        lines = ["# effective configuration"]
        for k in DEFAULTS:
            lines.append(f"{k} = {self.values[k]}")
        return "\n".join(lines) + "\n"


def parse_config_text(text):
    values = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return RunConfig(values)


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())
