"""Convolutional trunk with a movable sharing boundary.

The trunk is an ordered list of named conv/pool layers. Layers up to and
including the boundary run once per image; everything after it is duplicated
into a detector copy and a recognizer copy with independent parameters.
Also hosts the receptive-field and FLOP calculators used by the efficiency
reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, LayerLookupError

VGG_CONV_WIDTHS = (8, 8, 16, 16, 32, 32, 32, 64, 64, 64)

_VGG_CONV_NAMES = ("conv1_1", "conv1_2", "conv2_1", "conv2_2",
                   "conv3_1", "conv3_2", "conv3_3",
                   "conv4_1", "conv4_2", "conv4_3")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str                 # "conv" | "pool"
    kernel: int
    stride: int
    pad: int
    out_channels: int | None = None


@dataclass
class BackboneConfig:
    layers: list[LayerSpec]
    sharing_boundary: str | None = None
    in_channels: int = 1

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate layer names in backbone config")
        for l in self.layers:
            if l.kind == "conv":
                if (l.kernel, l.stride, l.pad) != (3, 1, 1) or not l.out_channels:
                    raise ConfigError(f"conv layer {l.name} must be 3x3 stride 1 pad 1")
            elif l.kind == "pool":
                if (l.kernel, l.stride) != (2, 2):
                    raise ConfigError(f"pool layer {l.name} must be 2x2 stride 2")
            else:
                raise ConfigError(f"unknown layer kind {l.kind!r}")
        if self.sharing_boundary is not None and self.sharing_boundary not in names:
            raise ConfigError(f"sharing boundary {self.sharing_boundary!r} not a layer")

    def index_of(self, name):
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise LayerLookupError(f"unknown layer {name!r}")

    def split(self):
        """(shared prefix, per-branch suffix) around the boundary."""
        if self.sharing_boundary is None:
            return [], list(self.layers)
        i = self.index_of(self.sharing_boundary)
        return list(self.layers[:i + 1]), list(self.layers[i + 1:])

    def out_channels(self):
        convs = [l for l in self.layers if l.kind == "conv"]
        return convs[-1].out_channels if convs else self.in_channels

    def total_pool_stride(self):
        s = 1
        for l in self.layers:
            s *= l.stride
        return s


def vgg_prefix(widths=VGG_CONV_WIDTHS, in_channels=1, sharing_boundary=None):
    """The standard conv1_1..conv4_3 stack with stage pools after 1_2, 2_2, 3_3."""
    widths = tuple(widths)
    if len(widths) != 10:
        raise ConfigError("vgg prefix needs 10 conv widths")
    layers = []
    pool_after = {"conv1_2": "pool1", "conv2_2": "pool2", "conv3_3": "pool3"}
    for name, w in zip(_VGG_CONV_NAMES, widths):
        layers.append(LayerSpec(name, "conv", 3, 1, 1, w))
        if name in pool_after:
            layers.append(LayerSpec(pool_after[name], "pool", 2, 2, 0))
    return BackboneConfig(layers, sharing_boundary, in_channels)


def compact_trunk(widths=VGG_CONV_WIDTHS, in_channels=1, sharing_boundary=None):
    """Trunk used for training on small pages.

    A leading 2x2 pool halves the input before any convolution and the
    stage-3 pool is dropped, so every conv runs at cache-friendly sizes and
    both heads see stride-8 features. Named conv layers are unchanged.
    """
    widths = tuple(widths)
    if len(widths) != 10:
        raise ConfigError("compact trunk needs 10 conv widths")
    layers = [LayerSpec("pool0", "pool", 2, 2, 0)]
    pool_after = {"conv1_2": "pool1", "conv2_2": "pool2"}
    for name, w in zip(_VGG_CONV_NAMES, widths):
        layers.append(LayerSpec(name, "conv", 3, 1, 1, w))
        if name in pool_after:
            layers.append(LayerSpec(pool_after[name], "pool", 2, 2, 0))
    return BackboneConfig(layers, sharing_boundary, in_channels)


# ---------------------------------------------------------------------------
# parameters and forward
# ---------------------------------------------------------------------------

def init_stack_params(layers, in_channels, scope, rng):
    """He-initialized weights for one stack of layers, keyed {scope}/{name}/w|b."""
    params = {}
    c = in_channels
    for l in layers:
        if l.kind != "conv":
            continue
        fan_in = c * l.kernel * l.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(l.out_channels, c, l.kernel, l.kernel))
        params[f"{scope}/{l.name}/w"] = ad.Tensor(w, requires_grad=True)
        params[f"{scope}/{l.name}/b"] = ad.Tensor(np.zeros(l.out_channels), requires_grad=True)
        c = l.out_channels
    return params


def init_backbone_params(config, rng):
    """Shared prefix plus detector/recognizer suffix copies."""
    prefix, suffix = config.split()
    params = {}
    params.update(init_stack_params(prefix, config.in_channels, "shared", rng))
    c_mid = _channels_after(prefix, config.in_channels)
    params.update(init_stack_params(suffix, c_mid, "det", rng))
    params.update(init_stack_params(suffix, c_mid, "rec", rng))
    return params


def _channels_after(layers, in_channels):
    c = in_channels
    for l in layers:
        if l.kind == "conv":
            c = l.out_channels
    return c


def run_stack(x, layers, params, scope):
    """Forward a tensor through conv(+relu)/pool layers under one scope."""
    for l in layers:
        if l.kind == "conv":
            x = ad.conv2d(x, params[f"{scope}/{l.name}/w"], params[f"{scope}/{l.name}/b"],
                          stride=l.stride, pad=l.pad)
            x = ad.relu(x)
        else:
            x = ad.maxpool2d(x, l.kernel, l.stride)
    return x


def forward_shared(image, config, params, on_shared_run=None):
    """Run the trunk once, branching at the boundary.

    Returns (shared_features, detector_features, recognizer_features);
    shared_features is None when nothing is shared. ``on_shared_run`` is
    called once per invocation that executes the shared prefix, which lets
    callers assert the prefix really runs only once per image.
    """
    image = ad.as_tensor(image)
    if image.ndim != 4:
        raise DimensionError("forward_shared expects image[N,C,H,W]")
    h, w = image.shape[2], image.shape[3]
    s = config.total_pool_stride()
    if h % s or w % s:
        raise DimensionError(f"input {h}x{w} not divisible by total pool stride {s}")
    prefix, suffix = config.split()
    if prefix:
        shared = run_stack(image, prefix, params, "shared")
        if on_shared_run is not None:
            on_shared_run()
    else:
        shared = None
    base = shared if shared is not None else image
    det = run_stack(base, suffix, params, "det")
    rec = run_stack(base, suffix, params, "rec")
    return shared, det, rec


# ---------------------------------------------------------------------------
# receptive field and FLOP accounting
# ---------------------------------------------------------------------------

def receptive_field(config, layer_name):
    """(size, jump) of one output cell of ``layer_name`` on the input image.

    size grows by (k-1)*jump per layer and jump multiplies by the stride.
    """
    size, jump = 1, 1
    for l in config.layers:
        size += (l.kernel - 1) * jump
        jump *= l.stride
        if l.name == layer_name:
            return size, jump
    raise LayerLookupError(f"unknown layer {layer_name!r}")


def layer_output_sizes(config, input_hw):
    """Per-layer (h, w, channels) after each layer, keyed by name."""
    h, w = input_hw
    c = config.in_channels
    sizes = {}
    for l in config.layers:
        h = (h + 2 * l.pad - l.kernel) // l.stride + 1
        w = (w + 2 * l.pad - l.kernel) // l.stride + 1
        if l.kind == "conv":
            c = l.out_channels
        sizes[l.name] = (h, w, c)
    return sizes


def flop_count(config, from_layer, to_layer, input_hw):
    """FLOPs over the half-open layer range (from_layer, to_layer].

    ``from_layer=None`` starts at the input. Conv layers cost
    2*k^2*Cin*Cout*Hout*Wout; pool layers cost C*Hout*Wout. The half-open
    convention makes the count additive over any split point.
    """
    names = [l.name for l in config.layers]
    start = 0 if from_layer is None else config.index_of(from_layer) + 1
    stop = config.index_of(to_layer) + 1
    if start >= stop:
        raise LayerLookupError(f"empty layer range ({from_layer!r}, {to_layer!r}]")
    h, w = input_hw
    c = config.in_channels
    total = 0
    for i, l in enumerate(config.layers[:stop]):
        cin = c
        h = (h + 2 * l.pad - l.kernel) // l.stride + 1
        w = (w + 2 * l.pad - l.kernel) // l.stride + 1
        if l.kind == "conv":
            c = l.out_channels
        if i >= start:
            if l.kind == "conv":
                total += 2 * l.kernel * l.kernel * cin * c * h * w
            else:
                total += c * h * w
    del names
    return total


def sharing_saving_fraction(config, boundary, input_hw):
    """Fraction of the recognizer trunk's FLOPs covered by the shared prefix."""
    last = config.layers[-1].name
    full = flop_count(config, None, last, input_hw)
    if boundary is None:
        return 0.0
    return flop_count(config, None, boundary, input_hw) / full
