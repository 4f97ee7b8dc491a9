"""Fully convolutional recognition head and CTC transcription loss.

The head collapses a pooled text feature of fixed height H to a 1-high
sequence of per-frame class logits using height-halving conv blocks, keeps
the width (one frame per pooled column), and scores frames against a label
sequence with the blank-augmented CTC forward-backward recursion in log
space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (ConfigError, DimensionError, EnumerationLimitError,
                     InfeasibleLabelError)

BLANK = 0


class AlphabetCodec:
    """Bijection between glyph symbols and class ids 1..N; id 0 is the blank."""

    def __init__(self, symbols):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ConfigError("alphabet symbols must be distinct")
        if not symbols:
            raise ConfigError("alphabet must not be empty")
        self.symbols = symbols
        self._to_id = {s: i + 1 for i, s in enumerate(symbols)}

    @property
    def num_classes(self):
        return len(self.symbols) + 1

    def encode(self, text):
        try:
            return [self._to_id[ch] for ch in text]
        except KeyError as e:
            raise ConfigError(f"symbol {e.args[0]!r} not in alphabet") from None

    def decode(self, ids):
        out = []
        for i in ids:
            if not 1 <= i <= len(self.symbols):
                raise ConfigError(f"id {i} outside alphabet range")
            out.append(self.symbols[i - 1])
        return "".join(out)


# ---------------------------------------------------------------------------
# recognition head
# ---------------------------------------------------------------------------

@dataclass
class RecognizerConfig:
    in_channels: int
    num_classes: int
    hidden: int = 64
    pool_height: int = 8        # input height; must be a power of two
    context_convs: int = 2

    def __post_init__(self):
        h = self.pool_height
        if h < 1 or (h & (h - 1)) != 0:
            raise ConfigError(
                f"pooled height {h} cannot be reduced to 1 by 2x1 pools")

    @property
    def num_blocks(self):
        return self.pool_height.bit_length() - 1


def init_recognizer_params(cfg, rng):
    params = {}
    c = cfg.in_channels

    def conv(name, cin, cout, kh, kw):
        fan_in = cin * kh * kw
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kh, kw))
        params[f"fcr/{name}/w"] = ad.Tensor(w, requires_grad=True)
        params[f"fcr/{name}/b"] = ad.Tensor(np.zeros(cout), requires_grad=True)

    for i in range(cfg.num_blocks):
        conv(f"block{i}", c, cfg.hidden, 3, 3)
        c = cfg.hidden
    for i in range(cfg.context_convs):
        conv(f"ctx{i}", c, cfg.hidden, 1, 3)
        c = cfg.hidden
    conv("cls", c, cfg.num_classes, 1, 1)
    return params


def fcr_forward(pooled, params, cfg):
    """Pooled feature [C, H, W] -> frame logits [W, num_classes].

    Height-halving blocks (3x3 conv, relu, 2x1 max pool) reduce H to 1;
    1x3 context convs mix neighboring frames; a 1x1 conv classifies. Width
    is preserved throughout, so T equals the pooled width.
    """
    x = pooled.data if hasattr(pooled, "data") and not isinstance(pooled, ad.Tensor) else pooled
    x = ad.as_tensor(x)
    if x.ndim != 3:
        raise DimensionError("fcr_forward expects pooled features [C, H, W]")
    c, h, w = x.shape
    if h != cfg.pool_height:
        raise ConfigError(f"pooled height {h} != configured {cfg.pool_height}")
    x = ad.reshape(x, (1, c, h, w))
    for i in range(cfg.num_blocks):
        x = ad.relu(ad.conv2d(x, params[f"fcr/block{i}/w"], params[f"fcr/block{i}/b"],
                              stride=1, pad=1))
        x = ad.maxpool2d(x, (2, 1), (2, 1))
    for i in range(cfg.context_convs):
        x = ad.relu(ad.conv2d(x, params[f"fcr/ctx{i}/w"], params[f"fcr/ctx{i}/b"],
                              stride=1, pad=(0, 1)))
    x = ad.conv2d(x, params["fcr/cls/w"], params["fcr/cls/b"])
    # [1, K, 1, W] -> [W, K]
    x = ad.reshape(x, (cfg.num_classes, w))
    return ad.transpose(x, (1, 0))


# ---------------------------------------------------------------------------
# CTC loss
# ---------------------------------------------------------------------------

def required_frames(label_ids):
    reps = sum(1 for a, b in zip(label_ids, label_ids[1:]) if a == b)
    return len(label_ids) + reps


def _extended(label_ids):
    ext = np.zeros(2 * len(label_ids) + 1, dtype=np.int64)
    ext[1::2] = label_ids
    return ext


def _skip_allowed(ext):
    """skip[s]: may step from s-2 to s (not into blanks or equal symbols)."""
    s = np.zeros(len(ext), dtype=bool)
    s[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return s


def ctc_alpha_beta(lp, ext, skip):
    """Log-space forward/backward lattices over the extended label.

    alpha[t, s] includes the emission at t; beta[t, s] excludes it, so
    logsumexp(alpha[t] + beta[t]) equals the total log probability at every
    frame.
    """
    t_len, _ = lp.shape
    s_len = len(ext)
    neg = -np.inf
    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        with np.errstate(invalid="ignore"):
            acc[skip] = np.logaddexp(acc[skip], prev[:-2][skip[2:]])
        alpha[t] = acc + lp[t, ext]
    beta = np.full((t_len, s_len), neg)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        back_skip = np.zeros(s_len, dtype=bool)
        back_skip[:-2] = skip[2:]
        with np.errstate(invalid="ignore"):
            acc[back_skip] = np.logaddexp(acc[back_skip], nxt[2:][skip[2:]])
        beta[t] = acc
    return alpha, beta


def ctc_loss(log_probs, label_ids):
    """Negative log probability of the label under per-frame log_probs [T,K].

    Gradient w.r.t. the log probabilities is the negative frame posterior
    mass of each class, obtained from the forward-backward lattices.
    """
    lp_t = ad.as_tensor(log_probs)
    lp = lp_t.data
    if lp.ndim != 2:
        raise DimensionError("ctc_loss expects log probs [T, K]")
    t_len, k = lp.shape
    label_ids = list(label_ids)
    if any(not 1 <= i < k for i in label_ids):
        raise ConfigError("label ids must be in 1..K-1")
    if t_len < required_frames(label_ids):
        raise InfeasibleLabelError(
            f"label needs {required_frames(label_ids)} frames, got {t_len}")
    ext = _extended(label_ids)
    skip = _skip_allowed(ext)
    alpha, beta = ctc_alpha_beta(lp, ext, skip)
    s_len = len(ext)
    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail = np.logaddexp(tail, alpha[t_len - 1, s_len - 2])
    logp = tail
    loss = -logp

    def backward(g):
        post = np.exp(alpha + beta - logp)       # [T, S] frame posteriors
        grad = np.zeros_like(lp)
        for s, cls in enumerate(ext):
            grad[:, cls] += post[:, s]
        lp_t.accumulate_grad(-float(g) * grad)

    return ad._make(np.float64(loss), (lp_t,), backward)


def ctc_posterior_check(log_probs, label_ids):
    """Per-frame posterior mass sum_s alpha*beta / p(label); 1.0 everywhere
    when the lattices are consistent."""
    lp = ad.as_tensor(log_probs).data
    ext = _extended(list(label_ids))
    skip = _skip_allowed(ext)
    alpha, beta = ctc_alpha_beta(lp, ext, skip)
    joint = alpha + beta
    m = joint.max(axis=1, keepdims=True)
    logp_t = np.log(np.sum(np.exp(joint - m), axis=1)) + m[:, 0]
    tail = alpha[-1, -1]
    if len(ext) > 1:
        tail = np.logaddexp(tail, alpha[-1, -2])
    return np.exp(logp_t - tail)


def ctc_brute_force(log_probs, label_ids):
    """Oracle: sum the probability of every frame sequence that collapses
    to the label (drop repeats, then blanks). Exponential in T."""
    lp = ad.as_tensor(log_probs).data
    t_len, k = lp.shape
    if k ** t_len > 10 ** 6:
        raise EnumerationLimitError(f"{k}^{t_len} paths exceed the 1e6 cap")
    label = np.asarray(list(label_ids), dtype=np.int64)
    grids = np.meshgrid(*([np.arange(k)] * t_len), indexing="ij")
    paths = np.stack(grids, axis=-1).reshape(-1, t_len)
    keep = np.ones_like(paths, dtype=bool)
    keep[:, 1:] = paths[:, 1:] != paths[:, :-1]
    keep &= paths != BLANK
    counts = keep.sum(axis=1)
    ok = counts == len(label)
    if len(label) > 0:
        pos = np.cumsum(keep, axis=1) - 1
        lookup = label[np.clip(pos, 0, len(label) - 1)]
        ok &= np.all(~keep | (lookup == paths), axis=1)
    probs = np.exp(lp)[np.arange(t_len), paths].prod(axis=1)
    total = probs[ok].sum()
    if total <= 0.0:
        return np.inf
    return -np.log(total)


def greedy_decode(log_probs, codec):
    """Best path decoding: argmax per frame, collapse repeats, drop blanks."""
    lp = ad.as_tensor(log_probs).data
    ids = lp.argmax(axis=1)
    out = []
    prev = BLANK
    for i in ids:
        if i != prev and i != BLANK:
            out.append(int(i))
        prev = i
    return codec.decode(out)
