"""Minimal reverse-mode autodiff on dense float64 arrays.

Every operation builds a node in an implicit DAG; ``Tensor.backward`` walks
the recorded nodes once, in reverse topological order. All data is float64
and forward passes are pure, so repeated calls are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, NumericError


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``grad`` is allocated lazily on first accumulation and only for tensors
    with ``requires_grad``. ``parents`` and the backward closure record the
    producing operation; leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self, seed=None):
        """Backpropagate from this tensor (scalar unless ``seed`` given)."""
        if seed is None:
            if self.data.size != 1:
                raise DimensionError("backward() without seed requires a scalar")
            seed = np.ones_like(self.data)
        order = _toposort(self)
        self.accumulate_grad(np.asarray(seed, dtype=np.float64))
        for node in order:
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _toposort(root):
    """Reverse topological order; every node visited exactly once."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return list(reversed(order))


def _make(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  _parents=tuple(p for p in parents if p.requires_grad) if req else (),
                  _backward_fn=backward_fn if req else None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(arr, what="input"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"add shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g if a.shape == out_data.shape else np.sum(g))
        if b.requires_grad:
            b.accumulate_grad(g if b.shape == out_data.shape else np.sum(g))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            a.accumulate_grad(ga if a.shape == out_data.shape else np.sum(ga))
        if b.requires_grad:
            gb = g * a.data
            b.accumulate_grad(gb if b.shape == out_data.shape else np.sum(gb))

    return _make(out_data, (a, b), backward)


def scale(a, s):
    """Multiply by a python float (no graph node for the scalar)."""
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        a.accumulate_grad(g * s)

    return _make(a.data * s, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0  # subgradient at 0 is 0

    def backward(g):
        a.accumulate_grad(g * mask)

    return _make(a.data * mask, (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate_grad(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(p)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def tsum(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate_grad(np.full(a.shape, float(g)))

    return _make(np.sum(a.data), (a,), backward)


def tmean(a):
    a = as_tensor(a)
    n = a.size

    def backward(g):
        a.accumulate_grad(np.full(a.shape, float(g) / n))

    return _make(np.sum(a.data) / n, (a,), backward)


def take_rows(a, index):
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        a.accumulate_grad(ga)

    return _make(a.data[index], (a,), backward)


# ---------------------------------------------------------------------------
# affine and convolution
# ---------------------------------------------------------------------------

def affine(x, w, b):
    """x[N,D] @ w[D,M] + b[M]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine shapes {x.shape} @ {w.shape}")
    out_data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return _make(out_data, (x, w, b), backward)


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    # [C*kh*kw, N*ho*wo] layout keeps the GEMM wide
    n, c = xp.shape[:2]
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * sh, s[3] * sw))
    return np.ascontiguousarray(
        win.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * ho * wo))


def conv2d(x, w, b, stride=1, pad=0):
    """2-D cross-correlation: x[N,Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout].

    Matches the direct sliding-window definition; the internal GEMM only
    reorders the summation.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channels {cin} vs weight {cin_w}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {b.shape}, wanted ({cout},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if sh < 1 or sw < 1:
        raise DimensionError("conv2d stride must be >= 1")
    if kh > h + 2 * ph or kw > wd + 2 * pw:
        raise DimensionError("conv2d kernel larger than padded input")
    check_finite(x.data, "conv2d input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wm = w.data.reshape(cout, -1)
    out = (wm @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = out + b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if b.requires_grad:
            b.accumulate_grad(gm.sum(axis=1))
        if w.requires_grad:
            w.accumulate_grad((gm @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(cin, kh, kw, n, ho, wo)
            dxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, :, di:di + ho * sh:sh, dj:dj + wo * sw:sw] += \
                        dcols[:, di, dj].transpose(1, 0, 2, 3)
            if ph or pw:
                dxp = dxp[:, :, ph:ph + h, pw:pw + wd]
            x.accumulate_grad(dxp)

    return _make(out, (x, w, b), backward)


def maxpool2d(x, k, stride):
    """Max pooling; gradient routes to the first row-major argmax per window."""
    x = as_tensor(x)
    kh, kw = _pair(k)
    sh, sw = _pair(stride)
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise DimensionError("maxpool2d kernel and stride must be >= 1")
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"maxpool2d window {kh}x{kw} exceeds input {h}x{w}")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    s = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data, (n, c, ho, wo, kh, kw),
        (s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]))
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        ii, jj = np.divmod(arg, kw)
        ni, ci, oi, oj = np.indices(arg.shape, sparse=False)
        np.add.at(gx, (ni, ci, oi * sh + ii, oj * sw + jj), g)
        x.accumulate_grad(gx)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------

def log_softmax(x, axis=-1):
    x = as_tensor(x)
    check_finite(x.data, "log_softmax input")
    m = np.max(x.data, axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        soft = np.exp(out)
        x.accumulate_grad(g - soft * np.sum(g, axis=axis, keepdims=True))

    return _make(out, (x,), backward)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross entropy of integer labels against softmax(logits[N,K])."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("softmax_cross_entropy expects logits[N,K], labels[N]")
    n = logits.shape[0]
    if n == 0:
        raise ConfigError("softmax_cross_entropy on empty batch")
    m = np.max(logits.data, axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    logp = z - lse
    losses = -logp[np.arange(n), labels]
    denom = n if reduction == "mean" else 1

    def backward(g):
        soft = np.exp(logp)
        soft[np.arange(n), labels] -= 1.0
        logits.accumulate_grad(float(g) * soft / denom)

    return _make(np.sum(losses) / denom, (logits,), backward)


def smooth_l1(pred, target, reduction="sum"):
    """Huber-style loss: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1 shapes {pred.shape} vs {target.shape}")
    d = pred.data - target
    absd = np.abs(d)
    small = absd < 1.0
    losses = np.where(small, 0.5 * d * d, absd - 0.5)
    denom = pred.size if reduction == "mean" else 1

    def backward(g):
        grad = np.where(small, d, np.sign(d))
        pred.accumulate_grad(float(g) * grad / denom)

    return _make(np.sum(losses) / denom, (pred,), backward)


# ---------------------------------------------------------------------------
# optimizer and gradient checking
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, in place on ``params``.

    ``params`` and ``grads`` are dicts name -> ndarray; missing grads are
    treated as zero (no moment update either, so frozen tensors stay put).
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"grad shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def grad_check(f, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given tensors to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over all coordinates
    of all inputs is returned.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.size != 1:
        raise DimensionError("grad_check requires a scalar-valued function")
    check_finite(out.data, "grad_check output")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*inputs).data)
            flat[i] = orig - eps
            lo = float(f(*inputs).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
