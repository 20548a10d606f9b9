"""Minimal differentiable-tensor engine.

Exactly the operations the network needs, each with an explicit backward
rule: conv2d, batchnorm2d, relu, maxpool2d, flatten, linear, softmax,
concat, gather_rows, the two cross-entropy forms, SGD with momentum and L2
weight decay folded into the gradient, and an exponential LR schedule.

Graphs are built define-by-run: every op returns a Tensor holding its
parents and a closure that routes the incoming gradient to them. Training
runs in float32; gradient-check tests run the same code in float64. Every
op validates that its output is finite and raises DivergenceError if not.
"""

from __future__ import annotations

import json
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DivergenceError


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, grad={self.grad is not None})"


class Parameter(Tensor):
    __slots__ = ("momentum", "decay", "name")

    def __init__(self, values, name=None, decay=True):
        super().__init__(np.asarray(values), requires_grad=True)
        self.momentum = np.zeros_like(self.values)
        self.decay = decay
        self.name = name


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise DivergenceError(f"non-finite values out of {op}")
    return arr


def _node(values, parents, backward, op):
    out = Tensor(_finite(values, op),
                 requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.values.shape:
        raise DataError(
            f"gradient shape {g.shape} does not match tensor {t.values.shape}")
    t.grad = g if t.grad is None else t.grad + g


def backward(loss):
    """Populate grads of every requires_grad tensor reachable from `loss`.

    Gradients accumulate across multiple uses of the same tensor. The loss
    must be a scalar (or single-element) tensor.
    """
    if loss.values.size != 1:
        raise DataError(f"loss must be scalar, got shape {loss.values.shape}")
    order = []
    visiting, done = set(), set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            visiting.discard(id(node))
            done.add(id(node))
            order.append(node)
            continue
        if id(node) in done:
            continue
        if id(node) in visiting:
            raise DataError("cycle detected in computation graph")
        visiting.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in done and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params):
    for p in params:
        p.grad = None


# -- ops -----------------------------------------------------------------------


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation of NxCxHxW input with FxCxkhxkw filters."""
    xv, wv, bv = x.values, w.values, b.values
    n, c, h, wd = xv.shape
    f, c2, kh, kw = wv.shape
    if c2 != c or bv.shape != (f,):
        raise DataError(
            f"conv2d shape mismatch: x={xv.shape} w={wv.shape} b={bv.shape}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DataError(f"kernel {kh}x{kw} larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, L, C*kh*kw) with L = Ho*Wo
    col = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, ho * wo, c * kh * kw)
    wflat = wv.reshape(f, -1)
    out = (col @ wflat.T + bv).transpose(0, 2, 1).reshape(n, f, ho, wo)

    def bw(g):
        gmat = g.reshape(n, f, ho * wo).transpose(0, 2, 1)  # (N, L, F)
        if w.requires_grad:
            dw = np.tensordot(gmat, col, axes=([0, 1], [0, 1]))
            _accum(w, dw.reshape(wv.shape))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcol = (gmat @ wflat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcol[:, :, :, :, i, j
                                                          ].transpose(0, 3, 1, 2)
            _accum(x, dxp[:, :, padding:padding + h, padding:padding + wd])

    return _node(out, (x, w, b), bw, "conv2d")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum_bn=0.1, eps=1e-5, count=None):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics (population variance) and
    folds them into the running arrays in place with weight `momentum_bn`
    on the new value; eval mode normalizes by the running statistics.

    When a `count` array is passed, the first 1/momentum_bn updates use
    cumulative averaging instead, so the running statistics reach the
    activation scale immediately rather than decaying from their 0/1
    initialization; `count` tracks the number of updates seen.
    """
    xv = x.values
    n, c, h, w = xv.shape
    if gamma.values.shape != (c,) or beta.values.shape != (c,):
        raise DataError(f"batchnorm2d expects ({c},) gamma/beta")
    if training and n < 2:
        raise DataError("batchnorm2d train mode needs batch size >= 2")

    if training:
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        eff = momentum_bn
        if count is not None:
            seen = float(count[0])
            if (seen + 1.0) * momentum_bn < 1.0:
                eff = 1.0 / (seen + 1.0)
            count[0] = seen + 1.0
        running_mean *= 1.0 - eff
        running_mean += eff * mu
        running_var *= 1.0 - eff
        running_var += eff * var
    else:
        mu = running_mean.astype(xv.dtype)
        var = running_var.astype(xv.dtype)

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.values[None, :, None, None] * xhat \
        + beta.values[None, :, None, None]

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.values[None, :, None, None]
            if training:
                m = n * h * w
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                dx = (dxhat - (s1[None, :, None, None]
                               + xhat * s2[None, :, None, None]) / m) \
                    * ivar[None, :, None, None]
            else:
                dx = dxhat * ivar[None, :, None, None]
            _accum(x, dx)

    return _node(out, (x, gamma, beta), bw, "batchnorm2d")


def relu(x):
    out = np.maximum(x.values, 0)

    def bw(g):
        _accum(x, g * (x.values > 0))

    return _node(out, (x,), bw, "relu")


def maxpool2d(x, kernel, stride):
    """Max pooling; the backward pass routes the gradient to the argmax,
    first occurrence in row-major window order on ties."""
    xv = x.values
    n, c, h, w = xv.shape
    if kernel > h or kernel > w:
        raise DataError(f"pool window {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    view = sliding_window_view(xv, (kernel, kernel), axis=(2, 3))[
        :, :, ::stride, ::stride]
    flat = view.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        g6 = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(g6, idx[..., None], g[..., None], axis=-1)
        g6 = g6.reshape(n, c, ho, wo, kernel, kernel)
        dx = np.zeros_like(xv)
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i:i + stride * ho:stride,
                   j:j + stride * wo:stride] += g6[..., i, j]
        _accum(x, dx)

    return _node(out, (x,), bw, "maxpool2d")


def flatten(x):
    """N x ... -> N x prod(...) reshape."""
    xv = x.values
    out = xv.reshape(xv.shape[0], -1)

    def bw(g):
        _accum(x, g.reshape(xv.shape))

    return _node(out, (x,), bw, "flatten")


def linear(a, w, b):
    """Affine map: (N, D) x (O, D) + (O,) -> (N, O)."""
    av, wv, bv = a.values, w.values, b.values
    if av.ndim != 2 or wv.ndim != 2 or av.shape[1] != wv.shape[1] \
            or bv.shape != (wv.shape[0],):
        raise DataError(
            f"linear shape mismatch: a={av.shape} w={wv.shape} b={bv.shape}")
    out = av @ wv.T + bv

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ wv)
        if w.requires_grad:
            _accum(w, g.T @ av)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _node(out, (a, w, b), bw, "linear")


def softmax(f):
    """Row-wise softmax with max subtraction; sums over all entries."""
    fv = f.values
    z = fv - fv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(f, p * (g - dot))

    return _node(p, (f,), bw, "softmax")


def concat(tensors, axis=1):
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(out, tuple(tensors), bw, "concat")


def gather_rows(x, idx):
    """Select rows of a batch tensor; backward scatter-adds into place."""
    idx = np.asarray(idx, dtype=np.intp)
    out = x.values[idx]

    def bw(g):
        dx = np.zeros_like(x.values)
        np.add.at(dx, idx, g)
        _accum(x, dx)

    return _node(out, (x,), bw, "gather_rows")


PROB_CLAMP = 1e-7


def _check_labels(pv, labels):
    labels = np.asarray(labels)
    if labels.shape != pv.shape:
        raise DataError(
            f"labels shape {labels.shape} does not match probs {pv.shape}")
    one = np.isclose(labels.sum(axis=-1), 1.0)
    binary = np.isin(labels, (0, 1)).all()
    if not (binary and one.all()):
        raise DataError("labels must be one-hot")
    return labels.astype(pv.dtype)


def bce_over_softmax(p, labels, reduction="mean", clamp=PROB_CLAMP):
    """Binary cross entropy averaged over the K classes of softmax outputs.

    loss_n = -(1/K) sum_i [l_i log p_i + (1 - l_i) log(1 - p_i)], with
    probabilities clamped to [clamp, 1 - clamp] before the logs. The
    gradient flows through the clamp (zero outside the active range).
    """
    pv = np.atleast_2d(p.values)
    labels = _check_labels(pv, np.atleast_2d(np.asarray(labels)))
    n, k = pv.shape
    pc = np.clip(pv, clamp, 1.0 - clamp)
    per_sample = -(labels * np.log(pc)
                   + (1.0 - labels) * np.log(1.0 - pc)).sum(axis=-1) / k
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per_sample.sum() * scale, dtype=pv.dtype)

    def bw(g):
        inside = (pv >= clamp) & (pv <= 1.0 - clamp)
        dp = -(labels / pc - (1.0 - labels) / (1.0 - pc)) / k
        dp = (g * scale) * dp * inside
        _accum(p, dp.reshape(p.values.shape))

    return _node(out, (p,), bw, "bce_over_softmax")


def categorical_ce(p, labels, reduction="mean", clamp=PROB_CLAMP):
    """Standard categorical cross entropy on probabilities (ablation form)."""
    pv = np.atleast_2d(p.values)
    labels = _check_labels(pv, np.atleast_2d(np.asarray(labels)))
    n = pv.shape[0]
    pc = np.clip(pv, clamp, 1.0 - clamp)
    per_sample = -(labels * np.log(pc)).sum(axis=-1)
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per_sample.sum() * scale, dtype=pv.dtype)

    def bw(g):
        inside = (pv >= clamp) & (pv <= 1.0 - clamp)
        dp = (g * scale) * (-labels / pc) * inside
        _accum(p, dp.reshape(p.values.shape))

    return _node(out, (p,), bw, "categorical_ce")


def add(a, b):
    if a.values.shape != b.values.shape:
        raise DataError(f"add shape mismatch: {a.values.shape} vs {b.values.shape}")
    out = a.values + b.values

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _node(out, (a, b), bw, "add")


def scale(a, c):
    c = float(c)
    out = a.values * c

    def bw(g):
        _accum(a, g * c)

    return _node(out, (a,), bw, "scale")


# -- optimizer -------------------------------------------------------------------


def sgd_step(params, lr, momentum=0.9, weight_decay=0.005):
    """Classic SGD: g <- grad + wd * param; buf <- momentum * buf + g;
    param <- param - lr * buf. Parameters with decay=False skip the
    L2 term. Parameters without a gradient are left untouched."""
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.values.shape:
            raise DataError(
                f"grad shape {p.grad.shape} != param shape {p.values.shape}")
        g = p.grad
        if weight_decay and p.decay:
            g = g + weight_decay * p.values
        p.momentum = momentum * p.momentum + g
        p.values = p.values - lr * p.momentum


def lr_schedule(epoch, lr0=0.1, gamma=0.9):
    """Exponential decay applied at epoch boundaries."""
    if epoch < 0:
        raise DataError(f"epoch must be >= 0, got {epoch}")
    return lr0 * gamma ** epoch


# -- checkpoints ------------------------------------------------------------------
#
# Binary container: magic, u32 JSON length, JSON {metadata, arrays:[{name,
# shape}]}, then the named arrays as little-endian float32 in order.

CKPT_MAGIC = b"CAMCKPT1"


def save_checkpoint(path, arrays, metadata):
    names = list(arrays)
    header = {
        "metadata": metadata,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise DataError(f"{path} is not a checkpoint")
        (blob_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            arrays[entry["name"]] = np.frombuffer(
                raw, dtype="<f4").reshape(shape).copy()
    return arrays, header["metadata"]
