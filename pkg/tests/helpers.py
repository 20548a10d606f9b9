"""Shared test oracles: central finite differences, a loop-nest conv
reference, and two-pass statistics, all independent of the library code
they check."""

import numpy as np

from camid import autograd as ag


def central_diff(make_loss, arr, h=1e-5):
    """Gradient of a scalar-valued callable by central differences,
    perturbing `arr` in place one element at a time."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        saved = arr[i]
        arr[i] = saved + h
        fp = make_loss()
        arr[i] = saved - h
        fm = make_loss()
        arr[i] = saved
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b),
                                                   floor)))


def check_op_grads(make_out, tensors, seed=0, h=1e-5, tol=1e-4):
    """Finite-difference check of a single op through a fixed random
    projection of its output. `make_out` rebuilds the op node from the
    current tensor values; every tensor in `tensors` must require grad.
    Returns the worst relative error."""
    out = make_out()
    proj = np.random.default_rng(seed).standard_normal(out.values.shape)

    def scalar():
        return float((make_out().values * proj).sum())

    for t in tensors.values():
        t.grad = None
    out._backward(proj)
    worst = 0.0
    for name, t in tensors.items():
        assert t.grad is not None, f"no gradient on {name}"
        fd = central_diff(scalar, t.values, h=h)
        err = max_rel_err(t.grad, fd)
        assert err < tol, f"{name}: rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


def check_loss_grads(build, tensors, h=1e-5, tol=1e-4):
    """Same as check_op_grads but for a scalar loss graph, exercising the
    full reverse-topological backward pass."""
    for t in tensors.values():
        t.grad = None
    ag.backward(build())
    worst = 0.0
    for name, t in tensors.items():
        assert t.grad is not None, f"no gradient on {name}"
        fd = central_diff(lambda: float(build().values), t.values, h=h)
        err = max_rel_err(t.grad, fd)
        assert err < tol, f"{name}: rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


def conv2d_reference(x, w, b, stride, padding):
    """Direct six-loop cross-correlation."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    block = xp[ni, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[ni, fi, i, j] = (block * w[fi]).sum() + b[fi]
    return out


def two_pass_std(values):
    """Population std per channel, computed in the plainest possible way."""
    values = np.asarray(values, dtype=np.float64)
    out = []
    for c in range(values.shape[0]):
        plane = values[c].ravel()
        mean = plane.sum() / plane.size
        var = ((plane - mean) ** 2).sum() / plane.size
        out.append(np.sqrt(var))
    return np.array(out)


def two_pass_mean(values):
    values = np.asarray(values, dtype=np.float64)
    return np.array([values[c].ravel().sum() / values[c].size
                     for c in range(values.shape[0])])
