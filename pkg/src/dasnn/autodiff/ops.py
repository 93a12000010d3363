"""Differentiable primitives on :class:`~dasnn.autodiff.tensor.Tensor`.

Every op computes its forward value with numpy, then registers a closure
that maps the upstream gradient to one gradient per input.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, record


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return record("add_scalar", (a,), a.data + c, lambda g: (g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return record("sum", (a,), out, lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return record("mean", (a,), out, lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Left fold of :func:`add`; ``add_n([a, b, c]) == (a + b) + c`` bit for bit."""
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return acc


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1."""
    if a.ndim != b.ndim or a.ndim < 2:
        raise ValueError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ValueError(f"concat_channels: non-channel axes differ {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", (a, b), out, lambda g: (g[:, :ca].copy(), g[:, ca:].copy()))


def concat_channels_n(tensors: Sequence[Tensor]) -> Tensor:
    acc = tensors[0]
    for t in tensors[1:]:
        acc = concat_channels(acc, t)
    return acc


def global_avgpool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avgpool expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

    return record("global_avgpool", (x,), x.data.mean(axis=(2, 3)), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with x [B,F], weight [K,F], bias [K]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", inputs, out, bw)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [B,Cin,H,W] with weight [Cout,Cin,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xd, wd = x.data, weight.data
    # channel-major im2col: cols[c, i, j, b, y, x] = xpad[b, c, y*stride + i, x*stride + j]
    xp = np.zeros((cin, b, hp, wp), dtype=xd.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = xd.transpose(1, 0, 2, 3)
    cols = np.empty((cin, kh, kw, b, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    del xp
    cols2 = cols.reshape(cin * kh * kw, -1)
    w2 = wd.reshape(cout, -1)
    out = (w2 @ cols2).reshape(cout, b, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols2.T).reshape(wd.shape)
        gcols = (w2.T @ g2).reshape(cin, kh, kw, b, ho, wo)
        gxp = np.zeros((cin, b, hp, wp), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw.astype(wd.dtype, copy=False)

    return record("conv2d", (x, weight), out, bw)


def cross_entropy_smoothed(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross-entropy against label-smoothed one-hot targets."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be [B,K], got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0,1), got {smoothing}")
    b, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != b:
        raise ValueError(f"{targets.shape[0]} targets for batch of {b}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise ValueError(f"target index out of range for {k} classes")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full_like(z, smoothing / k)
    q[np.arange(b), targets] += 1.0 - smoothing
    loss = np.asarray(-(q * logp).sum() / b, dtype=z.dtype)

    def bw(g):
        return ((np.exp(logp) - q) * (g / b),)

    return record("cross_entropy", (logits,), loss, bw)


def repeat_time(x: Tensor, steps: int) -> Tensor:
    """[B,...] -> [T*B,...], the same frame at every time step (time-major)."""
    if steps < 1:
        raise ValueError("time steps must be >= 1")
    b = x.shape[0]
    out = np.concatenate([x.data] * steps, axis=0) if steps > 1 else x.data.copy()

    def bw(g):
        return (g.reshape((steps, b) + x.shape[1:]).sum(axis=0),)

    return record("repeat_time", (x,), out, bw)


def mean_time(x: Tensor, steps: int) -> Tensor:
    """[T*B,...] -> [B,...] average over the leading time fold."""
    n = x.shape[0]
    if steps < 1 or n % steps:
        raise ValueError(f"cannot split leading axis {n} into {steps} time steps")
    b = n // steps
    folded = x.data.reshape((steps, b) + x.shape[1:])

    def bw(g):
        return (np.broadcast_to(g / steps, folded.shape).reshape(x.shape).copy(),)

    return record("mean_time", (x,), folded.mean(axis=0), bw)
