"""Batch normalization, standard and threshold-scaled (tdBN) flavours."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics.

    In ``tdbn`` mode the normalized activations are multiplied by ``v_th``
    before the affine map, so at init a unit-scale BN feeds its spiking
    neuron roughly N(0, v_th**2).
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "standard"
    v_th: float = 1.0
    num_batches_tracked: int = field(default=0)

    def __post_init__(self):
        if self.mode not in ("standard", "tdbn"):
            raise ValueError(f"unknown batchnorm mode {self.mode!r}")
        if np.any(self.running_var <= 0):
            raise ValueError("running_var must be strictly positive")

    @classmethod
    def create(cls, channels: int, *, mode: str = "standard", v_th: float = 1.0,
               gamma_init: float = 1.0, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.full(channels, gamma_init, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            mode=mode,
            v_th=v_th,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def out_scale(self) -> float:
        return self.v_th if self.mode == "tdbn" else 1.0


def _axes(x: np.ndarray) -> tuple:
    return (0,) if x.ndim == 2 else (0,) + tuple(range(2, x.ndim))


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm(x: Tensor, params: BatchNormParams, training: bool, time_steps: int = 1) -> Tensor:
    """Normalize ``x`` ([N,C] or [N,C,H,W]) per channel.

    The leading axis may hold ``time_steps`` stacked copies of the batch;
    statistics are pooled over all of them, which is what tdBN asks for.
    """
    if x.ndim < 2 or x.shape[1] != params.channels:
        raise ValueError(f"batchnorm: input {x.shape} does not match {params.channels} channels")
    if time_steps < 1 or x.shape[0] % time_steps:
        raise ValueError(f"batchnorm: leading axis {x.shape[0]} not divisible by T={time_steps}")

    xd = x.data
    axes = _axes(xd)
    nd = xd.ndim
    s = params.out_scale
    gamma, beta = params.gamma.data, params.beta.data

    if not training:
        inv_std = 1.0 / np.sqrt(params.running_var + params.eps)
        a = (gamma * s * inv_std).astype(xd.dtype)
        c = (beta - params.running_mean * gamma * s * inv_std).astype(xd.dtype)
        xhat = (xd - _bcast(params.running_mean, nd)) * _bcast(inv_std, nd)
        out = xd * _bcast(a, nd) + _bcast(c, nd)

        def bw_eval(g):
            return (g * _bcast(a, nd),
                    (g * xhat * s).sum(axis=axes).astype(gamma.dtype),
                    g.sum(axis=axes).astype(beta.dtype))

        return record("batchnorm_eval", (x, params.gamma, params.beta), out, bw_eval)

    n = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes)
    centered = xd - _bcast(mu, nd)
    var = (centered * centered).mean(axis=axes)
    inv_std = (1.0 / np.sqrt(var + params.eps)).astype(xd.dtype)
    xhat = centered * _bcast(inv_std, nd)
    out = xhat * _bcast(gamma * s, nd) + _bcast(beta, nd)

    m = params.momentum
    params.running_mean = ((1 - m) * params.running_mean + m * mu).astype(params.running_mean.dtype)
    unbiased = var * n / max(n - 1, 1)
    params.running_var = ((1 - m) * params.running_var + m * unbiased).astype(params.running_var.dtype)
    params.num_batches_tracked += 1

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes) * s
        dbeta = g.sum(axis=axes)
        dxhat = g * _bcast(gamma * s, nd)
        sum_dxhat = dxhat.sum(axis=axes)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes)
        dx = (dxhat - _bcast(sum_dxhat / n, nd) - xhat * _bcast(sum_dxhat_xhat / n, nd)) * _bcast(inv_std, nd)
        return dx, dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    return record("batchnorm", (x, params.gamma, params.beta), out, bw)
