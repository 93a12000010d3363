"""Integrate-and-fire neurons with hard reset and a sigmoid surrogate gradient.

Two code paths compute the same dynamics:

* :func:`sn_step` composes primitive tape ops (add, scale, mul and the
  spike op), one time step at a time.
* :func:`sn_sequence` is a single fused op over all time steps with a
  hand-written backward-through-time rule. It is what networks use.

Each one checks the other in the test suite.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, add_scalar, detach, mul, scale
from .autodiff.tensor import check_finite, record

_RELAXED = False


@contextlib.contextmanager
def relaxed_spikes():
    """Replace the Heaviside forward with the sigmoid surrogate itself.

    Inside this context the spiking graph is smooth, and its exact derivative
    is the surrogate backward. Finite-difference checks rely on that.
    """
    global _RELAXED
    prev, _RELAXED = _RELAXED, True
    try:
        yield
    finally:
        _RELAXED = prev


def spikes_relaxed() -> bool:
    return _RELAXED


@dataclass(frozen=True)
class NeuronConfig:
    model: str = "IF"
    v_th: float = 1.0
    u_rest: float = 0.0
    tau: float = 2.0
    alpha: float = 4.0
    detach_reset: bool = False

    def __post_init__(self):
        if self.model not in ("IF", "LIF"):
            raise ValueError(f"unknown neuron model {self.model!r}")
        if not self.v_th > self.u_rest:
            raise ValueError("v_th must exceed u_rest")
        if self.model == "LIF" and not self.tau > 1.0:
            raise ValueError("LIF needs tau > 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def decay(self) -> float:
        """Coefficient on the previous potential."""
        return 1.0 - 1.0 / self.tau if self.model == "LIF" else 1.0

    @property
    def gain(self) -> float:
        """Coefficient on the input current."""
        return 1.0 / self.tau if self.model == "LIF" else 1.0

    @property
    def offset(self) -> float:
        return self.u_rest / self.tau if self.model == "LIF" else 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "NeuronConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {"model": self.model, "v_th": self.v_th, "u_rest": self.u_rest,
                "tau": self.tau, "alpha": self.alpha, "detach_reset": self.detach_reset}


def _as_float(x) -> np.ndarray:
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64)


def sigmoid_surrogate(x, alpha: float):
    """Value and derivative of 1/(1+exp(-alpha*x))."""
    x = _as_float(x)
    z = alpha * x
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    val = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # alpha*val*(1-val), in a form that stays symmetric when val is near 1
    deriv = _slope(e, alpha)
    if np.ndim(val) == 0:
        return float(val), float(deriv)
    return val.astype(x.dtype, copy=False), deriv.astype(x.dtype, copy=False)


surrogate = sigmoid_surrogate


def surrogate_grad(x, alpha: float):
    """alpha * s * (1 - s) without the value, written as alpha*e/(1+e)^2."""
    x = _as_float(x)
    return _slope(np.exp(-np.abs(alpha * x)), alpha)


def _slope(e, alpha: float):
    # rounding can push the value a hair above the analytic maximum alpha/4
    return np.minimum(alpha * e / ((1.0 + e) * (1.0 + e)), alpha / 4.0)


def heaviside(x: np.ndarray) -> np.ndarray:
    return (x >= 0).astype(x.dtype)


def spike(v: Tensor, cfg: NeuronConfig) -> Tensor:
    """S = Theta(v - v_th) forward, Theta-bar' backward."""
    d = v.data - cfg.v_th
    s = sigmoid_surrogate(d, cfg.alpha)[0] if _RELAXED else heaviside(d)
    sg = surrogate_grad(d, cfg.alpha).astype(v.dtype, copy=False)
    return record("spike", (v,), np.asarray(s, dtype=v.dtype), lambda g: (g * sg,))


@dataclass
class NeuronState:
    """Membrane potential before (v) and after (u) reset, and the spikes."""

    v: Tensor
    u: Tensor
    s: Tensor

    @classmethod
    def initial(cls, shape, cfg: NeuronConfig, dtype=np.float64) -> "NeuronState":
        rest = Tensor(np.full(shape, cfg.u_rest, dtype=dtype))
        return cls(v=rest, u=rest, s=Tensor(np.zeros(shape, dtype=dtype)))


def sn_step(x_t: Tensor, state: NeuronState | None, cfg: NeuronConfig):
    """Advance one time step. Returns ``(spikes, new_state)``."""
    if state is None:
        state = NeuronState.initial(x_t.shape, cfg, dtype=x_t.dtype)
    if state.u.shape != x_t.shape:
        raise ValueError(f"state shape {state.u.shape} != input shape {x_t.shape}")
    if cfg.model == "IF":
        v = add(state.u, x_t)
    else:
        v = add(scale(state.u, cfg.decay), scale(add_scalar(x_t, cfg.u_rest), cfg.gain))
    check_finite(v.data, "sn_step membrane")
    s = spike(v, cfg)
    gate = detach(s) if cfg.detach_reset else s
    # u = v * (1 - s) + u_rest * s
    u = add(mul(v, add_scalar(scale(gate, -1.0), 1.0)), scale(gate, cfg.u_rest))
    return s, NeuronState(v=v, u=u, s=s)


def simulate(x: np.ndarray, cfg: NeuronConfig):
    """Forward pass only, over the leading time axis.

    Returns ``(s, v, u)`` arrays with the shape of ``x``.
    """
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("need at least one time step")
    relaxed = _RELAXED
    s_all = np.empty_like(x)
    v_all = np.empty_like(x)
    u_all = np.empty_like(x)
    u = np.full(x.shape[1:], cfg.u_rest, dtype=x.dtype)
    a, b, c = cfg.decay, cfg.gain, cfg.offset
    for t in range(x.shape[0]):
        v = u + x[t] if cfg.model == "IF" else a * u + b * x[t] + c
        v_all[t] = v
        if relaxed:
            s = sigmoid_surrogate(v - cfg.v_th, cfg.alpha)[0]
            u = v * (1.0 - s) + cfg.u_rest * s
            s_all[t] = s
        else:
            # binary spikes: v*(1-s) + u_rest*s is exactly a select
            fired = v >= cfg.v_th
            s_all[t] = fired
            u = np.where(fired, x.dtype.type(cfg.u_rest), v)
        u_all[t] = u
    check_finite(v_all, "sn_sequence membrane")
    return s_all, v_all, u_all


def _bptt(g_s: np.ndarray, s: np.ndarray, v: np.ndarray, cfg: NeuronConfig) -> np.ndarray:
    """Backward through time for :func:`simulate`.

    Per step, with sg = Theta-bar'(v_t - v_th):
      dL/dv_t = dL/ds_t * sg + dL/du_t * du_t/dv_t
      du_t/dv_t = (1 - s_t) + (u_rest - v_t) * sg   (gate kept on the graph)
      dL/dx_t = gain * dL/dv_t,   dL/du_{t-1} = decay * dL/dv_t
    """
    sg = surrogate_grad(v - cfg.v_th, cfg.alpha).astype(v.dtype, copy=False)
    g_x = np.empty_like(v)
    g_u = np.zeros(v.shape[1:], dtype=v.dtype)
    a, b = cfg.decay, cfg.gain
    for t in range(v.shape[0] - 1, -1, -1):
        du_dv = 1.0 - s[t]
        if not cfg.detach_reset:
            du_dv = du_dv + (cfg.u_rest - v[t]) * sg[t]
        g_v = g_s[t] * sg[t] + g_u * du_dv
        g_x[t] = b * g_v
        g_u = a * g_v
    return g_x


def sn_sequence(x: Tensor, cfg: NeuronConfig, time_steps: int | None = None, return_state: bool = False):
    """Run the neuron over all time steps as one tape op.

    ``x`` is [T, ...]; alternatively pass ``time_steps`` with ``x`` folded as
    [T*B, ...]. The output has the same shape as ``x``. With
    ``return_state`` the membrane arrays ``(v, u)`` are returned too.
    """
    if time_steps is None:
        if x.shape[0] == 0:
            raise ValueError("need at least one time step")
        folded = x.data
    else:
        if time_steps < 1 or x.shape[0] % time_steps:
            raise ValueError(f"leading axis {x.shape[0]} not divisible by T={time_steps}")
        folded = x.data.reshape((time_steps, -1) + x.shape[1:])
    s, v, u = simulate(folded, cfg)

    def bw(g):
        return (_bptt(g.reshape(s.shape), s, v, cfg).reshape(x.shape),)

    out = record("sn_sequence", (x,), s.reshape(x.shape), bw)
    if return_state:
        return out, v.reshape(x.shape), u.reshape(x.shape)
    return out
