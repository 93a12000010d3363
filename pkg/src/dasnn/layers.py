"""Stateful layers over time-folded tensors.

Every activation in a network has a leading axis of size ``T*B``: time
step ``t`` of sample ``b`` lives at row ``t*B + b``. Convolutions and
batch norms treat that axis as a plain batch; spiking neurons unfold it.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import (
    BatchNormParams,
    Tensor,
    batchnorm,
    conv2d,
    linear,
)
from .neuron import NeuronConfig, sn_sequence


class Module:
    training = True

    def forward(self, x: Tensor, T: int) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, T: int) -> Tensor:
        return self.forward(x, T)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def _own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        seen, out = set(), []
        for mname, mod in self.named_modules():
            for pname, p in mod._own_parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append((f"{mname}.{pname}" if mname else pname, p))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for mname, mod in self.named_modules():
            for bname, buf in mod._own_buffers():
                state[f"{mname}.{bname}" if mname else bname] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in self.named_parameters():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]
        for mname, mod in self.named_modules():
            for bname, _ in mod._own_buffers():
                mod._set_buffer(bname, state[f"{mname}.{bname}" if mname else bname])

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Identity(Module):
    def forward(self, x, T):
        return x


class Sequential(Module):
    def __init__(self, *modules: Module):
        self.layers = list(modules)

    def forward(self, x, T):
        for layer in self.layers:
            x = layer(x, T)
        return x

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        # Kaiming normal, fan-out mode
        std = np.sqrt(2.0 / (out_ch * kernel * kernel))
        self.weight = Tensor((rng.standard_normal((out_ch, in_ch, kernel, kernel)) * std).astype(dtype),
                             requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x, T):
        return conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, mode: str = "standard", v_th: float = 1.0,
                 gamma_init: float = 1.0, dtype=np.float32):
        self.params = BatchNormParams.create(channels, mode=mode, v_th=v_th,
                                             gamma_init=gamma_init, dtype=dtype)

    def _own_parameters(self):
        yield "gamma", self.params.gamma
        yield "beta", self.params.beta

    def _own_buffers(self):
        yield "running_mean", self.params.running_mean
        yield "running_var", self.params.running_var

    def _set_buffer(self, name, value):
        setattr(self.params, name, np.array(value, dtype=getattr(self.params, name).dtype))

    def forward(self, x, T):
        return batchnorm(x, self.params, self.training, T)


class SpikingNeuron(Module):
    """Multi-step neuron layer. With ``record`` set it keeps the last
    forward's input current, membrane potential and spikes as arrays
    shaped [T, B, ...]."""

    def __init__(self, cfg: NeuronConfig):
        self.cfg = cfg
        self.record = False
        self.last_input = self.last_v = self.last_s = None

    def forward(self, x, T):
        s, v, _ = sn_sequence(x, self.cfg, time_steps=T, return_state=True)
        if self.record:
            unfold = (T, -1) + x.shape[1:]
            self.last_input = x.data.reshape(unfold)
            self.last_v = v.reshape(unfold)
            self.last_s = s.data.reshape(unfold)
        return s

    def clear(self):
        self.last_input = self.last_v = self.last_s = None


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, out_features).astype(dtype), requires_grad=True)

    def forward(self, x, T):
        return linear(x, self.weight, self.bias)
