"""Firing-rate and gradient-stability measurement, and numerical checks of
the gradient-flow claims about residual spiking networks.

Gradient stability of a spiking layer is the mean of |d S / d V| under the
surrogate, taken over time, batch and feature positions. It is computable
from a forward pass alone. The chain product of the per-layer values
summarizes how much gradient survives a path through every layer.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .autodiff import Tape, Tensor, backward, no_record, sum_all
from .neuron import NeuronConfig, surrogate_grad
from .topology import BlockUnit, ConnectionVariant, Network, TopologySpec, build_block, build_network, stages_for_depth


@dataclass
class ProbeRecord:
    layer_id: int
    label: str
    firing_rate: float
    grad_stability: float


@dataclass
class StabilitySummary:
    per_layer: list[ProbeRecord]
    chain_product: float
    log10_chain_product: float = field(default=float("nan"))

    @classmethod
    def from_records(cls, records: list[ProbeRecord]) -> "StabilitySummary":
        values = [r.grad_stability for r in records]
        return cls(records, chain_product(values), log10_chain_product(values))


def chain_product(values) -> float:
    return float(np.prod(np.asarray(values, dtype=np.float64)))


def log10_chain_product(values) -> float:
    """Sum of log10 values; stays finite where the plain product underflows."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v <= 0):
        return float("-inf")
    return float(np.sum(np.log10(v)))


def _snapshot_buffers(net):
    return {k: v.copy() for k, v in net.state_dict().items()}


def run_probe_forward(network: Network, images, T: int | None = None, training: bool = True):
    """Forward ``images`` with every spiking layer recording.

    ``training`` selects batch statistics in BN (the state at initialization)
    or running statistics (a trained checkpoint). BN running statistics are
    left untouched either way. Returns the recorded (name, layer) pairs.
    """
    T = T or network.spec.time_steps
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=network.dtype))
    saved = _snapshot_buffers(network)
    was_training = network.training
    network.train(training)
    network.set_recording(True)
    try:
        with no_record():
            network(images, T)
    finally:
        network.load_state_dict(saved)
        network.train(was_training)
        for _, m in network.named_modules():
            if hasattr(m, "record"):
                m.record = False
    layers = network.spiking_neurons()
    if not layers:
        raise ValueError("network has no spiking layers")
    return layers


def _records_from_layers(layers, cfg: NeuronConfig) -> list[ProbeRecord]:
    out = []
    for i, (name, sn) in enumerate(layers):
        if sn.last_v is None:
            raise RuntimeError(f"layer {name} did not record a forward pass")
        rate = float(np.mean(sn.last_s, dtype=np.float64))
        amp = float(np.mean(np.abs(surrogate_grad(sn.last_v.astype(np.float64) - cfg.v_th, cfg.alpha))))
        out.append(ProbeRecord(i, name, rate, amp))
        sn.clear()
    return out


def record_firing_rates(network: Network, images, T: int | None = None,
                        training: bool = True) -> list[ProbeRecord]:
    """One record per spiking layer, in network order."""
    layers = run_probe_forward(network, images, T, training)
    return _records_from_layers(layers, network.neuron)


def record_gradient_stability(network: Network, images, T: int | None = None,
                              training: bool = True) -> StabilitySummary:
    return StabilitySummary.from_records(record_firing_rates(network, images, T, training))


def records_from_neurons(neurons, cfg: NeuronConfig) -> list[ProbeRecord]:
    """Records for spiking layers that already hold a recorded pass."""
    return _records_from_layers([(f"sn{i}", sn) for i, sn in enumerate(neurons)], cfg)


def export_probe_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer_id", "label", "firing_rate", "grad_stability"])
        for r in records:
            w.writerow([r.layer_id, r.label, f"{r.firing_rate:.17g}", f"{r.grad_stability:.17g}"])


def read_probe_csv(path) -> list[ProbeRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [ProbeRecord(int(r["layer_id"]), r["label"], float(r["firing_rate"]),
                        float(r["grad_stability"])) for r in rows]


# -- interblock gradient collapse on a spiking trunk --------------------------

@dataclass
class CollapseReport:
    k: int
    measured: np.ndarray           # per-element d O^{l+k} / d O^l
    product: np.ndarray            # per-element product of surrogate slopes
    max_abs_error: float
    silent_ratios: list[float]     # gradient(k) / gradient(k-1) on silent elements
    geometric: bool

    @property
    def passed(self) -> bool:
        return self.max_abs_error <= 1e-9 and self.geometric


def _check_zero_last_bn(blocks) -> None:
    for b in blocks:
        bns = b.batchnorms()
        if not bns or np.any(bns[-1].params.gamma.data != 0) or np.any(bns[-1].params.beta.data != 0):
            raise ValueError("premise violated: the last BN of every block must output zero")


def scalar_blocks(variant, k: int, cfg: NeuronConfig | None = None, seed: int = 0) -> list[BlockUnit]:
    """k single-channel blocks with zero-initialized last BN, float64."""
    rng = np.random.default_rng(seed)
    return [build_block(variant, 1, 1, 1, cfg, rng, np.float64, zero_init_last_bn=True) for _ in range(k)]


def default_spike_map(seed: int = 0, rate: float = 0.3, shape=(2, 1, 4, 4)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.random(shape) < rate).astype(np.float64)


def _interblock_slopes(blocks, cfg) -> list[np.ndarray]:
    return [surrogate_grad(b.F_prime[-1].last_v[0] - cfg.v_th, cfg.alpha) for b in blocks]


def check_prop1_gradient_collapse(k: int, spikes: np.ndarray | None = None,
                                  blocks: list[BlockUnit] | None = None,
                                  cfg: NeuronConfig | None = None) -> CollapseReport:
    """Gradient across k Origin blocks whose residual branches output zero.

    Under that premise each block is ``O = SN(0 + O_prev)``, so the tape
    gradient must equal the product of the k interblock surrogate slopes,
    element by element. On silent elements every slope is the same value
    below one and the gradient shrinks by that factor per block.
    Runs a single time step so only the spatial path contributes.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = cfg or NeuronConfig()
    blocks = blocks if blocks is not None else scalar_blocks(ConnectionVariant.ORIGIN, k, cfg)
    if len(blocks) != k:
        raise ValueError(f"expected {k} blocks, got {len(blocks)}")
    _check_zero_last_bn(blocks)
    spikes = default_spike_map() if spikes is None else np.asarray(spikes, dtype=np.float64)

    grads = []
    for depth in range(1, k + 1):
        x = Tensor(spikes.copy(), requires_grad=True)
        sns = [b.F_prime[-1] for b in blocks[:depth]]
        for sn in sns:
            sn.record = True
        with Tape() as tape:
            y = x
            for b in blocks[:depth]:
                y = b(y, 1)
            loss = sum_all(y)
        backward(tape, loss)
        grads.append(x.grad.copy())
        slopes = _interblock_slopes(blocks[:depth], cfg)
        for sn in sns:
            sn.record = False
            sn.clear()
    product = np.prod(np.stack(slopes), axis=0)
    measured = grads[-1]
    silent = spikes == 0
    ratios = []
    if silent.any():
        for a, b in zip(grads[1:], grads[:-1]):
            ratios.append(float(np.mean(a[silent] / b[silent])))
    slope0 = surrogate_grad(np.float64(-cfg.v_th + cfg.u_rest), cfg.alpha)
    geometric = all(abs(r - slope0) <= 1e-9 * slope0 for r in ratios) and (slope0 < 1 or not ratios)
    return CollapseReport(k, measured, product, float(np.max(np.abs(measured - product))), ratios,
                          geometric)


# -- dense-additive lower bound ------------------------------------------------

@dataclass
class DenseBoundReport:
    k: int
    measured: np.ndarray
    path_sum: np.ndarray           # all paths through the dense graph
    printed_sum: np.ndarray        # contiguous-suffix closed form
    single_term: np.ndarray        # slope of the last block alone
    max_abs_error: float
    exceeds_single_term: bool
    printed_is_lower_bound: bool
    printed_max_gap: float

    @property
    def passed(self) -> bool:
        return self.max_abs_error <= 1e-9 and (self.k < 2 or self.exceeds_single_term)


def dense_path_sum(slopes) -> np.ndarray:
    """Sum over every path from the first feature to block k.

    Block j consumes the running sum of all earlier features, so a path is
    any increasing subsequence of intermediate blocks ending at k; its
    weight is the product of the slopes it passes through. Enumerated
    explicitly rather than through the closed form.
    """
    d = [np.asarray(s, dtype=np.float64) for s in slopes]
    k = len(d)
    total = np.zeros_like(d[-1])
    for r in range(k):
        for subset in itertools.combinations(range(k - 1), r):
            term = d[-1].copy()
            for i in subset:
                term = term * d[i]
            total = total + term
    return total


def printed_suffix_sum(slopes) -> np.ndarray:
    """``sum_{i=1..k} prod_{j=1..i} d_{k-j+1}``: only contiguous suffix paths."""
    d = [np.asarray(s, dtype=np.float64) for s in slopes]
    total, term = np.zeros_like(d[-1]), np.ones_like(d[-1])
    for s in reversed(d):
        term = term * s
        total = total + term
    return total


def _dense_forward(x: Tensor, blocks, T: int = 1):
    """Dense-additive wiring with ``x`` as the first feature. Returns the last
    block's output tensor."""
    acc, last = x, x
    for b in blocks:
        last = b(acc, T)
        acc = acc + last
    return last


def check_prop4_lower_bound(k: int, spikes: np.ndarray | None = None,
                            blocks: list[BlockUnit] | None = None,
                            cfg: NeuronConfig | None = None) -> DenseBoundReport:
    """Gradient from a stage feature O^l to the output k dense blocks later.

    Blocks are dense-wired Origin blocks with zero residual branches, so
    each block computes ``SN(sum of earlier features)``. The tape gradient
    is compared with the full path enumeration; the contiguous-suffix closed
    form is reported alongside (it drops non-contiguous paths once k >= 3).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = cfg or NeuronConfig()
    blocks = blocks if blocks is not None else scalar_blocks(ConnectionVariant.DANET_C, k, cfg)
    if len(blocks) != k:
        raise ValueError(f"expected {k} blocks, got {len(blocks)}")
    _check_zero_last_bn(blocks)
    spikes = default_spike_map() if spikes is None else np.asarray(spikes, dtype=np.float64)

    x = Tensor(spikes.copy(), requires_grad=True)
    for b in blocks:
        b.F_prime[-1].record = True
    with Tape() as tape:
        loss = sum_all(_dense_forward(x, blocks))
    backward(tape, loss)
    slopes = _interblock_slopes(blocks, cfg)
    for b in blocks:
        b.F_prime[-1].record = False
        b.F_prime[-1].clear()

    measured = x.grad.copy()
    paths = dense_path_sum(slopes)
    printed = printed_suffix_sum(slopes)
    single = np.asarray(slopes[-1])
    return DenseBoundReport(
        k, measured, paths, printed, single,
        max_abs_error=float(np.max(np.abs(measured - paths))),
        exceeds_single_term=bool(np.all(measured > single)),
        printed_is_lower_bound=bool(np.all(printed <= measured * (1 + 1e-12))),
        printed_max_gap=float(np.max(measured - printed)),
    )


def compare_dense_vs_chain(k: int = 8, spikes: np.ndarray | None = None, seed: int = 0,
                           cfg: NeuronConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Input gradients of the same k zero-residual blocks wired as a chain
    (Origin) and densely (DANet-C). Returns ``(chain_grad, dense_grad)``."""
    cfg = cfg or NeuronConfig()
    blocks = scalar_blocks(ConnectionVariant.ORIGIN, k, cfg, seed)
    spikes = np.zeros((2, 1, 4, 4)) if spikes is None else np.asarray(spikes, dtype=np.float64)
    out = []
    for dense in (False, True):
        x = Tensor(spikes.copy(), requires_grad=True)
        with Tape() as tape:
            if dense:
                y = _dense_forward(x, blocks)
            else:
                y = x
                for b in blocks:
                    y = b(y, 1)
            loss = sum_all(y)
        backward(tape, loss)
        out.append(x.grad.copy())
    return out[0], out[1]


# -- firing rate versus block depth ---------------------------------------------

@dataclass
class DepthTrendReport:
    seed: int
    rates: list[list[float]]       # per stage, first-SN firing rate per block
    variances: list[list[float]]   # per stage, variance of that SN's input
    spearman: float                # mean over stages
    variance_non_decreasing: bool
    samples: int


def first_neuron_trend(network: Network, images, T: int | None = None, seed: int = 0,
                       skip_downsample: bool = True) -> DepthTrendReport:
    """Firing rate and input variance of each block's first spiking layer.

    Blocks that change resolution are skipped when ``skip_downsample`` is
    set (their input passes a projection, not the identity sum).
    """
    run_probe_forward(network, images, T, training=True)
    rates, variances, rhos = [], [], []
    samples = None
    for stage in network.stages:
        r, v = [], []
        for block in stage.blocks:
            sn = block.first_neuron()
            if skip_downsample and not block.identity_shortcut and stage is not network.stages[0]:
                sn.clear()
                continue
            inp = sn.last_input.astype(np.float64)
            r.append(float(sn.last_s.mean(dtype=np.float64)))
            v.append(float(inp.var()))
            samples = inp.size if samples is None else min(samples, inp.size)
        rates.append(r)
        variances.append(v)
        if len(r) >= 2:
            rho = spearmanr(np.arange(len(r)), r).statistic
            rhos.append(0.0 if np.isnan(rho) else float(rho))
    for _, sn in network.spiking_neurons():
        sn.clear()
    nondec = all(all(b >= a for a, b in zip(v, v[1:])) for v in variances)
    return DepthTrendReport(seed, rates, variances, float(np.mean(rhos)) if rhos else float("nan"),
                            nondec, int(samples or 0))


# -- depth sweep ---------------------------------------------------------------------

@dataclass
class SweepRow:
    variant: str
    depth: int
    seed: int
    layers: int
    chain_product: float
    log10_chain_product: float
    mean_firing_rate: float


def sweep_chain_products(variants, depths, seeds, images, T: int = 4,
                         channels=(16, 32), neuron: NeuronConfig | None = None,
                         dtype=np.float32) -> list[SweepRow]:
    """Chain product of gradient stability at initialization for every
    (variant, depth, seed). ``depth`` blocks are split evenly over stages."""
    rows = []
    for depth in depths:
        for variant in variants:
            for seed in seeds:
                spec = TopologySpec(variant=variant, stages=stages_for_depth(depth, channels),
                                    time_steps=T, in_channels=int(np.shape(images)[1]))
                net = build_network(spec, neuron, seed=seed, dtype=dtype)
                summary = record_gradient_stability(net, images, T)
                rows.append(SweepRow(spec.variant.value, depth, seed, len(summary.per_layer),
                                     summary.chain_product, summary.log10_chain_product,
                                     float(np.mean([r.firing_rate for r in summary.per_layer]))))
    return rows


def export_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "depth", "seed", "layers", "chain_product", "log10_chain_product",
                    "mean_firing_rate"])
        for r in rows:
            w.writerow([r.variant, r.depth, r.seed, r.layers, f"{r.chain_product:.17g}",
                        f"{r.log10_chain_product:.17g}", f"{r.mean_firing_rate:.17g}"])


def ordering_summary(rows: list[SweepRow], order=("danet-a", "sew", "danet-b")) -> dict:
    """Per seed: is the chain product strictly ordered at every depth, and
    does the first/second variant ratio grow with depth."""
    table = {(r.variant, r.depth, r.seed): r.log10_chain_product for r in rows}
    depths = sorted({r.depth for r in rows})
    seeds = sorted({r.seed for r in rows})
    ordered, growing = 0, 0
    for s in seeds:
        ok = all(all(table[(a, d, s)] > table[(b, d, s)] for a, b in zip(order, order[1:]))
                 for d in depths)
        gaps = [table[(order[0], d, s)] - table[(order[1], d, s)] for d in depths]
        ordered += ok
        growing += all(b > a for a, b in zip(gaps, gaps[1:]))
    return {"seeds": len(seeds), "ordered": ordered, "ratio_growing": growing, "depths": depths}
