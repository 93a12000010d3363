"""Self-checks run by the ``gradcheck`` and ``verify`` commands.

Each check returns a :class:`Check` with a pass flag and a short detail
string, so callers can print a table and derive an exit code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    BatchNormParams,
    Tape,
    Tensor,
    add,
    backward,
    batchnorm,
    concat_channels,
    conv2d,
    cross_entropy_smoothed,
    global_avgpool,
    linear,
    mul,
    sum_all,
)
from .autodiff.gradcheck import gradcheck
from .neuron import NeuronConfig, relaxed_spikes, sn_sequence, surrogate_grad
from .probes import (
    check_prop1_gradient_collapse,
    check_prop4_lower_bound,
    compare_dense_vs_chain,
    first_neuron_trend,
    record_gradient_stability,
)
from .topology import (
    ChainStage,
    ConnectionVariant,
    TopologySpec,
    build_block,
    build_network,
    rewrite_chain_as_dense,
)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)


def format_table(checks) -> str:
    width = max(len(c.name) for c in checks)
    return "\n".join(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.detail}" for c in checks)


# -- finite-difference suite ------------------------------------------------------

def gradcheck_suite(tol: float = 1e-4, seed: int = 0) -> list[Check]:
    """Central differences (h=1e-5, float64) for every differentiable op and a
    surrogate-relaxed two-block network."""
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    cases = []
    x, w = t(2, 3, 8, 8), t(4, 3, 3, 3)
    c = rng.standard_normal((2, 4, 8, 8))
    cases.append(("conv2d", lambda: sum_all(mul(conv2d(x, w, 1, 1), Tensor(c))), [x, w]))
    xs, ws = t(2, 3, 7, 7), t(4, 3, 3, 3)
    cs = rng.standard_normal((2, 4, 4, 4))
    cases.append(("conv2d stride 2", lambda: sum_all(mul(conv2d(xs, ws, 2, 1), Tensor(cs))), [xs, ws]))

    for mode in ("standard", "tdbn"):
        bn = BatchNormParams.create(3, mode=mode, v_th=0.5 if mode == "tdbn" else 1.0, dtype=np.float64)
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[:] = rng.standard_normal(3)
        xb = t(4, 3, 3, 3)
        cb = rng.standard_normal((4, 3, 3, 3))
        cases.append((f"batchnorm {mode}",
                      lambda xb=xb, bn=bn, cb=cb: sum_all(mul(batchnorm(xb, bn, True, 2), Tensor(cb))),
                      [xb, bn.gamma, bn.beta]))

    a, b = t(2, 3), t(2, 3)
    ca = rng.standard_normal((2, 3))
    cases.append(("add", lambda: sum_all(mul(add(a, b), Tensor(ca))), [a, b]))
    p, q = t(2, 2, 3, 3), t(2, 3, 3, 3)
    cp = rng.standard_normal((2, 5, 3, 3))
    cases.append(("concat_channels", lambda: sum_all(mul(concat_channels(p, q), Tensor(cp))), [p, q]))
    g = t(2, 3, 4, 4)
    cg = rng.standard_normal((2, 3))
    cases.append(("global_avgpool", lambda: sum_all(mul(global_avgpool(g), Tensor(cg))), [g]))
    lx, lw, lb = t(4, 5), t(3, 5), t(3)
    cl = rng.standard_normal((4, 3))
    cases.append(("linear", lambda: sum_all(mul(linear(lx, lw, lb), Tensor(cl))), [lx, lw, lb]))
    z = t(5, 7)
    targets = rng.integers(0, 7, 5)
    cases.append(("cross_entropy_smoothed", lambda: cross_entropy_smoothed(z, targets, 0.1), [z]))
    for cfg in (NeuronConfig(), NeuronConfig(model="LIF")):
        sx = Tensor(rng.uniform(-0.5, 1.5, (4, 6)), requires_grad=True)
        cs2 = rng.standard_normal((4, 6))
        cases.append((f"sn_sequence {cfg.model} (relaxed)",
                      lambda sx=sx, cfg=cfg, cs2=cs2: sum_all(mul(sn_sequence(sx, cfg), Tensor(cs2))), [sx]))

    checks = []
    for name, fn, params in cases:
        with relaxed_spikes():
            r = gradcheck(fn, params)
        checks.append(Check(f"gradcheck {name}", r.rel_error <= tol, f"rel_err={r.rel_error:.2e}"))

    for variant in ("danet-a", "origin"):
        net = build_network(TopologySpec(variant=variant, stages=((2, 3),), time_steps=2), seed=seed,
                            dtype=np.float64)
        img = Tensor(rng.standard_normal((2, 1, 6, 6)))
        labels = rng.integers(0, 10, 2)
        with relaxed_spikes():
            r = gradcheck(lambda: cross_entropy_smoothed(net(img), labels, 0.1), net.parameters(),
                          max_entries=8, seed=seed)
        checks.append(Check(f"gradcheck 2-block {variant} network (relaxed)", r.rel_error <= tol,
                            f"rel_err={r.rel_error:.2e} over {r.checked} coords"))
    return checks


# -- two-step BPTT expansion -------------------------------------------------------

def two_step_if_gradient(w, a1, a2, c1, c2, v_th=1.0, u_rest=0.0, alpha=4.0) -> float:
    """dL/dw for L = c1*S1 + c2*S2 of one IF neuron with input w*a_t.

    Spatial terms at both steps plus the temporal term carried by U1, with
    the reset gate differentiated through the surrogate.
    """
    def slope(x):
        return float(surrogate_grad(np.float64(x), alpha))
    v1 = w * a1
    s1 = 1.0 if v1 >= v_th else 0.0
    u1 = v1 * (1.0 - s1) + u_rest * s1
    v2 = u1 + w * a2
    g1, g2 = slope(v1 - v_th), slope(v2 - v_th)
    du1_dv1 = (1.0 - s1) + (u_rest - v1) * g1
    return c1 * g1 * a1 + c2 * g2 * (a2 + du1_dv1 * a1)


def check_bptt_two_step() -> Check:
    worst = 0.0
    for w, a1, a2, c1, c2 in [(1.2, 1.0, 0.25, 0.7, -1.3), (0.5, 1.0, 0.9, 1.0, 1.0), (-0.4, 2.0, 1.0, 0.2, 2.5)]:
        wt = Tensor(np.array([[w]]), requires_grad=True)
        with Tape() as tape:
            s = sn_sequence(linear(Tensor(np.array([[a1], [a2]])), wt), NeuronConfig())
            loss = sum_all(mul(s, Tensor(np.array([[c1], [c2]]))))
        backward(tape, loss)
        worst = max(worst, abs(wt.grad[0, 0] - two_step_if_gradient(w, a1, a2, c1, c2)))
    return Check("BPTT two-step IF expansion", worst <= 1e-9, f"max_abs_err={worst:.1e}")


# -- equivalence and propositions ---------------------------------------------------

def dense_equivalence(variant, n_blocks: int, seed: int, channels: int = 3, T: int = 2):
    """Max output difference and max gradient difference between chain and
    dense wiring of the same blocks (float64)."""
    rng = np.random.default_rng(seed)
    blocks = [build_block(variant, channels, channels, 1, rng=rng, dtype=np.float64) for _ in range(n_blocks)]
    chain = ChainStage(blocks)
    dense = rewrite_chain_as_dense(chain)
    if ConnectionVariant.parse(variant) is ConnectionVariant.SEW:
        xd = (rng.random((2 * T, channels, 5, 5)) < 0.3).astype(np.float64)
    else:
        xd = rng.standard_normal((2 * T, channels, 5, 5))
    weight = Tensor(rng.standard_normal(xd.shape))
    outs, grads = [], []
    for stage in (chain, dense):
        x = Tensor(xd.copy(), requires_grad=True)
        for p in chain.parameters():
            p.grad = None
        with Tape() as tape:
            y = stage(x, T)
            loss = sum_all(mul(y, weight))
        backward(tape, loss)
        outs.append(y.data)
        grads.append([x.grad] + [np.zeros_like(p.data) if p.grad is None else p.grad for p in chain.parameters()])
    out_diff = float(np.max(np.abs(outs[0] - outs[1])))
    grad_diff = max(float(np.max(np.abs(a - b))) for a, b in zip(*grads))
    return out_diff, grad_diff


def check_dense_equivalence(seeds=range(10), sizes=(2, 4, 8),
                            variants=("danet-a", "danet-b", "sew")) -> Check:
    worst_out, worst_grad = 0.0, 0.0
    for v in variants:
        for n in sizes:
            for s in seeds:
                o, g = dense_equivalence(v, n, s)
                worst_out, worst_grad = max(worst_out, o), max(worst_grad, g)
    ok = worst_out == 0.0 and worst_grad <= 1e-9
    return Check("chain/dense equivalence (danet-a, danet-b, sew)", ok,
                 f"max_out_diff={worst_out:.1e} max_grad_diff={worst_grad:.1e}")


def check_prop1(ks=(1, 2, 4, 8)) -> list[Check]:
    out = []
    for k in ks:
        r = check_prop1_gradient_collapse(k)
        out.append(Check(f"P1 chain gradient = slope product, k={k}", r.passed,
                         f"max_abs_err={r.max_abs_error:.1e} silent ratio={r.silent_ratios[-1] if r.silent_ratios else 1:.6f}"))
    silent = check_prop1_gradient_collapse(8, spikes=np.zeros((1, 1, 2, 2)))
    bound = 0.0707 ** 8
    g = float(silent.measured.max())
    out.append(Check("P1 silent input, k=8: gradient < 0.0707^8", g < bound and silent.passed,
                     f"gradient={g:.4e} bound={bound:.4e}"))
    return out


def check_prop2(images=None, seed: int = 0) -> list[Check]:
    out = [check_bptt_two_step()]
    rng = np.random.default_rng(seed)
    if images is None:
        images = rng.standard_normal((4, 1, 16, 16)).astype(np.float32)
    net = build_network(TopologySpec(variant="origin", stages=((4, 8),), time_steps=2), seed=seed)
    summary = record_gradient_stability(net, images)
    values = [r.grad_stability for r in summary.per_layer]
    running = np.cumprod(values)
    ok = all(v < 1 for v in values) and bool(np.all(np.diff(running) < 0))
    out.append(Check("P2 chain product shrinks with every appended layer", ok,
                     f"{len(values)} layers, product={summary.chain_product:.3e}"))
    return out


def check_prop3(images, seeds=range(10), stages=((8, 16), (8, 32)), T: int = 4) -> list[Check]:
    reports = []
    for s in seeds:
        net = build_network(TopologySpec(variant="danet-a", stages=stages, time_steps=T,
                                         in_channels=int(np.shape(images)[1])), seed=s)
        reports.append(first_neuron_trend(net, images, T, seed=s))
    positive = sum(r.spearman > 0 for r in reports)
    nondec = sum(r.variance_non_decreasing for r in reports)
    n = len(reports)
    return [
        Check("P3 spearman(block index, first-SN rate) > 0", positive >= math.ceil(0.9 * n),
              f"{positive}/{n} seeds, mean rho={np.mean([r.spearman for r in reports]):.3f}"),
        Check("P3 pre-SN variance non-decreasing", nondec == n, f"{nondec}/{n} seeds, "
              f"min samples per block={min(r.samples for r in reports)}"),
    ]


def check_prop4(ks=(1, 2, 3, 4, 8)) -> list[Check]:
    out = []
    for k in ks:
        r = check_prop4_lower_bound(k)
        detail = (f"max_abs_err={r.max_abs_error:.1e} exceeds_single={r.exceeds_single_term} "
                  f"suffix_form_gap={r.printed_max_gap:.3e}")
        out.append(Check(f"P4 dense gradient = path sum, k={k}", r.passed, detail))
    chain, dense = compare_dense_vs_chain(8)
    out.append(Check("P4 dense vs chain at k=8, silent input", bool(np.all(dense > chain)),
                     f"chain={chain.max():.3e} dense={dense.min():.3e}"))
    return out


def verify_suite(images=None, seeds=range(10)) -> list[Check]:
    rng = np.random.default_rng(0)
    if images is None:
        images = rng.standard_normal((8, 1, 16, 16)).astype(np.float32)
    checks = []
    checks += check_prop1()
    checks += check_prop2()
    checks += check_prop3(images, seeds)
    checks += check_prop4()
    checks.append(check_dense_equivalence(seeds))
    return checks
