"""Command-line entry point: train, eval, probe, gradcheck, verify, sweep.

Every subcommand accepts ``--config`` (a JSON training config), ``--seed``
and ``--out``. The exit code is 0 iff every requested check passed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import oracles, report
from .checkpoint import load_checkpoint
from .data import normalize
from .probes import (
    export_probe_csv,
    export_sweep_csv,
    ordering_summary,
    record_gradient_stability,
    sweep_chain_products,
)
from .train import (
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    load_datasets,
    load_model_weights,
    network_from_config,
    train,
    train_two_phase,
)

log = logging.getLogger("dasnn")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def load_config(args) -> TrainConfig:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "data_root", None):
        config = replace(config, data_root=args.data_root)
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _probe_images(config: TrainConfig, n: int, seed: int) -> np.ndarray:
    """``n`` normalized training images (train split statistics)."""
    train_set, _, mean, std = load_datasets(config)
    return normalize(train_set.subset(n, seed=seed).images, mean, std)


def _report_checks(checks, out: Path, name: str) -> int:
    print(oracles.format_table(checks))
    _write_json(out / f"{name}.json",
                [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks])
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


# -- subcommands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    config = load_config(args)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs,
                         warmup_epochs=min(config.warmup_epochs, max(args.epochs - 1, 0)))
    out = _out_dir(args)
    _write_json(out / "config.json", config.to_dict())
    try:
        if args.two_phase:
            r1, r2 = train_two_phase(config, out, args.phase1_epochs, config.epochs)
            report.plot_history(r1.history, out / "phase1" / "history.png", "phase 1 (T=1)")
            history = r2.history
            report.plot_history(history, out / "phase2" / "history.png", f"phase 2 (T={config.T})")
            print(f"phase 1 best test accuracy {max(h['test_accuracy'] for h in r1.history):.4f}")
        else:
            result = train(config, out, resume=args.resume)
            history = result.history
            if history:
                report.plot_history(history, out / "history.png")
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if history:
        print(f"best test accuracy {max(h['test_accuracy'] for h in history):.4f}")
    return 0


def cmd_eval(args) -> int:
    _, meta = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(meta["config"]) if not args.config else load_config(args)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    _, test_set, mean, std = load_datasets(config)
    net = network_from_config(config, test_set.images.shape[1])
    load_model_weights(net, args.checkpoint)
    result = evaluate(net, test_set, meta.get("mean", mean), meta.get("std", std), T=config.T)
    result["checkpoint"] = str(args.checkpoint)
    _write_json(_out_dir(args) / "eval.json", result)
    print(f"test accuracy {result['accuracy']:.4f}  loss {result['loss']:.4f}")
    return 0


def cmd_probe(args) -> int:
    config = load_config(args)
    if args.at == "checkpoint":
        if not args.checkpoint:
            print("error: --at checkpoint needs --checkpoint", file=sys.stderr)
            return 2
        config = TrainConfig.from_dict(load_checkpoint(args.checkpoint)[1]["config"])
        if args.seed is not None:
            config = replace(config, seed=args.seed)
    elif args.variant:
        config = replace(config, topology=replace(config.topology, variant=args.variant))
    images = _probe_images(config, args.images, config.seed)
    net = network_from_config(config, images.shape[1])
    if args.at == "checkpoint":
        load_model_weights(net, args.checkpoint)
    summary = record_gradient_stability(net, images, config.T, training=args.at == "init")
    out = _out_dir(args)
    export_probe_csv(summary.per_layer, out / "probe.csv")
    _write_json(out / "probe.json", {
        "variant": config.topology.variant.value, "at": args.at, "images": len(images),
        "chain_product": summary.chain_product, "log10_chain_product": summary.log10_chain_product,
        "layers": [vars(r) for r in summary.per_layer]})
    report.plot_probe(summary.per_layer, out / "probe.png", f"{config.topology.variant.value} ({args.at})")
    print(f"{len(summary.per_layer)} spiking layers, log10 chain product {summary.log10_chain_product:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    checks = oracles.gradcheck_suite(tol=args.tol, seed=args.seed or 0)
    return _report_checks(checks, _out_dir(args), "gradcheck")


def cmd_verify(args) -> int:
    config = load_config(args)
    try:
        images = _probe_images(replace(config, image_pool=1), args.images, config.seed)
    except FileNotFoundError:
        log.warning("dataset not found, using Gaussian probe images")
        images = None
    seeds = range(config.seed, config.seed + args.seeds)
    return _report_checks(oracles.verify_suite(images, seeds), _out_dir(args), "verify")


def cmd_sweep(args) -> int:
    config = load_config(args)
    images = _probe_images(config, args.images, config.seed)
    seeds = list(range(config.seed, config.seed + args.seeds))
    rows = sweep_chain_products(_str_list(args.variants), _int_list(args.depths), seeds, images,
                                T=config.T, channels=tuple(_int_list(args.channels)), neuron=config.neuron)
    out = _out_dir(args)
    export_sweep_csv(rows, out / "sweep.csv")
    payload = {"rows": [vars(r) for r in rows]}
    order = _str_list(args.variants)
    if len(order) >= 2:
        payload["ordering"] = ordering_summary(rows, tuple(order))
    _write_json(out / "sweep.json", payload)
    report.plot_sweep(rows, out / "sweep.png")
    for r in rows:
        print(f"{r.variant:8s} depth {r.depth:3d} seed {r.seed}  log10 chain product {r.log10_chain_product:9.3f}")
    return 0


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dasnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, out_default):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON training config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=out_default, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train a network", "runs/train")
    p.add_argument("--data-root")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="continue from a 'last' checkpoint")
    p.add_argument("--two-phase", action="store_true", help="train at T=1 first, then at the configured T")
    p.add_argument("--phase1-epochs", type=int, default=4)

    p = add("eval", cmd_eval, "evaluate a checkpoint on the test split", "runs/eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root")

    p = add("probe", cmd_probe, "firing rate and gradient stability per spiking layer", "runs/probe")
    p.add_argument("--at", choices=("init", "checkpoint"), default="init")
    p.add_argument("--variant")
    p.add_argument("--checkpoint")
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--data-root")

    p = add("gradcheck", cmd_gradcheck, "finite-difference checks of every op", "runs/gradcheck")
    p.add_argument("--tol", type=float, default=1e-4)

    p = add("verify", cmd_verify, "gradient-flow propositions and chain/dense equivalence", "runs/verify")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--data-root")

    p = add("sweep", cmd_sweep, "chain products over a depth ladder", "runs/sweep")
    p.add_argument("--depths", default="8,16,32")
    p.add_argument("--variants", default="danet-a,sew,danet-b")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds, counted up from --seed")
    p.add_argument("--channels", default="16,32")
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--data-root")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
