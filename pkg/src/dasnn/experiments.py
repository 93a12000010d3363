"""Desk-scale training experiments with on-disk result caching.

Every run lives in ``<runs_dir>/<name>/`` next to a ``config.json``. A run
whose stored config matches and whose metrics log is complete is loaded
rather than retrained.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import replace
from pathlib import Path

from .topology import TopologySpec
from .train import TrainConfig, train

log = logging.getLogger(__name__)


def default_runs_dir() -> Path:
    return Path(os.environ.get("DASNN_RUNS", Path(__file__).resolve().parents[2] / "runs"))


def read_history(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cached_run(name: str, config: TrainConfig, runs_dir=None, datasets=None) -> list[dict]:
    """Train ``config`` into ``runs_dir/name`` unless a finished run with the
    same config is already there. Returns the per-epoch history."""
    run_dir = Path(runs_dir or default_runs_dir()) / name
    stored = run_dir / "config.json"
    wanted = config.to_dict()
    if stored.exists() and json.loads(stored.read_text()) == wanted:
        history = read_history(run_dir)
        if len(history) == config.epochs:
            return history
    log.info("training %s", name)
    run_dir.mkdir(parents=True, exist_ok=True)
    stored.unlink(missing_ok=True)
    result = train(config, run_dir, datasets=datasets)
    stored.write_text(json.dumps(wanted, indent=1))
    return result.history


# -- MNIST sanity run and the T=1 -> T=4 protocol -----------------------------------

def mnist_sanity_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(
        topology=TopologySpec(variant="danet-a", stages=((2, 16), (2, 32), (2, 64)), time_steps=4),
        epochs=10, warmup_epochs=1, batch_size=16, lr=4.0, schedule="cosine", seed=seed)


def two_phase_configs(seed: int = 0, phase1_epochs: int = 4, phase2_epochs: int = 2,
                      runs_dir=None) -> tuple[TrainConfig, TrainConfig]:
    """Phase 1 trains with one time step; phase 2 starts from its best
    checkpoint at four steps with a short, lower-rate cosine schedule."""
    base = mnist_sanity_config(seed)
    p1 = replace(base.with_time_steps(1), epochs=phase1_epochs)
    init = Path(runs_dir or default_runs_dir()) / "two_phase_t1" / "best"
    p2 = replace(base, epochs=phase2_epochs, warmup_epochs=0, lr=1.0, init_checkpoint=str(init))
    return p1, p2


def run_two_phase(seed: int = 0, runs_dir=None) -> tuple[list[dict], list[dict]]:
    p1, p2 = two_phase_configs(seed, runs_dir=runs_dir)
    h1 = cached_run("two_phase_t1", p1, runs_dir)
    h2 = cached_run("two_phase_t4", p2, runs_dir)
    return h1, h2


# -- depth degradation ---------------------------------------------------------------

DEGRADATION_DEPTHS = {6: ((3, 8), (3, 16)), 24: ((12, 8), (12, 16))}


def degradation_config(variant: str, depth: int, seed: int) -> TrainConfig:
    """Small MNIST run (1000 images pooled to 14x14, T=4, 10 epochs)."""
    return TrainConfig(
        topology=TopologySpec(variant=variant, stages=DEGRADATION_DEPTHS[depth], time_steps=4),
        epochs=10, warmup_epochs=1, batch_size=16, lr=4.0, schedule="cosine", seed=seed,
        train_subset=1000, test_subset=200, image_pool=2)


def run_degradation(variants=("origin", "danet-c"), depths=(6, 24), seeds=(0, 1, 2),
                    runs_dir=None) -> dict:
    """Final-epoch training loss for every (variant, depth, seed)."""
    out = {}
    for v in variants:
        for s in seeds:
            for d in depths:
                h = cached_run(f"degradation_{v}_{d}_s{s}", degradation_config(v, d, s), runs_dir)
                out[(v, d, s)] = h[-1]["train_loss"]
    return out
