"""SGD training loop with warmup, step or cosine decay, and label smoothing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, backward, cross_entropy_smoothed, no_record
from .autodiff.tensor import NonFiniteError
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, Dataset, batches, default_data_root, load_idx_dataset, prefetch
from .neuron import NeuronConfig
from .topology import Network, TopologySpec, build_network

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    topology: TopologySpec = field(default_factory=TopologySpec)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    epochs: int = 10
    warmup_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.1                 # per 256 samples; scaled linearly with batch_size
    momentum: float = 0.9
    weight_decay: float = 1e-4
    bn_weight_decay: bool = False
    schedule: str = "cosine"        # cosine | step
    milestones: tuple = ()
    label_smoothing: float = 0.1
    seed: int = 0
    data_root: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    pad_crop: int = 0
    hflip_p: float = 0.0
    image_pool: int = 1             # average-pool input images by this factor
    init_checkpoint: str | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.topology, dict):
            self.topology = TopologySpec.from_dict(self.topology)
        if isinstance(self.neuron, dict):
            self.neuron = NeuronConfig.from_dict(self.neuron)
        self.milestones = tuple(self.milestones)
        self.validate()

    @property
    def T(self) -> int:
        return self.topology.time_steps

    @property
    def base_lr(self) -> float:
        return self.lr * self.batch_size / 256.0

    def validate(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"schedule must be 'cosine' or 'step', got {self.schedule!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("invalid optimizer settings")
        if self.image_pool < 1:
            raise ValueError("image_pool must be >= 1")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be increasing")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        AugmentConfig(self.pad_crop, self.hflip_p)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topology"] = self.topology.to_dict()
        d["neuron"] = self.neuron.to_dict()
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_time_steps(self, T: int) -> "TrainConfig":
        return replace(self, topology=replace(self.topology, time_steps=T))


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based)."""
    base = config.base_lr
    warm = config.warmup_epochs * steps_per_epoch
    if step < warm:
        return base * step / warm
    if config.schedule == "step":
        epoch = step / steps_per_epoch
        return base * 0.1 ** sum(1 for m in config.milestones if epoch >= m)
    total = config.epochs * steps_per_epoch
    if total <= warm:
        return base
    progress = min((step - warm) / (total - warm), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Momentum SGD with the L2 term folded into the gradient.

    ``v <- momentum * v + (g + wd * p)``; ``p <- p - lr * v``.
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 0.0,
                 no_decay: set[str] | None = None):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = no_decay or set()
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            wd = 0.0 if name in self.no_decay else self.weight_decay
            v = self.velocity[name]
            v *= self.momentum
            v += g if wd == 0.0 else g + wd * p.data
            p.data -= (lr * v).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocities=None):
    """Functional form over plain arrays. Updates ``params`` and ``velocities``
    in place and returns them."""
    if velocities is None:
        velocities = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v
    return params, velocities


def bn_parameter_names(net: Network) -> set[str]:
    return {n for n, _ in net.named_parameters() if n.endswith(".gamma") or n.endswith(".beta")}


@dataclass
class TrainResult:
    history: list[dict]
    best_checkpoint: Path | None
    last_checkpoint: Path | None
    network: Network


def evaluate(net: Network, dataset: Dataset, mean, std, batch_size: int = 256,
             T: int | None = None, smoothing: float = 0.0) -> dict:
    net.eval()
    correct, loss_sum = 0, 0.0
    with no_record():
        for x, y in batches(dataset, batch_size, shuffle_seed=None, mean=mean, std=std):
            logits = net(Tensor(x.astype(net.dtype)), T)
            loss_sum += float(cross_entropy_smoothed(logits, y, smoothing).data) * len(y)
            correct += int((logits.data.argmax(1) == y).sum())
    net.train()
    return {"accuracy": correct / len(dataset), "loss": loss_sum / len(dataset)}


def load_datasets(config: TrainConfig):
    root = Path(config.data_root) if config.data_root else default_data_root()
    k = config.image_pool
    train = load_idx_dataset(root, "train").subset(config.train_subset, seed=config.seed).pooled(k)
    test = load_idx_dataset(root, "test").subset(config.test_subset, seed=config.seed).pooled(k)
    mean, std = train.channel_stats()
    return train, test, mean, std


def network_from_config(config: TrainConfig, in_channels: int | None = None) -> Network:
    spec = config.topology
    if in_channels is not None and in_channels != spec.in_channels:
        spec = replace(spec, in_channels=in_channels)
    return build_network(spec, config.neuron, seed=config.seed, dtype=np.dtype(config.dtype).type)


def _checkpoint_meta(config, epoch, history, best, mean, std):
    return {"config": config.to_dict(), "epoch": epoch, "history": history, "best_accuracy": best,
            "mean": np.asarray(mean).tolist(), "std": np.asarray(std).tolist()}


def _save(path, net, opt, meta):
    arrays = dict(net.state_dict())
    for name, v in opt.velocity.items():
        arrays[f"velocity/{name}"] = v
    return save_checkpoint(path, arrays, meta)


def load_model_weights(net: Network, path) -> dict:
    arrays, meta = load_checkpoint(path)
    net.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("velocity/")})
    return meta


def train(config: TrainConfig, out_dir, resume=None, datasets=None, verbose: bool = True) -> TrainResult:
    """Train and evaluate once per epoch.

    Writes ``metrics.jsonl`` (one record per epoch), ``last`` and ``best``
    checkpoints into ``out_dir``. ``resume`` continues from a ``last``
    checkpoint; ``config.init_checkpoint`` only seeds the weights.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set, mean, std = datasets or load_datasets(config)
    net = network_from_config(config, train_set.images.shape[1])
    opt = SGD(net.named_parameters(), config.momentum, config.weight_decay,
              no_decay=set() if config.bn_weight_decay else bn_parameter_names(net))
    history: list[dict] = []
    start_epoch, best = 0, -1.0
    metrics_path = out / "metrics.jsonl"

    if config.init_checkpoint:
        load_model_weights(net, config.init_checkpoint)
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        net.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("velocity/")})
        for name in opt.velocity:
            opt.velocity[name][...] = arrays[f"velocity/{name}"]
        start_epoch = meta["epoch"] + 1
        history = list(meta["history"])
        best = meta["best_accuracy"]
        metrics_path.write_text("".join(json.dumps(h) + "\n" for h in history))
    else:
        metrics_path.write_text("")

    best_path = out / "best" if best >= 0 else None
    last_path = None
    if config.epochs == 0:
        last_path = _save(out / "last", net, opt, _checkpoint_meta(config, -1, [], best, mean, std))
        return TrainResult([], None, last_path, net)

    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    aug = AugmentConfig(config.pad_crop, config.hflip_p)
    T = config.T
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        net.train()
        loss_sum, correct, seen = 0.0, 0, 0
        it = batches(train_set, config.batch_size, shuffle_seed=config.seed, epoch=epoch,
                     augment_cfg=aug, mean=mean, std=std, aug_seed=config.seed)
        for bi, (x, y) in enumerate(prefetch(it)):
            step = epoch * steps_per_epoch + bi
            lr = lr_at(step, config, steps_per_epoch)
            try:
                with Tape() as tape:
                    logits = net(Tensor(x.astype(net.dtype)), T)
                    loss = cross_entropy_smoothed(logits, y, config.label_smoothing)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                opt.zero_grad()
                backward(tape, loss)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"non-finite values at epoch {epoch}, batch {bi}: {e}") from e
            opt.step(lr)
            loss_sum += value * len(y)
            correct += int((logits.data.argmax(1) == y).sum())
            seen += len(y)
        ev = evaluate(net, test_set, mean, std, T=T)
        record = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen, "train_accuracy": correct / seen,
                  "test_loss": ev["loss"], "test_accuracy": ev["accuracy"],
                  "seconds": round(time.perf_counter() - t0, 3)}
        history.append(record)
        with open(metrics_path, "a") as f:
            f.write(json.dumps(record) + "\n")
        if verbose:
            log.info("epoch %d  loss %.4f  train %.4f  test %.4f  (%.0fs)", epoch, record["train_loss"],
                     record["train_accuracy"], record["test_accuracy"], record["seconds"])
        if ev["accuracy"] > best:
            best = ev["accuracy"]
            best_path = _save(out / "best", net, opt, _checkpoint_meta(config, epoch, history, best, mean, std))
        last_path = _save(out / "last", net, opt, _checkpoint_meta(config, epoch, history, best, mean, std))
    return TrainResult(history, best_path, last_path, net)


def train_two_phase(config: TrainConfig, out_dir, phase1_epochs: int, phase2_epochs: int,
                    datasets=None) -> tuple[TrainResult, TrainResult]:
    """Train with one time step, then continue at ``config.T`` steps from the
    phase-1 best weights."""
    out = Path(out_dir)
    datasets = datasets or load_datasets(config)
    p1 = replace(config.with_time_steps(1), epochs=phase1_epochs,
                 warmup_epochs=min(config.warmup_epochs, max(phase1_epochs - 1, 0)))
    r1 = train(p1, out / "phase1", datasets=datasets)
    p2 = replace(config, epochs=phase2_epochs, init_checkpoint=str(r1.best_checkpoint),
                 warmup_epochs=min(config.warmup_epochs, max(phase2_epochs - 1, 0)))
    r2 = train(p2, out / "phase2", datasets=datasets)
    return r1, r2
