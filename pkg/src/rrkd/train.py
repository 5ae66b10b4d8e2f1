"""Optimizer, schedules, preprocessing and the teacher / distillation loops."""

from __future__ import annotations

import json
import logging
import os
import time
import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint, ops
from .data import Dataset
from .distill import LayerPairSet, LossConfig, at_loss, default_layer_pairs
from .errors import ConfigError
from .nn import ArchSpec, Network, check_pair
from .recurrence import build_student, build_teacher
from .tensor import Parameter, Tape, Tensor, backward

log = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig:
    batch_size: int = 128
    base_lr: float = 0.1
    lr_decay_iters: Tuple[int, ...] = (40_000, 60_000)
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-5
    total_iters: int = 80_000
    seed: int = 0
    augment: bool = True
    precision: str = "f32"
    lam: Optional[float] = None
    variant: int = 1
    n: int = 3
    eval_every: int = 500
    log_every: int = 10
    record_wall_time: bool = False

    def __post_init__(self):
        self.lr_decay_iters = tuple(int(i) for i in self.lr_decay_iters)
        if any(b <= a for a, b in zip(self.lr_decay_iters, self.lr_decay_iters[1:])):
            raise ConfigError(f"lr_decay_iters must be strictly increasing, got {self.lr_decay_iters}")
        for name in ("batch_size", "total_iters", "eval_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("base_lr", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}, got {self.precision!r}")

    @property
    def dtype(self):
        return DTYPES[self.precision]


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of randomness (init, shuffle, augment)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    passed = sum(1 for d in cfg.lr_decay_iters if d <= iteration)
    return cfg.base_lr / cfg.lr_decay_factor ** passed


def sgd_step(params: Sequence[Parameter], grads: Dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, velocity: Dict[str, np.ndarray]):
    """v <- momentum * v + g + weight_decay * w;  w <- w - lr * v  (in place, frozen params skipped)."""
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            raise KeyError(f"sgd_step: no gradient for trainable parameter {p.name!r}")
        dt = p.dtype.type
        step = g + dt(weight_decay) * p.data
        v = velocity.get(p.name)
        if v is None:
            v = velocity[p.name] = np.zeros_like(p.data)
        v *= dt(momentum)
        v += step
        p.data -= dt(lr) * v


class SGD:
    def __init__(self, params: Sequence[Parameter], momentum=0.9, weight_decay=1e-5):
        self.params = [p for p in params if p.trainable]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> int:
        """Apply one update; returns the number of scalars visited."""
        sgd_step(self.params, grads, lr, self.momentum, self.weight_decay, self.velocity)
        return sum(p.data.size for p in self.params)


# ------------------------------------------------------------- preprocessing


def channel_stats(dataset: Dataset, eps: float = 1e-6):
    x = dataset.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), eps)
    return mean, std


def apply_standardization(dataset: Dataset, mean, std) -> Dataset:
    x = (dataset.images.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(x.astype(np.float32), dataset.labels, dataset.split, dataset.num_classes)


def standardize(train: Dataset, test: Optional[Dataset] = None, eps: float = 1e-6):
    """Zero-mean / unit-std per channel using training statistics only.

    Returns (train, test, mean, std); ``test`` is None when not given.
    """
    mean, std = channel_stats(train, eps)
    out_test = apply_standardization(test, mean, std) if test is not None else None
    return apply_standardization(train, mean, std), out_test, mean, std


def augment(image: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Zero-pad, take a random crop of the original size, flip horizontally with p = 0.5."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, top:top + h, left:left + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Same draws, in the same order, as calling :func:`augment` per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for k in range(n):
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        crop = padded[k, :, top:top + h, left:left + w]
        out[k] = crop[:, :, ::-1] if rng.random() < 0.5 else crop
    return out


class BatchSampler:
    """Epoch-wise shuffled index stream; order depends only on the generator."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator):
        if size < 1:
            raise ValueError("cannot sample batches from an empty dataset")
        self.size, self.batch_size, self.rng = size, batch_size, rng
        self._perm = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self._pos >= len(self._perm):
                self._perm, self._pos = self.rng.permutation(self.size), 0
            take = self._perm[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)


# ------------------------------------------------------------------ metrics


METRIC_FIELDS = ("iter", "lr", "loss_cls", "loss_ts", "loss_total", "train_acc", "test_acc", "wall_ms")


class Metrics:
    """Append-only log of training events, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: Optional[str] = None):
        self.records: List[dict] = []
        self.path = path
        if path is not None:
            open(path, "w").close()

    def append(self, **values):
        rec = {k: values.get(k) for k in METRIC_FIELDS}
        if self.records and rec["iter"] <= self.records[-1]["iter"]:
            raise ValueError(f"metrics iterations must increase: {rec['iter']} after {self.records[-1]['iter']}")
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=float)

    def iters(self) -> np.ndarray:
        return np.array([r["iter"] for r in self.records])

    def last(self, key: str):
        for r in reversed(self.records):
            if r.get(key) is not None:
                return r[key]
        return None

    def moving_average(self, key: str, at_iter: int, window: int = 10) -> float:
        """Mean of ``key`` over the last ``window`` logged events up to ``at_iter``."""
        vals = [r[key] for r in self.records if r["iter"] <= at_iter and r.get(key) is not None]
        if not vals:
            raise ValueError(f"no {key} values logged up to iteration {at_iter}")
        return float(np.mean(vals[-window:]))

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------- evaluation


def evaluate(net: Network, dataset: Dataset, batch_size: int = 250) -> Dict[str, float]:
    """Eval-mode top-1 (and top-5 when there are at least 5 classes) accuracy."""
    dtype = net.parameters()[0].dtype
    top1 = top5 = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        logits, _ = net.forward(Tensor(xb, dtype=dtype), train=False)
        z = logits.data
        top1 += int(np.sum(z.argmax(axis=1) == yb))
        if z.shape[1] >= 5:
            best5 = np.argsort(-z, axis=1, kind="stable")[:, :5]
            top5 += int(np.sum(best5 == yb[:, None]))
    out = {"top1": top1 / len(dataset)}
    if net.arch.num_classes >= 5:
        out["top5"] = top5 / len(dataset)
    return out


# ------------------------------------------------------------------- loops


def fit(net: Network, train_set: Dataset, cfg: TrainConfig, teacher: Optional[Network] = None,
        pairs: Optional[LayerPairSet] = None, loss_cfg: Optional[LossConfig] = None,
        test_set: Optional[Dataset] = None, metrics: Optional[Metrics] = None) -> Metrics:
    """Minibatch SGD on classification loss, plus the attention loss when a teacher is given."""
    metrics = metrics if metrics is not None else Metrics()
    dtype = cfg.dtype
    opt = SGD(net.trainable_parameters(), cfg.momentum, cfg.weight_decay)
    sampler = BatchSampler(len(train_set), cfg.batch_size, rng_stream(cfg.seed, "shuffle"))
    aug_rng = rng_stream(cfg.seed, "augment")
    if teacher is not None:
        pairs = pairs if pairs is not None else default_layer_pairs(net, teacher)
        lam = (loss_cfg or LossConfig(cfg.lam)).weight(len(pairs))
    start = time.perf_counter()

    for it in range(cfg.total_iters):
        idx = sampler.next()
        xb = train_set.images[idx]
        if cfg.augment:
            xb = augment_batch(xb, aug_rng)
        yb = train_set.labels[idx]
        x = Tensor(xb, dtype=dtype)
        lr = lr_at(it, cfg)

        ts_value = None
        with Tape():
            logits, acts = net.forward(x, train=True)
            cls = ops.softmax_cross_entropy(logits, yb)
            loss = cls
            if teacher is not None:
                _, t_acts = teacher.forward(x, train=False)
                if lam > 0:
                    ts = at_loss(acts, t_acts, pairs)
                    loss = ops.add(cls, ops.scale(ts, lam))
                    ts_value = float(ts.data)
        if teacher is not None and ts_value is None:
            ts_value = float(at_loss(acts, t_acts, pairs).data)
        grads = backward(loss)
        visited = opt.step(grads, lr)
        if it == 0 and visited != net.num_parameters():
            raise RuntimeError(f"optimizer visited {visited} scalars, network has {net.num_parameters()}")

        last = it == cfg.total_iters - 1
        eval_now = test_set is not None and ((it + 1) % cfg.eval_every == 0 or last)
        if it % cfg.log_every == 0 or eval_now or last:
            test_acc = evaluate(net, test_set)["top1"] if eval_now else None
            metrics.append(
                iter=it, lr=lr, loss_cls=float(cls.data), loss_ts=ts_value, loss_total=float(loss.data),
                train_acc=float(np.mean(logits.data.argmax(axis=1) == yb)), test_acc=test_acc,
                wall_ms=round((time.perf_counter() - start) * 1e3, 3) if cfg.record_wall_time else None)
            if eval_now:
                log.info("iter %d lr %.4g loss %.4f test_acc %.4f", it, lr, float(loss.data), test_acc)
    return metrics


def _out_paths(out_dir: Optional[str], ckpt_name: str):
    if out_dir is None:
        return None, None
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, ckpt_name), os.path.join(out_dir, "metrics.jsonl")


def train_teacher(arch: ArchSpec, cfg: TrainConfig, train_set: Dataset, test_set: Optional[Dataset] = None,
                  out_dir: Optional[str] = None):
    """Train a teacher from scratch on classification loss alone; returns (network, metrics)."""
    ckpt_path, metrics_path = _out_paths(out_dir, "teacher.ckpt")
    net = build_teacher(arch, dtype=cfg.dtype, rng=rng_stream(cfg.seed, "init"))
    metrics = fit(net, train_set, cfg, test_set=test_set, metrics=Metrics(metrics_path))
    if ckpt_path:
        checkpoint.save(ckpt_path, net.state_dict())
    return net, metrics


def load_network(arch: ArchSpec, path_or_state, dtype=np.float32) -> Network:
    state = checkpoint.load(path_or_state) if isinstance(path_or_state, (str, os.PathLike)) else path_or_state
    build = build_teacher if arch.role == "teacher" else build_student
    net = build(arch, dtype=dtype)
    net.load_state_dict(state)
    return net


def distill_student(arch: ArchSpec, cfg: TrainConfig, teacher: Network, train_set: Dataset,
                    test_set: Optional[Dataset] = None, out_dir: Optional[str] = None,
                    pairs: Optional[LayerPairSet] = None):
    """Train a tied student against a frozen teacher; returns (network, metrics)."""
    check_pair(arch, teacher.arch)
    teacher.freeze()
    ckpt_path, metrics_path = _out_paths(out_dir, "student.ckpt")
    net = build_student(arch, dtype=cfg.dtype, rng=rng_stream(cfg.seed, "init"))
    metrics = fit(net, train_set, cfg, teacher=teacher, pairs=pairs, test_set=test_set,
                  metrics=Metrics(metrics_path))
    if ckpt_path:
        checkpoint.save(ckpt_path, net.state_dict())
    return net, metrics
