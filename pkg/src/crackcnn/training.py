"""Loss, Adam and the minibatch training loop, plus head-swap fine-tuning."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from crackcnn.network import CONV_PARAMS, Checkpoint, Network, read_records, swap_head, write_records
from crackcnn.tensor import make_rng

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "train_loss", "train_acc", "test_loss", "test_acc", "wall_seconds")
ADAM_MAGIC = b"CRKA"


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_interval: int = 50
    seed: int = 0
    freeze_conv: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


@dataclass
class MetricsRow:
    step: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    wall_seconds: float


def cross_entropy_loss(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class and its gradient w.r.t. the logits.

    ``dlogits[n, j] = (probs[n, j] - [j == labels[n]]) / N``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, t = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= t):
        raise ValueError(f"labels must lie in [0, {t}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(n)
    p_true = probs[rows, labels].astype(np.float64)
    loss = float(-np.log(np.maximum(p_true, np.finfo(probs.dtype).tiny)).mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, dlogits


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig) -> np.ndarray:
    """One bias-corrected Adam update, applied to ``param`` in place."""
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, m {state.m.shape}, v {state.v.shape}")
    b1, b2 = cfg.beta1, cfg.beta2
    state.t += 1
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * (grad * grad)
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    denom = np.sqrt(state.v / bc2)
    denom += cfg.eps
    param -= (cfg.learning_rate / bc1) * state.m / denom
    return param


class Adam:
    """Adam over a dict of named parameters; parameters never stepped have no state."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.states: dict[str, AdamState] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState.zeros_like(params[name])
            adam_step(params[name], g, st, self.cfg)

    def save(self, path) -> None:
        meta = {"t": {k: s.t for k, s in self.states.items()}, "tensors": []}
        tensors = {}
        for k, s in self.states.items():
            tensors[f"{k}.m"] = s.m
            tensors[f"{k}.v"] = s.v
        meta["tensors"] = list(tensors)
        write_records(path, ADAM_MAGIC, meta, tensors)

    @classmethod
    def load(cls, path, cfg: TrainConfig) -> "Adam":
        meta, tensors = read_records(path, ADAM_MAGIC)
        opt = cls(cfg)
        for k, t in meta["t"].items():
            opt.states[k] = AdamState(tensors[f"{k}.m"].copy(), tensors[f"{k}.v"].copy(), int(t))
        return opt


# --------------------------------------------------------------------------
# evaluation and training


def evaluate(net: Network, dataset, batch_size: int = 32) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy over the whole dataset."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    total_loss = 0.0
    correct = 0
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i : i + batch_size]
        y = dataset.labels[i : i + batch_size]
        _, probs = net.forward(x)
        loss, _ = cross_entropy_loss(probs, y)
        total_loss += loss * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
    return total_loss / len(dataset), correct / len(dataset)


def _index_stream(n: int, rng: np.random.Generator, shuffle: bool) -> Iterator[int]:
    while True:
        order = rng.permutation(n) if shuffle else np.arange(n)
        yield from order.tolist()


def train(
    net: Network,
    train_set,
    test_set,
    cfg: TrainConfig,
    *,
    frozen: frozenset[str] | set[str] = frozenset(),
    optimizer: Adam | None = None,
    callback: Callable[[MetricsRow], bool] | None = None,
    info: dict | None = None,
) -> tuple[Checkpoint, list[MetricsRow]]:
    """Train ``net`` in place for ``cfg.steps`` minibatch steps.

    Every ``cfg.eval_interval`` steps (and after the last step) the full train
    and test sets are evaluated into a ``MetricsRow``. ``callback`` sees each
    row and may return True to stop. Parameters named in ``frozen`` (plus the
    conv layers when ``cfg.freeze_conv``) are never updated.
    """
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("empty dataset")
    for name, ds in (("train", train_set), ("test", test_set)):
        if ds.num_classes != net.num_classes:
            raise ValueError(f"class count mismatch: network has {net.num_classes} classes, {name} set has {ds.num_classes}")
    frozen = frozenset(frozen) | (frozenset(CONV_PARAMS) if cfg.freeze_conv else frozenset())
    opt = optimizer if optimizer is not None else Adam(cfg)
    rng = make_rng(cfg.seed)
    stream = _index_stream(len(train_set), rng, cfg.shuffle)
    metrics: list[MetricsRow] = []
    start = time.perf_counter()
    step = 0
    while step < cfg.steps:
        idx = np.fromiter((next(stream) for _ in range(cfg.batch_size)), dtype=np.int64, count=cfg.batch_size)
        _, probs = net.forward(train_set.images[idx], train=True)
        loss, dlogits = cross_entropy_loss(probs, train_set.labels[idx])
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step + 1}")
        grads = net.backward(dlogits, skip=frozen)
        opt.step(net.params, grads)
        step += 1
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            tr_loss, tr_acc = evaluate(net, train_set)
            te_loss, te_acc = evaluate(net, test_set)
            row = MetricsRow(step, tr_loss, tr_acc, te_loss, te_acc, time.perf_counter() - start)
            metrics.append(row)
            log.info("step %d train_loss %.4f train_acc %.4f test_loss %.4f test_acc %.4f", *_row_values(row))
            if callback is not None and callback(row):
                break
    net._cache = None
    ckpt = Checkpoint(net, list(train_set.class_labels), step=step, seed=cfg.seed, info=dict(info or {}))
    return ckpt, metrics


def _row_values(row: MetricsRow):
    return row.step, row.train_loss, row.train_accuracy, row.test_loss, row.test_accuracy


def transfer_train(
    base: Checkpoint, new_classes: int, train_set, test_set, cfg: TrainConfig, **train_kw
) -> tuple[Checkpoint, list[MetricsRow]]:
    """Swap the classification head of ``base`` and train on the new task.

    The new head is drawn from a generator seeded with ``cfg.seed``; with
    ``cfg.freeze_conv`` the convolution tensors stay bitwise equal to the base.
    """
    swapped = swap_head(base, new_classes, make_rng(cfg.seed), class_labels=train_set.class_labels)
    info = dict(swapped.info)
    info.update(train_kw.pop("info", None) or {})
    return train(swapped.network, train_set, test_set, cfg, info=info, **train_kw)


def steps_to_accuracy(metrics: list[MetricsRow], threshold: float) -> int | None:
    """First recorded step whose full-train-set accuracy reaches ``threshold``."""
    for row in metrics:
        if row.train_accuracy >= threshold:
            return row.step
    return None


def format_metrics_csv(metrics: list[MetricsRow], record_time: bool = False) -> str:
    """CSV text; ``wall_seconds`` is written as 0 unless ``record_time``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in metrics:
        secs = r.wall_seconds if record_time else 0.0
        w.writerow(
            [r.step] + [f"{v:.6f}" for v in (r.train_loss, r.train_accuracy, r.test_loss, r.test_accuracy, secs)]
        )
    return buf.getvalue()


def write_metrics_csv(metrics: list[MetricsRow], path, record_time: bool = False) -> None:
    Path(path).write_bytes(format_metrics_csv(metrics, record_time).encode("utf-8"))
