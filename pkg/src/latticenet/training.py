"""Mini-batch SGD training, evaluation, and metrics logging.

Single-threaded training is a pure function of (seed, config, data): the
shuffle permutation, dropout masks, and update order are all derived from
the config seed, so two identical runs produce identical checkpoints and
metrics files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .arch import Network
from .data import StreamPairSet
from .layers import softmax_xent


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")


@dataclass
class MetricsRecord:
    epoch: int
    split: str  # "train" | "test"
    loss: float
    accuracy: float


def select_streams(pairs: StreamPairSet, stream: str):
    """Pick the per-stream input stack: 'both', 'gray', or 'edge'."""
    gray = pairs.gray[:, None, :, :]
    edge = pairs.edge[:, None, :, :]
    if stream == "both":
        return [gray, edge]
    if stream == "gray":
        return [gray]
    if stream == "edge":
        return [edge]
    raise ValueError(f"unknown stream selection {stream!r}")


def sgd_step(params, grads, velocity, lr: float, momentum: float) -> None:
    """Classical momentum: v <- momentum*v - lr*g; w <- w + v. In place."""
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
        v = velocity[name]
        v *= momentum
        v -= lr * g
        # geometric momentum decay can drive velocities into subnormal range,
        # where x86 arithmetic slows down by orders of magnitude; flush to 0
        tiny = np.finfo(v.dtype).tiny if v.dtype.kind == "f" else 0.0
        v[np.abs(v) < tiny] = 0.0
        w += v


def _batches(n, batch_size, perm=None):
    order = np.arange(n) if perm is None else perm
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(net: Network, pairs: StreamPairSet, stream: str = "both",
             batch_size: int = 256) -> tuple:
    """(mean loss, accuracy) with dropout disabled; never mutates the net.
    Argmax ties break toward the lowest class index."""
    streams = select_streams(pairs, stream)
    total_loss = 0.0
    correct = 0
    n = len(pairs)
    for idx in _batches(n, batch_size):
        xs = [s[idx] for s in streams]
        logits, _ = net.forward(xs, training=False)
        loss, _ = softmax_xent(logits.astype(np.float64), pairs.labels[idx])
        total_loss += loss * len(idx)
        correct += int((logits.argmax(axis=1) == pairs.labels[idx]).sum())
    return total_loss / n, correct / n


def train(
    net: Network,
    train_pairs: StreamPairSet,
    test_pairs: StreamPairSet,
    config: TrainConfig,
    stream: str = "both",
    progress=None,
):
    """Train in place; returns the list of MetricsRecords."""
    if len(train_pairs) == 0:
        raise ValueError("training data is empty")
    streams = select_streams(train_pairs, stream)
    labels = train_pairs.labels
    params = net.params()
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD5]))
    records = []
    step = 0
    n = len(train_pairs)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for bi, idx in enumerate(_batches(n, config.batch_size, perm)):
            xs = [s[idx] for s in streams]
            logits, cache = net.forward(xs, training=True, step=step)
            loss, grad_logits = softmax_xent(logits, labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = net.backward(cache, grad_logits)
            sgd_step(params, grads, velocity, config.learning_rate, config.momentum)
            epoch_loss += loss * len(idx)
            epoch_correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            step += 1
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            records.append(
                MetricsRecord(epoch, "train", epoch_loss / n, epoch_correct / n)
            )
            test_loss, test_acc = evaluate(net, test_pairs, stream)
            records.append(MetricsRecord(epoch, "test", test_loss, test_acc))
            if progress is not None:
                progress(records[-2], records[-1])
    return records


def write_metrics_csv(path, records, *, arch: str, mode: str, config: TrainConfig):
    with open(path, "w", newline="") as fh:
        fh.write(
            f"# arch={arch} mode={mode} seed={config.seed} "
            f"lr={config.learning_rate:g} batch={config.batch_size} "
            f"momentum={config.momentum:g}\n"
        )
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy"])
        for r in records:
            writer.writerow([r.epoch, r.split, f"{r.loss:.6f}", f"{r.accuracy:.6f}"])


def read_metrics_csv(path):
    records = []
    with open(path) as fh:
        header = fh.readline()
        reader = csv.reader(fh)
        next(reader)  # column header
        for row in reader:
            records.append(MetricsRecord(int(row[0]), row[1], float(row[2]), float(row[3])))
    return header.strip(), records
