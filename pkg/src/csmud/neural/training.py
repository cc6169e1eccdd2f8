"""Mini-batch SGD with classical momentum and checkpointed metrics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import featurize
from .network import Network, top_n_sets

TRACE_COLUMNS = ("batch", "loss", "user_hit_ratio", "exact_set_rate")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 250
    epochs: int = 1
    eval_every: int = 100
    val_subset: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.eval_every < 1 or self.epochs < 0:
            raise ValueError("batch_size, eval_every must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    batch: int
    loss: float
    user_hit_ratio: float
    exact_set_rate: float


@dataclass
class TrainingTrace:
    checkpoints: list = field(default_factory=list)

    def append(self, cp: Checkpoint) -> None:
        if self.checkpoints and cp.batch <= self.checkpoints[-1].batch:
            raise ValueError("checkpoint batch indices must increase")
        self.checkpoints.append(cp)

    def __len__(self):
        return len(self.checkpoints)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.checkpoints])

    def smoothed_final_loss(self, window: int = 5) -> float:
        return float(np.mean(self.column("loss")[-window:]))

    def write_csv(self, path, append=False) -> None:
        mode = "a" if append else "w"
        with open(path, mode, newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if not append:
                w.writerow(TRACE_COLUMNS)
            for c in self.checkpoints:
                w.writerow([c.batch, repr(c.loss), repr(c.user_hit_ratio), repr(c.exact_set_rate)])

    @classmethod
    def read_csv(cls, path) -> "TrainingTrace":
        t = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                t.append(Checkpoint(int(row["batch"]), float(row["loss"]),
                                    float(row["user_hit_ratio"]), float(row["exact_set_rate"])))
        return t


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def detection_metrics(network: Network, dataset, batch=4096):
    """(user_hit_ratio, exact_set_rate, mean loss) with the true n per sample."""
    hits = exact = 0.0
    loss_sum = 0.0
    N = len(dataset)
    for s in range(0, N, batch):
        Y = dataset.y[s:s + batch]
        act = dataset.active[s:s + batch]
        scores = network.scores(Y)
        loss, _ = network.loss(scores, network.targets(act))
        loss_sum += loss * len(act)
        pred = top_n_sets(scores, [len(a) for a in act])
        for p, a in zip(pred, act):
            hits += len(set(p) & set(a)) / len(a) if a else 1.0
            exact += p == tuple(a)
    return hits / N, exact / N, loss_sum / N


def sgd_step(network: Network, lr, momentum):
    for p, g, v in zip(network.params(), network.grads(), network.velocity):
        v *= momentum
        v -= (lr * g).astype(v.dtype, copy=False)
        p += v


def train(network: Network, train_set, val_set, config: TrainConfig,
          trace: TrainingTrace | None = None, on_checkpoint=None):
    """Train in place; afterwards the network holds the best-validation weights.

    Returns ``(state, trace)`` where ``state`` is the best parameter set.
    ``trace`` may be passed in to continue an earlier run; batch indices
    continue from ``network.batches_seen``. Batches of a single sample are
    skipped (batch norm needs two).
    """
    trace = TrainingTrace() if trace is None else trace
    if config.epochs == 0 or len(train_set) == 0:
        return network.get_state(), trace
    if train_set.config.K != network.K or train_set.config.M != network.M:
        raise ValueError("training data dimensions do not match the network")

    X = featurize(train_set.y).astype(network.dtype)
    T = network.targets(train_set.active)
    val = val_set.subset(np.arange(min(config.val_subset, len(val_set)))) if val_set else None
    rng = np.random.default_rng(np.random.SeedSequence(config.seed,
                                                       spawn_key=(network.batches_seen,)))
    best_state, best_key = None, None
    window = []
    N = len(train_set)
    for _ in range(config.epochs):
        perm = rng.permutation(N)
        for s in range(0, N, config.batch_size):
            idx = perm[s:s + config.batch_size]
            if idx.size < 2:
                continue
            scores = network.forward(X[idx], training=True)
            loss, g = network.loss(scores, T[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at batch {network.batches_seen + 1}", trace)
            network.backward(g.astype(network.dtype))
            sgd_step(network, config.learning_rate, config.momentum)
            network.batches_seen += 1
            window.append(loss)
            if network.batches_seen % config.eval_every == 0:
                hit, ex = (detection_metrics(network, val)[:2] if val is not None
                           else (np.nan, np.nan))
                cp = Checkpoint(network.batches_seen, float(np.mean(window)), hit, ex)
                trace.append(cp)
                window = []
                key = ex if val is not None else -cp.loss
                if best_key is None or key > best_key:
                    best_key, best_state = key, network.get_state()
                if on_checkpoint is not None:
                    on_checkpoint(network, trace)
    if best_state is not None:
        network.set_state(best_state)
    return network.get_state(), trace
