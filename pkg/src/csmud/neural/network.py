"""Feed-forward detector networks (BRNN and the plain DNN baseline)."""

from __future__ import annotations

import numpy as np

from .layers import (
    BatchNorm,
    BlockActivation,
    BlockMaxPool,
    Dense,
    Layer,
    LayerSpec,
    ReLU,
    ResidualAdd,
    ResidualBegin,
    featurize,
    sigmoid_cross_entropy,
    softmax_cross_entropy,
)

ARCHS = ("BRNN", "DNN")
HEADS = ("softmax", "sigmoid")


class Network:
    """A flat chain of layers; residual sections are bracketed by
    ``residual_begin`` / ``residual_add`` markers with an identity skip."""

    def __init__(self, specs, *, arch, K, L, M, head="softmax", seed=0, dtype=np.float32):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.specs = list(specs)
        self.arch = arch
        self.K, self.L, self.M = K, L, M
        self.head = head
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.batches_seen = 0
        self.layers: list[Layer] = []
        dense_idx = 0
        depth = 0
        for s in self.specs:
            if s.kind == "dense":
                rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(dense_idx,)))
                self.layers.append(Dense(s, rng, self.dtype))
                dense_idx += 1
            elif s.kind == "batch_norm":
                self.layers.append(BatchNorm(s, self.dtype))
            elif s.kind == "relu":
                self.layers.append(ReLU(s))
            elif s.kind == "block_activation":
                self.layers.append(BlockActivation(s))
            elif s.kind == "block_max_pool":
                self.layers.append(BlockMaxPool(s))
            elif s.kind == "residual_begin":
                depth += 1
                self.layers.append(ResidualBegin(s))
            elif s.kind == "residual_add":
                depth -= 1
                if depth < 0:
                    raise ValueError("residual_add without residual_begin")
                self.layers.append(ResidualAdd(s))
        if depth:
            raise ValueError("unclosed residual section")
        self.velocity = [np.zeros_like(p) for p in self.params()]

    # -- parameters ------------------------------------------------------------

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def named_tensors(self):
        """All persistent arrays in declaration order: params, BN buffers, velocities."""
        out = []
        for i, layer in enumerate(self.layers):
            for n in layer.param_names + layer.buffer_names:
                out.append((f"{i}.{n}", getattr(layer, n)))
        for j, v in enumerate(self.velocity):
            out.append((f"velocity.{j}", v))
        return out

    def get_state(self) -> dict:
        return {name: a.copy() for name, a in self.named_tensors()}

    def set_state(self, state: dict) -> None:
        names = [n for n, _ in self.named_tensors()]
        for name, cur in self.named_tensors():
            if name not in state or state[name].shape != cur.shape:
                got = None if name not in state else state[name].shape
                raise ValueError(f"state tensor {name}: expected shape {cur.shape}, got {got}")
        extra = set(state) - set(names)
        if extra:
            raise ValueError(f"unexpected state tensors: {sorted(extra)}")
        for i, layer in enumerate(self.layers):
            for n in layer.param_names + layer.buffer_names:
                setattr(layer, n, state[f"{i}.{n}"].astype(self.dtype, copy=True))
        self.velocity = [state[f"velocity.{j}"].astype(self.dtype, copy=True)
                         for j in range(len(self.velocity))]

    # -- passes ----------------------------------------------------------------

    def forward(self, X, training=False):
        x = np.asarray(X, dtype=self.dtype)
        skips = []
        for layer in self.layers:
            if isinstance(layer, ResidualBegin):
                skips.append(x)
            elif isinstance(layer, ResidualAdd):
                x = x + skips.pop()
            else:
                x = layer.forward(x, training)
        return x

    def backward(self, g):
        skips = []
        for layer in reversed(self.layers):
            if isinstance(layer, ResidualAdd):
                skips.append(g)
            elif isinstance(layer, ResidualBegin):
                g = g + skips.pop()
            else:
                g = layer.backward(g)
        return g

    def loss(self, scores, target):
        fn = softmax_cross_entropy if self.head == "softmax" else sigmoid_cross_entropy
        return fn(scores.astype(np.float64), target)

    def targets(self, active_sets) -> np.ndarray:
        """Softmax head: mass 1/n per active user. Sigmoid head: 0/1 labels."""
        T = np.zeros((len(active_sets), self.K))
        for i, a in enumerate(active_sets):
            if len(a):
                T[i, list(a)] = 1.0 / len(a) if self.head == "softmax" else 1.0
        return T

    def scores(self, Y) -> np.ndarray:
        """Inference-mode user scores for a batch of complex measurements."""
        return self.forward(featurize(np.atleast_2d(Y)), training=False)

    def architecture(self) -> dict:
        return {
            "arch": self.arch, "K": self.K, "L": self.L, "M": self.M, "head": self.head,
            "seed": self.seed, "dtype": self.dtype.name,
            "layers": [s.to_dict() for s in self.specs],
        }


def network_specs(arch, K, L, M, relu_layers=2, relu_width=None, residual_blocks=3):
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    if relu_layers < 1 or residual_blocks < 0:
        raise ValueError("need relu_layers >= 1 and residual_blocks >= 0")
    KL = K * L
    width = 2 * KL if relu_width is None else relu_width
    if width < 1:
        raise ValueError("relu_width must be >= 1")
    specs = []
    prev = 2 * M
    for _ in range(relu_layers):
        specs += [LayerSpec("dense", width, in_width=prev), LayerSpec("batch_norm", width),
                  LayerSpec("relu", width)]
        prev = width
    specs.append(LayerSpec("dense", KL, in_width=prev))
    for _ in range(residual_blocks):
        act = (LayerSpec("block_activation", KL, block_size=L) if arch == "BRNN"
               else LayerSpec("relu", KL))
        specs += [LayerSpec("residual_begin", KL), LayerSpec("dense", KL, in_width=KL),
                  LayerSpec("batch_norm", KL), act, LayerSpec("residual_add", KL)]
    if arch == "BRNN":
        specs.append(LayerSpec("block_max_pool", K, block_size=L))
    else:
        specs.append(LayerSpec("dense", K, in_width=KL))
    return specs


def build_network(arch, K, L, M, *, relu_layers=2, relu_width=None, residual_blocks=3,
                  head="softmax", seed=0, dtype=np.float32) -> Network:
    """BRNN: ReLU front end, block-activation residual body, block max-pool head.

    The DNN baseline swaps block activation for ReLU and the pooling head
    for a dense ``K*L -> K`` layer. Dense layer ``i`` is He-initialised from
    ``SeedSequence(seed, spawn_key=(i,))``, so both architectures built with
    one seed share every dense layer they have in common.
    """
    specs = network_specs(arch, K, L, M, relu_layers, relu_width, residual_blocks)
    return Network(specs, arch=arch, K=K, L=L, M=M, head=head, seed=seed, dtype=dtype)


def expected_param_count(arch, K, L, M, relu_layers=2, relu_width=None, residual_blocks=3):
    """Closed-form trainable parameter count of :func:`build_network`."""
    KL = K * L
    w = 2 * KL if relu_width is None else relu_width
    front = (2 * M * w + w + 2 * w) + (relu_layers - 1) * (w * w + w + 2 * w)
    body = (w * KL + KL) + residual_blocks * (KL * KL + KL + 2 * KL)
    head = 0 if arch == "BRNN" else KL * K + K
    return front + body + head


def infer_active_users(network: Network, y, n: int):
    """Top-``n`` users by score (ties to the smaller index), plus raw scores."""
    if not 0 <= n <= network.K:
        raise ValueError(f"n must be in [0, {network.K}], got {n}")
    s = network.scores(y)[0]
    order = np.argsort(-s, kind="mergesort")
    return tuple(sorted(int(k) for k in order[:n])), s


def top_n_sets(scores, ns) -> list:
    """Batch version of the top-n rule with a per-row ``n``."""
    order = np.argsort(-scores, axis=1, kind="mergesort")
    return [tuple(sorted(int(k) for k in order[i, :n])) for i, n in enumerate(ns)]
