"""Embedded self-tests run by ``csmud check``.

Each check returns a list of ``(name, passed, detail)`` tuples. Nothing here
writes outside a private temporary directory.
"""

from __future__ import annotations

import itertools
import tempfile
from pathlib import Path

import numpy as np

from .neural import layers as nl
from .neural.modelio import ModelFormatError, load_model, save_model
from .neural.network import build_network
from .recovery import bomp, brute_force_oracle
from .sysmodel import SystemConfig, make_dictionary, sample_ground_truth

FD_STEP = 1e-7
KINK = 1e-6


def numeric_grad(f, x, h=FD_STEP):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def _near_kink(kind, x, L):
    if kind == "relu":
        return np.any(np.abs(x) < KINK)
    if kind == "block_activation":
        m = x.reshape(x.shape[0], -1, L).max(axis=2)
        return np.any(np.abs(m) < KINK)
    if kind == "block_max_pool":
        s = np.sort(x.reshape(x.shape[0], -1, L), axis=2)
        return np.any(s[..., -1] - s[..., -2] < KINK)
    return False


def _layer_trial(kind, rng, B=4, K=3, L=2):
    """Worst relative error over input and parameter gradients for one draw."""
    W_in = K * L
    while True:
        x = rng.standard_normal((B, W_in))
        if not _near_kink(kind, x, L):
            break
    errs = []
    if kind == "dense":
        W = rng.standard_normal((5, W_in))
        b = rng.standard_normal(5)
        w = rng.standard_normal((B, 5))
        f = lambda: float(np.sum(w * nl.dense_forward(W, b, x)))
        dx, dW, db = nl.dense_backward(W, x, w)
        for analytic, var in ((dx, x), (dW, W), (db, b)):
            errs.append(rel_error(analytic, numeric_grad(f, var)))
    elif kind == "batch_norm":
        gamma = rng.standard_normal(W_in)
        beta = rng.standard_normal(W_in)
        w = rng.standard_normal((B, W_in))
        f = lambda: float(np.sum(w * nl.batch_norm_forward(x, gamma, beta)[0]))
        _, cache = nl.batch_norm_forward(x, gamma, beta)
        dx, dg, dbt = nl.batch_norm_backward(w, gamma, cache)
        for analytic, var in ((dx, x), (dg, gamma), (dbt, beta)):
            errs.append(rel_error(analytic, numeric_grad(f, var)))
    elif kind == "relu":
        w = rng.standard_normal((B, W_in))
        f = lambda: float(np.sum(w * nl.relu_forward(x)))
        errs.append(rel_error(nl.relu_backward(x, w), numeric_grad(f, x)))
    elif kind == "block_activation":
        w = rng.standard_normal((B, W_in))
        f = lambda: float(np.sum(w * nl.block_activation_forward(x, L)[0]))
        _, mask = nl.block_activation_forward(x, L)
        errs.append(rel_error(nl.block_activation_backward(w, mask, L), numeric_grad(f, x)))
    elif kind == "block_max_pool":
        w = rng.standard_normal((B, K))
        f = lambda: float(np.sum(w * nl.block_max_pool_forward(x, L)[0]))
        _, idx = nl.block_max_pool_forward(x, L)
        errs.append(rel_error(nl.block_max_pool_backward(w, idx, W_in), numeric_grad(f, x)))
    elif kind == "softmax_cross_entropy":
        s = rng.standard_normal((B, W_in))
        t = rng.random((B, W_in))
        t /= t.sum(axis=1, keepdims=True)
        f = lambda: nl.softmax_cross_entropy(s, t)[0]
        errs.append(rel_error(nl.softmax_cross_entropy(s, t)[1], numeric_grad(f, s)))
    else:
        raise ValueError(kind)
    return max(errs)


GRADIENT_LAYERS = ("dense", "batch_norm", "relu", "block_activation", "block_max_pool",
                   "softmax_cross_entropy")


def gradient_checks(trials=20, tol=1e-5, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for kind in GRADIENT_LAYERS:
        worst = max(_layer_trial(kind, rng) for _ in range(trials))
        out.append((f"grad:{kind}", worst < tol, f"max rel err {worst:.2e}"))
    return out


def truth_table_checks(max_L=4):
    """Every sign pattern of a block: output is the block itself iff some entry > 0."""
    out = []
    for L in range(1, max_L + 1):
        ok = True
        for signs in itertools.product((-1.0, 0.0, 1.0), repeat=L):
            z = np.array(signs)[None, :] * np.arange(1, L + 1)
            y, _ = nl.block_activation_forward(z, L)
            want = z if np.any(z > 0) else np.zeros_like(z)
            ok &= bool(np.array_equal(y, want))
        out.append((f"block-activation truth table L={L}", ok, f"{3 ** L} patterns"))
    return out


def oracle_micro_check(trials=50):
    cfg = SystemConfig(K=6, Ns=6, L=2, n=1, seed=3)
    D = make_dictionary(cfg)
    rng = np.random.default_rng(11)
    zero_res = agree = 0
    for _ in range(trials):
        gt = sample_ground_truth(cfg.K, cfg.L, 1, rng)
        y = D.matrix @ gt.x
        o = brute_force_oracle(D, y, 1)
        zero_res += o.residual_norm < 1e-9
        agree += bomp(D, y, 1).support_users == o.support_users
    return [("oracle residual zero (noiseless)", zero_res == trials, f"{zero_res}/{trials}"),
            ("BOMP agrees with oracle at n=1", agree >= 0.9 * trials, f"{agree}/{trials}")]


def model_roundtrip_check():
    net = build_network("BRNN", 4, 2, 5, relu_width=8, seed=1)
    X = np.random.default_rng(0).standard_normal((7, 10))
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "m.model"
        save_model(net, p)
        same = np.array_equal(load_model(p).forward(X), net.forward(X))
    return [("model file round trip", bool(same), "")]


def model_file_checks(paths):
    out = []
    for p in paths:
        try:
            load_model(p)
            out.append((f"model integrity {Path(p).name}", True, ""))
        except (ModelFormatError, OSError, KeyError, ValueError) as e:
            out.append((f"model integrity {Path(p).name}", False, str(e)))
    return out


def run_all(model_paths=()):
    return (truth_table_checks() + gradient_checks() + oracle_micro_check()
            + model_roundtrip_check() + model_file_checks(model_paths))
