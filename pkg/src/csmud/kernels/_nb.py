"""Numba-compiled kernels, drop-in twins of ``_np``.

Loops are written out explicitly so the tie rules (first maximum wins,
smaller index wins) are visible and identical to the numpy versions.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def block_energies(x, L):
    K = x.shape[0] // L
    e = np.zeros(K)
    for k in range(K):
        acc = 0.0
        for j in range(k * L, (k + 1) * L):
            v = x[j]
            acc += v.real * v.real + v.imag * v.imag
        e[k] = acc
    return e


@njit(cache=True)
def top_blocks(energies, keep):
    order = np.argsort(-energies, kind="mergesort")
    return order[:keep]


@njit(cache=True)
def block_threshold(g, L, keep):
    out = np.zeros_like(g)
    if keep <= 0:
        return out
    kept = top_blocks(block_energies(g, L), keep)
    for k in kept:
        for j in range(k * L, (k + 1) * L):
            out[j] = g[j]
    return out


@njit(cache=True)
def _norm(v):
    acc = 0.0
    for i in range(v.shape[0]):
        acc += v[i].real * v[i].real + v[i].imag * v[i].imag
    return np.sqrt(acc)


@njit(cache=True)
def iht_loop(S, SH, y, mu, L, keep, max_iter, tol):
    x = np.zeros(S.shape[1], dtype=np.complex128)
    best = x
    best_res = np.inf
    prev_res = np.inf
    rising = 0
    it = 0
    while it < max_iter:
        it += 1
        g = x + mu * np.dot(SH, y - np.dot(S, x))
        x_new = block_threshold(g, L, keep)
        res = _norm(y - np.dot(S, x_new))
        dn = _norm(x_new - x)
        xn = _norm(x_new)
        x = x_new
        if res < best_res:
            best_res = res
            best = x
        if res > prev_res:
            rising += 1
        else:
            rising = 0
        prev_res = res
        if rising >= 10:
            return best, it, True
        if dn <= tol * xn:
            break
    return x, it, False


@njit(cache=True)
def block_activation_forward(z, L):
    B, W = z.shape
    K = W // L
    out = np.zeros_like(z)
    mask = np.zeros((B, K), dtype=np.bool_)
    for b in range(B):
        for k in range(K):
            on = False
            for j in range(k * L, (k + 1) * L):
                if z[b, j] > 0:
                    on = True
                    break
            if on:
                mask[b, k] = True
                for j in range(k * L, (k + 1) * L):
                    out[b, j] = z[b, j]
    return out, mask


@njit(cache=True)
def block_activation_backward(g, mask, L):
    B, W = g.shape
    out = np.zeros_like(g)
    for b in range(B):
        for k in range(W // L):
            if mask[b, k]:
                for j in range(k * L, (k + 1) * L):
                    out[b, j] = g[b, j]
    return out


@njit(cache=True)
def block_max_pool_forward(z, L):
    B, W = z.shape
    K = W // L
    out = np.empty((B, K), dtype=z.dtype)
    idx = np.empty((B, K), dtype=np.int64)
    for b in range(B):
        for k in range(K):
            j0 = k * L
            m = z[b, j0]
            a = j0
            for j in range(j0 + 1, j0 + L):
                if z[b, j] > m:
                    m = z[b, j]
                    a = j
            out[b, k] = m
            idx[b, k] = a
    return out, idx


@njit(cache=True)
def block_max_pool_backward(g, idx, W):
    B, K = g.shape
    out = np.zeros((B, W), dtype=g.dtype)
    for b in range(B):
        for k in range(K):
            out[b, idx[b, k]] = g[b, k]
    return out
