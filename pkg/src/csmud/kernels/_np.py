"""Pure-numpy reference kernels.

Every function here has a twin of the same name and signature in ``_nb``.
Both must agree to round-off; the test suite checks the pair directly.
"""

import numpy as np


def block_energies(x, L):
    """Squared l2 norm of each length-``L`` block of a 1-D vector."""
    a = np.abs(x.reshape(-1, L))
    return (a * a).sum(axis=1)


def top_blocks(energies, keep):
    """Indices of the ``keep`` largest energies, ties to the smaller index."""
    order = np.argsort(-energies, kind="mergesort")
    return order[:keep]


def block_threshold(g, L, keep):
    """Keep the ``keep`` most energetic blocks of ``g`` intact, zero the rest."""
    out = np.zeros_like(g)
    if keep <= 0:
        return out
    kept = top_blocks(block_energies(g, L), keep)
    gb = g.reshape(-1, L)
    out.reshape(-1, L)[kept] = gb[kept]
    return out


def iht_loop(S, SH, y, mu, L, keep, max_iter, tol):
    """Projected-gradient iterations x <- H(x + mu * S^H (y - S x)).

    ``H`` keeps ``keep`` blocks of size ``L``; ``L == 1`` is plain
    element-wise hard thresholding. Returns ``(x, iterations, diverged)``.
    On divergence (residual up for 10 consecutive steps) the iterate with
    the smallest residual seen so far is returned.
    """
    x = np.zeros(S.shape[1], dtype=np.complex128)
    best = x
    best_res = np.inf
    prev_res = np.inf
    rising = 0
    it = 0
    while it < max_iter:
        it += 1
        g = x + mu * (SH @ (y - S @ x))
        x_new = block_threshold(g, L, keep)
        r = y - S @ x_new
        res = np.sqrt(np.sum(r.real * r.real + r.imag * r.imag))
        d = x_new - x
        dn = np.sqrt(np.sum(d.real * d.real + d.imag * d.imag))
        xn = np.sqrt(np.sum(x_new.real * x_new.real + x_new.imag * x_new.imag))
        x = x_new
        if res < best_res:
            best_res = res
            best = x
        rising = rising + 1 if res > prev_res else 0
        prev_res = res
        if rising >= 10:
            return best, it, True
        if dn <= tol * xn:
            break
    return x, it, False


def block_activation_forward(z, L):
    B, W = z.shape
    zb = z.reshape(B, W // L, L)
    mask = zb.max(axis=2) > 0
    out = np.where(mask[:, :, None], zb, 0).astype(z.dtype, copy=False)
    return out.reshape(B, W), mask


def block_activation_backward(g, mask, L):
    B, W = g.shape
    gb = g.reshape(B, W // L, L)
    return np.where(mask[:, :, None], gb, 0).astype(g.dtype, copy=False).reshape(B, W)


def block_max_pool_forward(z, L):
    B, W = z.shape
    zb = z.reshape(B, W // L, L)
    arg = zb.argmax(axis=2)
    out = np.take_along_axis(zb, arg[:, :, None], axis=2)[:, :, 0]
    idx = arg + (np.arange(W // L) * L)[None, :]
    return out, idx


def block_max_pool_backward(g, idx, W):
    B = g.shape[0]
    out = np.zeros((B, W), dtype=g.dtype)
    np.put_along_axis(out, idx, g, axis=1)
    return out
