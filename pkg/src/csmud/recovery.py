"""Classical sparse and block-sparse recovery for y = S x + noise.

All solvers take a :class:`~csmud.sysmodel.Dictionary` and return a
:class:`RecoveryResult` whose residual is recomputed from ``x_hat``.
Ties are always broken toward the smaller index.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np

from . import kernels
from .sysmodel import Dictionary, block_columns


class RankDeficiencyWarning(RuntimeWarning):
    """A least-squares system was rank deficient; a pseudo-inverse was used."""


@dataclass
class SolverParams:
    max_iterations: int = 100
    step_size: float | None = None  # None: 1 / sigma_max(S)^2
    residual_tol: float | None = None  # None: solver default

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.residual_tol is not None and self.residual_tol < 0:
            raise ValueError("residual_tol must be >= 0")


# Greedy solvers stop on residual norm, iterative ones on relative change.
GREEDY_TOL = 1e-8
ITERATIVE_TOL = 1e-6


@dataclass
class RecoveryResult:
    support_users: tuple
    x_hat: np.ndarray
    residual_norm: float
    iterations: int
    elapsed: float
    rank_deficient: bool = False
    diverged: bool = False
    support_elements: tuple = field(default=())


def _result(D, y, x_hat, iterations, t0, **flags) -> RecoveryResult:
    L = D.block_size
    users = tuple(int(k) for k in np.flatnonzero(kernels.block_energies(x_hat, L) > 0))
    residual = float(np.linalg.norm(y - D.matrix @ x_hat))
    elems = tuple(int(i) for i in np.flatnonzero(x_hat))
    return RecoveryResult(users, x_hat, residual, iterations, time.perf_counter() - t0,
                          support_elements=elems, **flags)


def _lstsq(A, y):
    """Least squares with a rank flag."""
    sol, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    return sol, rank < A.shape[1]


def _check_budget(budget, upper, what):
    if not 1 <= budget <= upper:
        raise ValueError(f"{what} must be in [1, {upper}], got {budget}")


def omp(dictionary: Dictionary, y, element_budget: int,
        params: SolverParams | None = None) -> RecoveryResult:
    """Orthogonal matching pursuit over unit-normalised columns."""
    t0 = time.perf_counter()
    params = params or SolverParams()
    D = dictionary
    A = D.matrix
    _check_budget(element_budget, A.shape[1], "element_budget")
    tol = GREEDY_TOL if params.residual_tol is None else params.residual_tol
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    An_H = (A / norms).conj().T

    x_hat = np.zeros(A.shape[1], dtype=np.complex128)
    chosen: list[int] = []
    r = np.asarray(y, dtype=np.complex128)
    deficient = False
    while len(chosen) < element_budget and np.linalg.norm(r) > tol:
        c = np.abs(An_H @ r)
        c[chosen] = -1.0
        chosen.append(int(np.argmax(c)))
        coef, deficient = _lstsq(A[:, chosen], y)
        r = y - A[:, chosen] @ coef
        x_hat[:] = 0
        x_hat[chosen] = coef
    if deficient:
        warnings.warn("OMP: selected columns are rank deficient", RankDeficiencyWarning)
    return _result(D, y, x_hat, len(chosen), t0, rank_deficient=deficient)


def bomp(dictionary: Dictionary, y, block_budget: int,
         params: SolverParams | None = None) -> RecoveryResult:
    """Block OMP: pick the block with the largest normalised correlation energy."""
    t0 = time.perf_counter()
    params = params or SolverParams()
    D = dictionary
    A, L, K = D.matrix, D.block_size, D.user_count
    _check_budget(block_budget, K, "block_budget")
    tol = GREEDY_TOL if params.residual_tol is None else params.residual_tol
    fro = np.sqrt(kernels.block_energies(np.linalg.norm(A, axis=0), L))
    fro[fro == 0] = 1.0
    AH = D.adjoint

    x_hat = np.zeros(A.shape[1], dtype=np.complex128)
    chosen: list[int] = []
    r = np.asarray(y, dtype=np.complex128)
    deficient = False
    while len(chosen) < block_budget and np.linalg.norm(r) > tol:
        score = np.sqrt(kernels.block_energies(AH @ r, L)) / fro
        score[chosen] = -1.0
        chosen.append(int(np.argmax(score)))
        cols = block_columns(sorted(chosen), L)
        coef, deficient = _lstsq(A[:, cols], y)
        r = y - A[:, cols] @ coef
        x_hat[:] = 0
        x_hat[cols] = coef
    if deficient:
        warnings.warn("BOMP: selected blocks are rank deficient", RankDeficiencyWarning)
    return _result(D, y, x_hat, len(chosen), t0, rank_deficient=deficient)


def _iterative(D, y, block, keep, params, t0):
    params = params or SolverParams()
    mu = params.step_size
    if mu is None:
        s2 = D.spectral_norm_sq
        mu = 1.0 / s2 if s2 > 0 else 1.0
    tol = ITERATIVE_TOL if params.residual_tol is None else params.residual_tol
    y = np.ascontiguousarray(y, dtype=np.complex128)
    S = np.ascontiguousarray(D.matrix, dtype=np.complex128)
    x, it, diverged = kernels.iht_loop(S, D.adjoint, y, float(mu), block, keep,
                                       params.max_iterations, float(tol))
    if diverged:
        warnings.warn("iterative hard thresholding diverged; returning best iterate",
                      RuntimeWarning)
    return _result(D, y, x, int(it), t0, diverged=bool(diverged))


def iht(dictionary: Dictionary, y, element_budget: int,
        params: SolverParams | None = None) -> RecoveryResult:
    """Iterative hard thresholding keeping ``element_budget`` entries."""
    t0 = time.perf_counter()
    _check_budget(element_budget, dictionary.matrix.shape[1], "element_budget")
    return _iterative(dictionary, y, 1, element_budget, params, t0)


def biht(dictionary: Dictionary, y, block_budget: int,
         params: SolverParams | None = None) -> RecoveryResult:
    """Block IHT: same gradient step, keeps the ``block_budget`` most energetic blocks."""
    t0 = time.perf_counter()
    _check_budget(block_budget, dictionary.user_count, "block_budget")
    return _iterative(dictionary, y, dictionary.block_size, block_budget, params, t0)


def brute_force_oracle(dictionary: Dictionary, y, block_budget: int,
                       max_candidates: int = 10**6) -> RecoveryResult:
    """Exhaustive search over all block supports of size ``block_budget``.

    Supports are visited in lexicographic order and a later one only wins
    if its residual is smaller by more than round-off, so ties go to the
    lexicographically smallest support.
    """
    t0 = time.perf_counter()
    D = dictionary
    A, L, K = D.matrix, D.block_size, D.user_count
    _check_budget(block_budget, K, "block_budget")
    if comb(K, block_budget) > max_candidates:
        raise ValueError(f"C({K}, {block_budget}) exceeds the candidate budget {max_candidates}")
    y = np.asarray(y, dtype=np.complex128)
    slack = 1e-12 * max(1.0, float(np.linalg.norm(y)))
    best = None
    best_res = np.inf
    count = 0
    for support in combinations(range(K), block_budget):
        count += 1
        cols = block_columns(support, L)
        coef, _ = _lstsq(A[:, cols], y)
        res = float(np.linalg.norm(y - A[:, cols] @ coef))
        if res < best_res - slack:
            best_res = res
            best = (cols, coef)
    x_hat = np.zeros(A.shape[1], dtype=np.complex128)
    x_hat[best[0]] = best[1]
    return _result(D, y, x_hat, count, t0)


def block_energies(x, L: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] % L:
        raise ValueError(f"length {x.shape} is not a multiple of L={L}")
    if x.dtype.kind not in "fc":
        x = x.astype(np.float64)
    return kernels.block_energies(np.ascontiguousarray(x), L)


def detect_support(x_hat, L: int, n: int) -> tuple:
    """Users owning the ``n`` largest block energies, ties to the smaller index."""
    e = block_energies(x_hat, L)
    if not 1 <= n <= e.shape[0]:
        raise ValueError(f"n must be in [1, {e.shape[0]}], got {n}")
    return tuple(sorted(int(k) for k in kernels.top_blocks(e, n)))


def mmse_estimate(dictionary: Dictionary, y, support_users, noise_var: float,
                  prior_var: float) -> np.ndarray:
    """Ridge / LMMSE estimate of ``x`` restricted to the given users' blocks.

    ``x_S = (S_S^H S_S + (noise_var/prior_var) I)^-1 S_S^H y``; zero
    elsewhere. With ``noise_var == 0`` this is least squares.
    """
    support_users = sorted(support_users)
    if not support_users:
        raise ValueError("support must be nonempty")
    if noise_var < 0 or not prior_var > 0:
        raise ValueError("need noise_var >= 0 and prior_var > 0")
    D = dictionary
    cols = block_columns(support_users, D.block_size)
    A = D.matrix[:, cols]
    G = A.conj().T @ A
    rhs = A.conj().T @ np.asarray(y)
    lam = noise_var / prior_var
    x_hat = np.zeros(D.matrix.shape[1], dtype=np.complex128)
    if lam > 0:
        x_hat[cols] = np.linalg.solve(G + lam * np.eye(len(cols)), rhs)
        return x_hat
    coef, deficient = _lstsq(A, y)
    if deficient:
        warnings.warn("MMSE: support columns are rank deficient, using pseudo-inverse",
                      RankDeficiencyWarning)
    x_hat[cols] = coef
    return x_hat
