"""Deterministic numerical kernels shared across the package.

All seeded randomness goes through :class:`RngStream`, a thin wrapper
around numpy's counter-based Philox generator keyed by ``(seed, stream)``.
Identical keys reproduce the same sequence on every platform; distinct
keys give statistically independent streams.  Stream ids in use:

====== ====================================================
 id     purpose
====== ====================================================
 1      train/test splitting
 2      feature permutation sampling
 3      training-set contamination
 4      synthetic data generation
 5      balanced subsampling in the variance diagnostic
 16+k   training of ensemble member ``k`` (init, shuffling,
        dropout draws, all from one sequential stream)
====== ====================================================
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ConvergenceError",
    "DomainError",
    "InsufficientDataError",
    "RngStream",
    "finite_diff_check",
    "leading_eigenvector",
    "sample_covariance",
    "softmax",
    "stable_sigmoid",
    "stable_softplus",
]

_U64_MASK = 2**64 - 1


class DomainError(ValueError):
    """Input lies outside an operation's domain."""


class InsufficientDataError(ValueError):
    """Too few samples for the requested statistic."""


class ConvergenceError(RuntimeError):
    """An iterative routine did not converge."""

    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream)``.

    Backed by Philox 4x64, a counter-based generator: the key fully
    determines the sequence, so results are stable across runs and
    platforms.  Instances are not thread-safe; derive one stream per
    worker instead of sharing.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _U64_MASK
        self.stream = int(stream) & _U64_MASK
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def _sigmoid(t: np.ndarray) -> np.ndarray:
    """Unchecked sigmoid kernel, overflow-safe for any finite input."""
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def stable_sigmoid(t):
    """Logistic function 1 / (1 + exp(-t)) without overflow.

    Accepts scalars or arrays; saturates to 0.0 / 1.0 in float64 for
    |t| beyond ~37 instead of overflowing.
    """
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("stable_sigmoid requires finite input")
    out = _sigmoid(arr)
    return float(out) if np.isscalar(t) or arr.ndim == 0 else out


def stable_softplus(t):
    """log(1 + exp(t)) computed without overflow, floored at the
    smallest positive normal so the result is never exactly zero."""
    arr = np.asarray(t, dtype=float)
    out = np.maximum(np.logaddexp(0.0, arr), np.finfo(float).tiny)
    return float(out) if np.isscalar(t) or arr.ndim == 0 else out


def softmax(v) -> np.ndarray:
    """Probability vector exp(v_i) / sum_j exp(v_j), max-subtracted for
    stability.  For multi-dimensional input the last axis is normalized."""
    arr = np.asarray(v, dtype=float)
    if arr.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(arr)):
        raise DomainError("softmax requires finite input")
    z = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_covariance(scores) -> np.ndarray:
    """Unbiased sample covariance of the columns of an N x K matrix.

    Sums are exactly rounded (math.fsum), which makes the result
    independent of row order bit for bit.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim != 2:
        raise DomainError("expected an N x K matrix")
    n, k = s.shape
    if n < 2:
        raise InsufficientDataError(f"covariance needs at least 2 rows, got {n}")
    mu = np.array([math.fsum(s[:, j]) for j in range(k)]) / n
    dev = s - mu
    cov = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            cij = math.fsum(dev[:, i] * dev[:, j]) / (n - 1)
            cov[i, j] = cov[j, i] = cij
    return cov


def leading_eigenvector(matrix, tol: float = 1e-10, max_iter: int = 10000) -> np.ndarray:
    """Unit eigenvector of the largest-magnitude eigenvalue of a
    symmetric matrix, by power iteration.

    The start vector is the normalized all-ones vector, so the result is
    deterministic; the sign is whatever the iteration lands on.
    Convergence is measured on the sign-aligned iterate change.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError("expected a square matrix")
    if m.shape[0] < 1:
        raise DomainError("expected K >= 1")
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-9:
        raise DomainError("matrix is not symmetric within 1e-9")

    k = m.shape[0]
    v = np.ones(k) / math.sqrt(k)
    if not m.any():
        return v  # zero matrix: every unit vector is an eigenvector
    for it in range(1, max_iter + 1):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise ConvergenceError(
                "power iteration start lies in the kernel of a nonzero matrix", it
            )
        w /= norm
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) <= tol:
            return w
        v = w
    raise ConvergenceError("power iteration did not converge", max_iter)


def finite_diff_check(f, theta, grad, step: float = 1e-5) -> float:
    """Max relative disagreement between a claimed gradient and central
    finite differences of ``f`` at ``theta``.

    Relative error per coordinate is |g_i - fd_i| / (|g_i| + 1e-8).
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape:
        raise DomainError("theta and gradient shapes differ")
    worst = 0.0
    for i in range(theta.size):
        up = theta.copy()
        up.flat[i] += step
        down = theta.copy()
        down.flat[i] -= step
        f_up = float(f(up))
        f_down = float(f(down))
        if not (math.isfinite(f_up) and math.isfinite(f_down)):
            raise FloatingPointError(
                f"objective returned a non-finite value while probing coordinate {i}"
            )
        fd = (f_up - f_down) / (2.0 * step)
        err = abs(grad.flat[i] - fd) / (abs(grad.flat[i]) + 1e-8)
        worst = max(worst, err)
    return worst
