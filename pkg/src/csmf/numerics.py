"""Dense linear algebra helpers, a replayable random stream and a
finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, NumericError, ShapeError

_INV_2_53 = 1.0 / (1 << 53)


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ShapeError(f"{m.size} values cannot fill a {rows}x{cols} matrix")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed summation order.

    Every output cell is accumulated left to right over the inner index,
    so the result is bit-identical to a naive triple loop.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


class RngStream:
    """Counter-addressed pseudo-random stream.

    Each draw consumes exactly one 64-bit output of a PCG64 generator, so
    the state is fully described by ``(seed, position)`` and any prefix of
    draws can be replayed with :meth:`at`.
    """

    def __init__(self, seed: int, position: int = 0):
        if seed < 0 or seed >= 1 << 64:
            raise ConfigError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.position = 0
        self._bits = np.random.PCG64(self.seed)
        if position:
            self._bits.advance(position)
            self.position = int(position)

    @classmethod
    def at(cls, seed: int, position: int) -> "RngStream":
        return cls(seed, position)

    def state(self) -> tuple[int, int]:
        return self.seed, self.position

    def _raw(self, n: int) -> np.ndarray:
        if n < 0:
            raise ConfigError("draw count must be nonnegative")
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        out = self._bits.random_raw(n)
        self.position += n
        return np.asarray(out, dtype=np.uint64).reshape(n)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` draws strictly inside (0, 1)."""
        raw = self._raw(n)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        return ndtri(self.uniform(n))

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in ``[0, high)``."""
        if high < 1:
            raise ConfigError("high must be >= 1")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def sample(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in random order."""
        if k > n:
            raise ConfigError(f"cannot sample {k} of {n} without replacement")
        return self.permutation(n)[:k]


def derive_seed(seed: int, label: str) -> int:
    """Deterministic child seed for an independent named stream."""
    h = np.random.SeedSequence([int(seed)] + [ord(c) for c in label])
    return int(h.generate_state(1, dtype=np.uint64)[0])


def gaussian_init(rng: RngStream, rows: int, cols: int, scale: float) -> np.ndarray:
    if not scale > 0:
        raise ConfigError(f"init scale must be positive, got {scale}")
    if rows < 0 or cols < 0:
        raise ShapeError("negative matrix dimension")
    return (rng.normal(rows * cols) * scale).reshape(rows, cols)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not eps > 0:
        raise ConfigError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"function is not finite near coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)
