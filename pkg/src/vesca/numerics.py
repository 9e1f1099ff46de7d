"""Shared numerical utilities: seeded sampling, determinants and kernel MMD."""

from __future__ import annotations

import numpy as np


class ParameterError(ValueError):
    """Raised when an argument lies outside an operation's domain."""


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


class RngState:
    """Seeded random stream.

    Wraps a PCG64 generator so that an identical seed and call sequence yield
    bit-identical draws. Child streams are derived from ``(seed, *keys)`` and
    never depend on how far the parent stream has advanced, which lets
    independent work items (images, simplices) run in any order.
    """

    def __init__(self, seed: int = 0, keys: tuple = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed, spawn_key=self.keys))
        )
        self.draws = 0

    def derive(self, *keys: int) -> "RngState":
        return RngState(self.seed, self.keys + tuple(keys))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        self.draws += 1
        return self._gen.uniform(low, high, size)

    def integers(self, high: int, size=None):
        self.draws += 1
        return self._gen.integers(0, high, size)

    def normal(self, size=None, scale: float = 1.0):
        self.draws += 1
        return self._gen.normal(0.0, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)

    def standard_gamma(self, shape):
        self.draws += 1
        return self._gen.standard_gamma(shape)

    def __repr__(self):
        return f"RngState(seed={self.seed}, keys={self.keys}, draws={self.draws})"


def dirichlet_sample(alpha, rng: RngState) -> np.ndarray:
    """Draw barycentric weights from Dir(alpha).

    The uniform case alpha = 1 uses normalized unit-rate exponentials
    ``-log(U)``; other concentrations go through gamma variates.

    Args:
        alpha: positive concentration vector of length M >= 1.
        rng: random stream.

    Returns:
        float64 weights of length M, nonnegative and summing to one.
    """
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.size < 1:
        raise ParameterError("alpha must have at least one entry")
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise ParameterError("alpha entries must be positive and finite")
    if alpha.size == 1:
        return np.ones(1)
    if np.all(alpha == 1.0):
        # 1 - U lies in (0, 1], so the exponential draw is finite
        draws = -np.log1p(-rng.uniform(size=alpha.size))
    else:
        draws = rng.standard_gamma(alpha)
    total = draws.sum()
    if total <= 0.0:
        return np.full(alpha.size, 1.0 / alpha.size)
    return draws / total


def determinant(m) -> float:
    """Determinant by LU decomposition with partial pivoting."""
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"determinant needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    det = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if a[p, k] == 0.0:
            return 0.0
        if p != k:
            a[[k, p]] = a[[p, k]]
            det = -det
        det *= a[k, k]
        a[k + 1:, k:] -= np.outer(a[k + 1:, k] / a[k, k], a[k, k:])
    return float(det)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth2(x, y) -> float:
    """Median of the pairwise squared distances over the pooled sample."""
    z = np.concatenate([np.asarray(x, np.float64), np.asarray(y, np.float64)])
    d = _sq_dists(z, z)
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu]))
    return med if med > 0.0 else 1.0


def rbf_mmd2(x, y, bandwidth="median") -> float:
    """Unbiased squared MMD with a Gaussian kernel.

    ``k(a, b) = exp(-|a - b|^2 / (2 sigma^2))``. With ``bandwidth="median"``
    sigma^2 is the median pairwise squared distance over ``x`` and ``y``
    pooled; a number is taken as sigma itself.

    For sets of different sizes the cross term averages over all pairs. For
    equal sizes the paired U-statistic is used, which also drops the
    ``k(x_i, y_i)`` terms; both forms are unbiased.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("rbf_mmd2 expects two 2-d arrays of embeddings")
    if len(x) < 2 or len(y) < 2:
        raise ParameterError("rbf_mmd2 needs at least two samples per set")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"embedding dims differ: {x.shape[1]} vs {y.shape[1]}")
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise ParameterError(f"unknown bandwidth rule {bandwidth!r}")
        sigma2 = median_bandwidth2(x, y)
    else:
        if not bandwidth > 0:
            raise ParameterError("bandwidth must be positive")
        sigma2 = float(bandwidth) ** 2
    m, n = len(x), len(y)
    kxx = np.exp(-_sq_dists(x, x) / (2.0 * sigma2))
    kyy = np.exp(-_sq_dists(y, y) / (2.0 * sigma2))
    kxy = np.exp(-_sq_dists(x, y) / (2.0 * sigma2))
    a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        # paired U-statistic: the i == j cross terms are left out as well, so
        # identical sets give exactly zero
        c = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        c = kxy.mean()
    return float(a + b - 2.0 * c)
