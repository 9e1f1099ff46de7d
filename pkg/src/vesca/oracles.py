"""Independent reference computations for the self-check commands.

These deliberately avoid the code paths they validate: volumes come from the
Gram determinant of edge vectors rather than from pairwise distances,
determinants from cofactor expansion rather than LU, and gradients from
central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import LOSS_KINDS, Encoder, EncoderSpec, grad_check, init_params
from .geometry import DegenerateSimplexError, cm_volume, log_volume_grad
from .numerics import RngState


def gram_volume(points) -> float:
    """Volume of the simplex spanned by ``points`` (M x d): sqrt(det(G^T G)) / (M-1)!."""
    p = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    g = (p[1:] - p[0]).T
    det = np.linalg.det(g.T @ g)
    return math.sqrt(max(det, 0.0)) / math.factorial(len(p) - 1)


def cofactor_determinant(m) -> float:
    """Laplace expansion along the first row; exponential cost, small matrices only."""
    m = np.asarray(m, dtype=np.float64)
    n = len(m)
    if n == 1:
        return float(m[0, 0])
    total = 0.0
    for j in range(n):
        minor = np.delete(m[1:], j, axis=1)
        total += (-1) ** j * m[0, j] * cofactor_determinant(minor)
    return total


def fd_gradient(fn, x, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` at every entry of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += step
        dn[idx] -= step
        out[idx] = (fn(up) - fn(dn)) / (2 * step)
    return out


class CorruptedBackwardEncoder(Encoder):
    """Negative control: the GELU derivative is off by a constant factor."""

    def _gelu_grad(self, x, t):
        return 0.5 * super()._gelu_grad(x, t)


@dataclass
class CheckCase:
    name: str
    passed: bool
    error: float
    detail: str = ""


@dataclass
class CheckSuite:
    cases: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def lines(self) -> list:
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name} err={c.error:.3e} {c.detail}".rstrip()
                for c in self.cases]


def encoder_gradient_suite(cases: int, seed: int = 0, tolerance: float = 1e-3,
                           corrupt: bool = False, spec: EncoderSpec | None = None) -> CheckSuite:
    """Finite-difference checks of the 32-bit encoder input gradient, cycling loss kinds."""
    spec = spec or EncoderSpec()
    cls = CorruptedBackwardEncoder if corrupt else Encoder
    root = RngState(seed)
    suite = CheckSuite()
    for i in range(cases):
        r = root.derive(i)
        enc = cls(spec, init_params(spec, r.derive(0)))
        image = r.derive(1).uniform(spec.image_shape, 0.1, 0.9)
        kind = LOSS_KINDS[i % len(LOSS_KINDS)]
        rep = grad_check(enc, image, tolerance, kind=kind, rng=r.derive(2))
        suite.cases.append(CheckCase(f"encoder[{i}] {kind}", rep.passed, rep.max_rel_error))
    return suite


def volume_suite(cases: int, seed: int = 0, tolerance: float = 1e-8) -> CheckSuite:
    """Cayley-Menger volume against the Gram oracle on random simplices."""
    root = RngState(seed)
    suite = CheckSuite()
    for i in range(cases):
        r = root.derive(i)
        m = 3 + int(r.integers(3))
        d = int(r.integers(17 - m)) + m - 1  # ambient dim in [M-1, 16]
        pts = r.normal((m, d))
        got = cm_volume(pts).volume
        want = gram_volume(pts)
        err = abs(got - want) / max(want, 1e-300)
        suite.cases.append(CheckCase(f"volume[{i}] M={m} d={d}", err <= tolerance, err))
    return suite


def log_volume_grad_suite(cases: int, seed: int = 0, tolerance: float = 1e-4,
                          step: float = 1e-5) -> CheckSuite:
    """log-volume gradient against central finite differences (64-bit)."""
    root = RngState(seed)
    suite = CheckSuite()
    for i in range(cases):
        r = root.derive(i)
        m = 3 + int(r.integers(3))
        d = m + int(r.integers(4))
        pts = r.normal((m, d))
        f = int(r.integers(m))

        def logv(xf, pts=pts, f=f):
            q = pts.copy()
            q[f] = xf
            return math.log(cm_volume(q).volume)

        try:
            got = log_volume_grad(pts, f)
        except DegenerateSimplexError as exc:
            suite.cases.append(CheckCase(f"logvol[{i}]", False, math.inf, str(exc)))
            continue
        want = fd_gradient(logv, pts[f], step)
        err = float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-12))
        suite.cases.append(CheckCase(f"logvol[{i}] M={m} d={d} f={f}", err <= tolerance, err))
    return suite
