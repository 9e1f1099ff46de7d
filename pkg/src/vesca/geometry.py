"""Adversarial simplices and simplicial complexes in image space.

A simplex is the convex hull of M perturbed copies of one clean image. Points
inside it are barycentric combinations of the vertices, and its volume is
obtained from the Cayley-Menger determinant of the pairwise squared distances
between the flattened vertex images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ParameterError, RngState, ShapeError, determinant, dirichlet_sample

# V^2 below this is treated as a degenerate simplex
VOLUME_FLOOR = 1e-30
# ...as is V^2 below this fraction of (mean squared edge)^(M-1), i.e. roundoff
RELATIVE_FLOOR = 1e-12
FEASIBILITY_SLACK = 1e-9


class DimensionError(ValueError):
    """Raised when a simplex has too few vertices for the requested quantity."""


class DegenerateSimplexError(ArithmeticError):
    """Raised when log-volume is requested for a (near) zero-volume simplex."""


def feasible(image, base, epsilon, slack=FEASIBILITY_SLACK) -> bool:
    """True if ``image`` is inside the l-inf ball around ``base`` and in [0, 1]."""
    image = np.asarray(image)
    return bool(
        np.max(np.abs(image - base), initial=0.0) <= epsilon + slack
        and image.min(initial=0.0) >= 0.0
        and image.max(initial=1.0) <= 1.0
    )


@dataclass
class Simplex:
    base_image: np.ndarray
    vertices: list
    epsilon: float

    def __post_init__(self):
        self.base_image = np.asarray(self.base_image, dtype=np.float64)
        self.vertices = [np.asarray(v, dtype=np.float64) for v in self.vertices]
        if not self.vertices:
            raise ParameterError("a simplex needs at least one vertex")
        for v in self.vertices:
            if v.shape != self.base_image.shape:
                raise ShapeError(f"vertex shape {v.shape} != base shape {self.base_image.shape}")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def check(self) -> bool:
        return all(feasible(v, self.base_image, self.epsilon) for v in self.vertices)

    def flat(self) -> np.ndarray:
        return np.stack([v.reshape(-1) for v in self.vertices])


@dataclass
class SimplicialComplex:
    simplices: list = field(default_factory=list)

    def __post_init__(self):
        if not self.simplices:
            raise ParameterError("a simplicial complex needs at least one simplex")
        s0 = self.simplices[0]
        for s in self.simplices[1:]:
            if s.base_image.shape != s0.base_image.shape or s.epsilon != s0.epsilon:
                raise ShapeError("all simplices must share base image shape and epsilon")

    @property
    def base_image(self) -> np.ndarray:
        return self.simplices[0].base_image

    @property
    def epsilon(self) -> float:
        return self.simplices[0].epsilon

    def vertices(self):
        for s in self.simplices:
            yield from s.vertices

    def check(self) -> bool:
        return all(s.check() for s in self.simplices)


@dataclass
class CmReport:
    volume: float
    cm_determinant: float
    dimension: int


def _as_points(s) -> np.ndarray:
    if isinstance(s, Simplex):
        return s.flat()
    pts = np.asarray(s, dtype=np.float64)
    return pts.reshape(pts.shape[0], -1)


def cayley_menger_matrix(points) -> np.ndarray:
    """Bordered matrix of pairwise squared distances (M+1 square)."""
    p = _as_points(points)
    m = len(p)
    diff = p[:, None, :] - p[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    cm = np.ones((m + 1, m + 1))
    cm[0, 0] = 0.0
    cm[1:, 1:] = d2
    return cm


def _cm_scale(m: int) -> float:
    # V^2 = (-1)^M / (((M-1)!)^2 2^(M-1)) * CM
    return (-1.0) ** m / (math.factorial(m - 1) ** 2 * 2.0 ** (m - 1))


def cm_volume(s) -> CmReport:
    """Volume of the (M-1)-simplex spanned by M >= 3 vertices.

    Accepts a :class:`Simplex` or an ``(M, ...)`` array of vertex points.
    Negative V^2 from roundoff is clamped to zero.
    """
    p = _as_points(s)
    m = len(p)
    if m < 3:
        raise DimensionError(f"volume needs at least 3 vertices, got {m}")
    cm_det = determinant(cayley_menger_matrix(p))
    v2 = _cm_scale(m) * cm_det
    return CmReport(volume=math.sqrt(v2) if v2 > 0 else 0.0, cm_determinant=cm_det,
                    dimension=m - 1)


def log_volume_grad(s, free_index: int) -> np.ndarray:
    """Gradient of log V with respect to one vertex.

    Uses d log|det CM| / d CM = CM^{-T}; each squared distance d2[f, j]
    appears twice in the symmetric matrix, so
    ``dlogV/dd2[f, j] = inv(CM)[f+1, j+1]`` and
    ``dd2[f, j]/dx_f = 2 (x_f - x_j)``.

    Raises:
        DegenerateSimplexError: if V^2 is at or below VOLUME_FLOOR, or below
            RELATIVE_FLOOR times the (M-1)-th power of the mean squared edge.
    """
    shape = s.vertices[0].shape if isinstance(s, Simplex) else np.shape(s)[1:]
    p = _as_points(s)
    m = len(p)
    if m < 3:
        raise DimensionError(f"volume needs at least 3 vertices, got {m}")
    if not 0 <= free_index < m:
        raise ParameterError(f"free_index {free_index} out of range for {m} vertices")
    cm = cayley_menger_matrix(p)
    v2 = _cm_scale(m) * determinant(cm)
    edge2 = cm[1:, 1:].sum() / (m * (m - 1))
    if not v2 > max(VOLUME_FLOOR, RELATIVE_FLOOR * edge2 ** (m - 1)):
        raise DegenerateSimplexError(f"simplex volume^2 {v2:.3e} below floor")
    try:
        inv = np.linalg.inv(cm)
    except np.linalg.LinAlgError as exc:
        raise DegenerateSimplexError("singular Cayley-Menger matrix") from exc
    w = inv[free_index + 1, 1:]
    grad = 2.0 * (w.sum() * p[free_index] - w @ p)
    return grad.reshape(shape)


def centroid(vertices) -> np.ndarray:
    if len(vertices) == 0:
        raise ParameterError("centroid of an empty vertex list")
    stack = np.stack([np.asarray(v, dtype=np.float64) for v in vertices])
    if len(stack) == 1:
        return stack[0].copy()
    return stack.mean(axis=0)


def combine(vertices, weights) -> np.ndarray:
    """Barycentric combination, accumulated in vertex order."""
    out = np.zeros_like(np.asarray(vertices[0], dtype=np.float64))
    for w, v in zip(weights, vertices):
        out += w * v
    return out


def sample_point(s: Simplex, rng: RngState) -> np.ndarray:
    """Uniform (Dir(1)) random point of the simplex."""
    if s.num_vertices == 1:
        return s.vertices[0].copy()
    w = dirichlet_sample(np.ones(s.num_vertices), rng)
    # convexity keeps the point feasible up to roundoff; clip removes that
    lo = np.maximum(s.base_image - s.epsilon, 0.0)
    hi = np.minimum(s.base_image + s.epsilon, 1.0)
    return np.clip(combine(s.vertices, w), lo, hi)


def sample_complex(k: SimplicialComplex, rng: RngState, count: int) -> list:
    """Draw ``count`` points: a uniformly chosen simplex, then a point inside it."""
    if count < 1:
        raise ParameterError("count must be >= 1")
    out = []
    for _ in range(count):
        n = int(rng.integers(len(k.simplices)))
        out.append(sample_point(k.simplices[n], rng))
    return out
