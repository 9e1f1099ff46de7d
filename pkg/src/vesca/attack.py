"""Vertex-refining simplicial complex attack.

Pipeline for one clean image ``x``:

1. ``init_vertex``: momentum sign-gradient ascent on the l1 feature distance
   to ``f(x)``, minus the distance to the mean embedding of a small
   source-domain reference set (domain re-adaptation).
2. The other N-1 simplices are seeded with patch-rotate (PAR) augmentations
   of that first vertex.
3. Each simplex grows to M vertices. A new vertex starts at the centroid and
   is refined for T iterations on a Monte-Carlo estimate of the expected loss
   over the provisional simplex plus an adaptive log-volume bonus.
4. Adversarial examples are random points of the resulting complex.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .encoder import LOSS_KINDS, Encoder, NumericError
from .geometry import (
    VOLUME_FLOOR,
    DegenerateSimplexError,
    Simplex,
    SimplicialComplex,
    centroid,
    cm_volume,
    log_volume_grad,
    sample_complex,
)
from .numerics import ParameterError, RngState, dirichlet_sample

log = logging.getLogger(__name__)

LAMBDA_CAP = 1e6
AUGMENTATIONS = ("par", "jitter")


@dataclass
class AttackConfig:
    """Attack hyperparameters. ``None`` step size / grid resolve at run time."""

    epsilon: float = 10 / 255
    step_size: float | None = None
    momentum: float = 1.0
    T: int = 10
    t_init: int = 10
    N: int = 4
    M: int = 4
    H: int = 4
    lambda_star: float = 0.1
    ns: int | None = None
    loss: str = "l1"
    use_dra: bool = True
    augment: str = "par"
    random_start: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ParameterError("epsilon must be a finite nonnegative number")
        for name in ("T", "t_init"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        for name in ("N", "M", "H"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.lambda_star < 0:
            raise ParameterError("lambda_star must be >= 0")
        if self.lambda_star > 0 and self.M < 3:
            raise ParameterError("the volume term needs M >= 3; set lambda_star = 0 for M < 3")
        if self.loss not in LOSS_KINDS:
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.augment not in AUGMENTATIONS:
            raise ParameterError(f"unknown augmentation {self.augment!r}")
        if self.ns is not None and self.ns < 1:
            raise ParameterError("ns must be >= 1")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / max(self.T, 1)

    @property
    def start_radius(self) -> float:
        return self.alpha if self.random_start is None else self.random_start

    def grid(self, encoder: Encoder) -> int:
        return self.ns if self.ns is not None else encoder.spec.grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def project(image, original, epsilon) -> np.ndarray:
    """Clamp to the l-inf ball of radius ``epsilon`` around ``original`` and to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    lo = np.maximum(original - epsilon, 0.0)
    hi = np.minimum(original + epsilon, 1.0)
    return np.clip(image, lo, hi)


def _normalized(grad):
    scale = np.abs(grad).mean()
    return grad / scale if scale > 0 else grad


def init_vertex(encoder: Encoder, x, reference_mean, cfg: AttackConfig, rng: RngState,
                use_dra: bool = True, trace: list | None = None) -> np.ndarray:
    """First adversarial vertex by momentum sign-gradient ascent.

    Maximises ``L(f(x'), f(x)) - L(f(x'), reference_mean)``; the second term
    is dropped when ``use_dra`` is false. The iterate starts from a uniform
    random point within one step of ``x`` because the l1 subgradient at
    ``x' = x`` is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if use_dra and reference_mean is None:
        raise ParameterError("domain re-adaptation needs a reference mean embedding")
    if cfg.epsilon == 0 or cfg.t_init == 0:
        return x.copy()
    clean = encoder.forward(x)
    r = min(cfg.start_radius, cfg.epsilon)
    adv = project(x + rng.uniform(x.shape, -r, r), x, cfg.epsilon)
    g = np.zeros_like(x)
    for it in range(cfg.t_init):
        loss, grad = encoder.loss_and_input_grad(adv, clean, cfg.loss)
        objective = loss
        if use_dra:
            ref_loss, ref_grad = encoder.loss_and_input_grad(adv, reference_mean, cfg.loss)
            objective -= ref_loss
            grad = grad - ref_grad
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient during vertex initialisation")
        g = cfg.momentum * g + _normalized(grad)
        adv = project(adv + cfg.alpha * np.sign(g), x, cfg.epsilon)
        if trace is not None:
            trace.append({"stage": "init", "iteration": it, "simplex": 0, "vertex": 0,
                          "loss": float(loss), "objective": float(objective),
                          "volume": None, "lambda": None})
    return adv


def par_augment(image, ns: int, rng: RngState, quarter_turns=(0, 1, 2, 3)) -> np.ndarray:
    """Patch rotate-and-rearrange augmentation.

    Splits the image into an ``ns x ns`` grid of square patches, rotates each
    by a random multiple of 90 degrees and places the patches on the grid in
    random order.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if ns < 1 or h % ns or w % ns:
        raise ParameterError(f"ns={ns} must divide the image sides {h}x{w}")
    ph, pw = h // ns, w // ns
    if ph != pw and any(k % 2 for k in quarter_turns):
        raise ParameterError("odd quarter turns need square patches")
    patches = image.reshape(ns, ph, ns, pw, *image.shape[2:]).swapaxes(1, 2)
    patches = patches.reshape(ns * ns, ph, pw, *image.shape[2:])
    turns = np.asarray(quarter_turns)[rng.integers(len(quarter_turns), ns * ns)]
    order = rng.permutation(ns * ns)
    rotated = np.stack([np.rot90(patches[i], int(turns[i])) for i in order])
    out = rotated.reshape(ns, ns, ph, pw, *image.shape[2:]).swapaxes(1, 2)
    return out.reshape(image.shape).copy()


def adaptive_lambda(lambda_star: float, volume: float) -> float:
    """Regularisation weight that shrinks as the simplex volume grows."""
    if volume < 0:
        raise ParameterError("volume must be nonnegative")
    lam = lambda_star / max(volume, math.sqrt(VOLUME_FLOOR))
    return min(lam, lambda_star * LAMBDA_CAP)


def refine_vertex(encoder: Encoder, vertices, x, anchor, cfg: AttackConfig, rng: RngState,
                  trace: list | None = None, simplex_index: int = 0) -> np.ndarray:
    """Add one vertex to a simplex whose first ``k >= 1`` vertices are fixed.

    The candidate starts at the centroid of the fixed vertices. Each of the T
    iterations draws H Dirichlet(1) points of the provisional simplex, and the
    loss gradient at each point reaches the candidate scaled by that point's
    barycentric weight on it. With three or more provisional vertices the
    adaptive ``lambda * log V`` gradient is added.
    """
    if len(vertices) < 1:
        raise ParameterError("refine_vertex needs at least one fixed vertex")
    x = np.asarray(x, dtype=np.float64)
    fixed = np.stack([np.asarray(v, dtype=np.float64) for v in vertices])
    cand = centroid(list(fixed))
    k1 = len(fixed) + 1
    use_volume = k1 >= 3 and cfg.lambda_star > 0
    g = np.zeros_like(x)
    degenerate = 0
    for it in range(cfg.T):
        verts = np.concatenate([fixed, cand[None]])
        w = np.stack([dirichlet_sample(np.ones(k1), rng) for _ in range(cfg.H)])
        samples = np.tensordot(w, verts, axes=1)
        losses, grads = encoder.loss_and_input_grad(samples, anchor, cfg.loss)
        grad = np.tensordot(w[:, -1], grads.astype(np.float64), axes=1) / cfg.H
        volume = lam = None
        if use_volume:
            volume = cm_volume(verts).volume
            lam = adaptive_lambda(cfg.lambda_star, volume)
            try:
                grad = grad + lam * log_volume_grad(verts, k1 - 1)
            except DegenerateSimplexError:
                degenerate += 1
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient during vertex refinement")
        g = cfg.momentum * g + _normalized(grad)
        cand = project(cand + cfg.alpha * np.sign(g), x, cfg.epsilon)
        if trace is not None:
            trace.append({"stage": "refine", "iteration": it, "simplex": simplex_index,
                          "vertex": k1 - 1, "loss": float(np.mean(losses)),
                          "volume": volume, "lambda": lam})
    if use_volume and cfg.T > 0 and degenerate == cfg.T:
        log.warning("simplex %d vertex %d: volume clamp active for every iteration",
                    simplex_index, k1 - 1)
        if trace is not None:
            trace.append({"stage": "warning", "simplex": simplex_index, "vertex": k1 - 1,
                          "message": "degenerate simplex, loss term only"})
    return cand


def seed_vertices(encoder: Encoder, x, first, cfg: AttackConfig, rng: RngState) -> list:
    """Initial vertex of every simplex: ``first`` and N-1 augmented copies."""
    seeds = [first]
    for n in range(1, cfg.N):
        r = rng.derive(1, n)
        if cfg.augment == "par":
            aug = par_augment(first, cfg.grid(encoder), r)
        else:
            jitter = cfg.epsilon / 100
            aug = first + r.uniform(np.shape(first), -jitter, jitter)
        seeds.append(project(aug, x, cfg.epsilon))
    return seeds


def grow_simplex(encoder: Encoder, seed, x, anchor, cfg: AttackConfig, rng: RngState,
                 trace: list | None = None, simplex_index: int = 0) -> Simplex:
    vertices = [np.asarray(seed, dtype=np.float64)]
    while len(vertices) < cfg.M:
        r = rng.derive(len(vertices))
        vertices.append(refine_vertex(encoder, vertices, x, anchor, cfg, r, trace, simplex_index))
    return Simplex(x, vertices, cfg.epsilon)


def build_complex(encoder: Encoder, x, reference_mean, cfg: AttackConfig, rng: RngState,
                  trace: list | None = None, simplex_indices=None) -> SimplicialComplex:
    """Learn the adversarial simplicial complex around clean image ``x``.

    Simplex ``n`` only depends on ``rng.derive(2, n)`` (and the shared first
    vertex), so simplices may be built in any order or separately.
    """
    x = np.asarray(x, dtype=np.float64)
    cfg.validate()
    first = init_vertex(encoder, x, reference_mean, cfg, rng.derive(0), cfg.use_dra, trace)
    seeds = seed_vertices(encoder, x, first, cfg, rng)
    anchor = encoder.forward(x)
    indices = range(cfg.N) if simplex_indices is None else simplex_indices
    simplices = [grow_simplex(encoder, seeds[n], x, anchor, cfg, rng.derive(2, n), trace, n)
                 for n in indices]
    return SimplicialComplex(simplices)


def generate_adversarial(k: SimplicialComplex, rng: RngState, count: int = 1) -> list:
    """Adversarial examples drawn uniformly from the complex."""
    return sample_complex(k, rng, count)
