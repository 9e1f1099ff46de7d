"""Per-image attack jobs, baselines and the worker pool.

Image ``i`` always draws from ``rng.derive(100, i)``, and every ablation row
for that image starts from the same stream, so rows are paired comparisons
and results do not depend on the number of workers.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, build_complex, generate_adversarial, init_vertex, project
from .encoder import Encoder
from .geometry import feasible
from .numerics import ParameterError, RngState

log = logging.getLogger(__name__)

COMPLEX_ROWS = {
    "vesca": {},
    "no_dra": {"use_dra": False},
    "no_augmentation": {"augment": "jitter"},
}
POINT_ROWS = ("mim", "random_noise")
TRACE_LEVELS = ("off", "vertex", "iter")


def random_noise(x, epsilon, rng: RngState) -> np.ndarray:
    """Uniformly random +-epsilon sign perturbation."""
    x = np.asarray(x, dtype=np.float64)
    return project(x + epsilon * np.where(rng.uniform(x.shape) < 0.5, -1.0, 1.0), x, epsilon)


def mim_point(encoder: Encoder, x, cfg: AttackConfig, rng: RngState) -> np.ndarray:
    """Plain single-point momentum attack (no re-adaptation, no complex)."""
    return init_vertex(encoder, x, None, cfg, rng.derive(0), use_dra=False)


def _filter_trace(trace, level):
    if level == "iter":
        return trace
    last = {}
    for rec in trace:
        key = (rec.get("stage"), rec.get("simplex"), rec.get("vertex"))
        last[key] = rec
    return list(last.values())


@dataclass
class ImageResult:
    index: int
    complexes: dict = field(default_factory=dict)
    adversarial: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)


def attack_one(encoder: Encoder, x, reference_mean, cfg: AttackConfig, rng: RngState,
               index: int, rows=("vesca",), samples: int = 1,
               trace_level: str = "vertex") -> ImageResult:
    """Run every requested row for one clean image."""
    if trace_level not in TRACE_LEVELS:
        raise ParameterError(f"trace level must be one of {TRACE_LEVELS}")
    rng = rng.derive(100, index)
    out = ImageResult(index)
    for row in rows:
        trace = [] if trace_level != "off" else None
        if row in COMPLEX_ROWS:
            row_cfg = dataclasses.replace(cfg, **COMPLEX_ROWS[row])
            k = build_complex(encoder, x, reference_mean, row_cfg, rng, trace)
            out.complexes[row] = k
            out.adversarial[row] = generate_adversarial(k, rng.derive(3), samples)
        elif row == "mim":
            out.adversarial[row] = [mim_point(encoder, x, cfg, rng)] * samples
        elif row == "random_noise":
            out.adversarial[row] = [random_noise(x, cfg.epsilon, rng.derive(4, s))
                                    for s in range(samples)]
        else:
            raise ParameterError(f"unknown ablation row {row!r}")
        if trace:
            for rec in _filter_trace(trace, trace_level):
                out.trace.append({"image": index, "row": row, **rec})
    return out


_WORKER = {}


def _init_worker(encoder, reference_mean, cfg, rng, rows, samples, trace_level):
    _WORKER.update(encoder=encoder, reference_mean=reference_mean, cfg=cfg, rng=rng,
                   rows=rows, samples=samples, trace_level=trace_level)


def _work(item):
    index, x = item
    w = _WORKER
    return attack_one(w["encoder"], x, w["reference_mean"], w["cfg"], w["rng"], index,
                      w["rows"], w["samples"], w["trace_level"])


def attack_many(encoder: Encoder, images, reference_mean, cfg: AttackConfig, rng: RngState,
                rows=("vesca",), samples: int = 1, jobs: int = 1,
                trace_level: str = "vertex") -> list:
    """Attack every image; results come back in input order for any ``jobs``."""
    items = list(enumerate(np.asarray(images, dtype=np.float64)))
    args = (encoder, reference_mean, cfg, rng, tuple(rows), samples, trace_level)
    if jobs <= 1:
        _init_worker(*args)
        return [_work(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=args) as pool:
        return list(pool.map(_work, items, chunksize=max(1, len(items) // (4 * jobs))))


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))


def stack_row(results: list, row: str) -> np.ndarray:
    """All adversarial images of one row, image-major."""
    return np.stack([a for r in results for a in r.adversarial[row]])


def complexes_of(results: list, row: str) -> list:
    return [r.complexes[row] for r in results]


def check_results(results: list, images, epsilon) -> bool:
    """Every vertex and every sampled image stays feasible."""
    for r, x in zip(results, images):
        for k in r.complexes.values():
            if not k.check():
                return False
        for advs in r.adversarial.values():
            if not all(feasible(a, x, epsilon) for a in advs):
                return False
    return True

