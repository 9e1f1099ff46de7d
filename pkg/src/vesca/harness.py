"""Transfer evaluation and ablation measurements.

Downstream quality is patch accuracy (fraction of correctly labelled patches,
higher is better); degradation is the clean-minus-adversarial accuracy drop.
Accuracies are accumulated as integer patch counts so that equal prediction
sets give bit-equal metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import AttackConfig
from .encoder import MODES, DownstreamModel, Encoder
from .geometry import SimplicialComplex, centroid, feasible, sample_point
from .numerics import ParameterError, RngState, ShapeError, rbf_mmd2
from .pipeline import attack_many, complexes_of, stack_row

SCHEMA_VERSION = "1.0"
DECLINE_PROTOCOL = "fig4-protocol-reconstructed"
ABLATION_ROWS = ("vesca", "no_dra", "no_augmentation", "mim", "random_noise")


class UndefinedRateError(ArithmeticError):
    """Decline rate requested when the centre samples cause no degradation."""


class FeasibilityError(ValueError):
    """An adversarial image left the epsilon ball or the pixel range."""


def _correct(model: DownstreamModel, images, labels) -> tuple:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} label grids")
    pred = model.predict(images)
    if pred.shape != labels.reshape(pred.shape[0], -1).shape:
        raise ShapeError("label grid does not match the model's patch grid")
    return int((pred == labels.reshape(pred.shape)).sum()), int(pred.size)


def accuracy(model: DownstreamModel, images, labels) -> float:
    c, n = _correct(model, images, labels)
    return c / n


def evaluate_transfer(adv_images, clean_images, labels, model: DownstreamModel) -> tuple:
    """``(clean, adversarial)`` mean patch accuracy of ``model``."""
    adv_images = np.asarray(adv_images)
    clean_images = np.asarray(clean_images)
    if adv_images.shape != clean_images.shape:
        raise ShapeError(f"adversarial {adv_images.shape} vs clean {clean_images.shape}")
    return accuracy(model, clean_images, labels), accuracy(model, adv_images, labels)


def verify_feasible(adv_images, clean_images, epsilon) -> None:
    for i, (a, x) in enumerate(zip(adv_images, clean_images)):
        if not feasible(a, x, epsilon):
            raise FeasibilityError(f"adversarial image {i} violates the epsilon-ball/pixel range")


def feature_shift(adv_images, clean_images, encoder: Encoder) -> float:
    """Mean l2 distance between adversarial and clean embeddings."""
    a = encoder.embed(np.asarray(adv_images))
    c = encoder.embed(np.asarray(clean_images))
    if a.shape != c.shape:
        raise ShapeError("adversarial and clean image lists are not aligned")
    return float(np.mean(np.sqrt(((a - c) ** 2).sum(axis=1))))


def domain_gap(adv_images, reference_images, encoder: Encoder) -> float:
    """Unbiased MMD^2 (median-bandwidth RBF) between adversarial and reference embeddings."""
    return rbf_mmd2(encoder.embed(np.asarray(adv_images)),
                    encoder.embed(np.asarray(reference_images)), "median")


def decline_rate(complexes, clean_images, labels, model: DownstreamModel, rng: RngState,
                 num_samples: int = 5) -> float:
    """Flatness of the learned subspace, in percent.

    For every simplex the centroid and ``num_samples`` random interior points
    are fed to ``model``. With ``center`` and ``random`` the accuracy drops
    relative to the clean images, the rate is
    ``(center - random) / center * 100``.
    """
    if isinstance(complexes, SimplicialComplex):
        complexes = [complexes]
    clean_images = np.asarray(clean_images)
    labels = np.asarray(labels)
    if not (len(complexes) == len(clean_images) == len(labels)):
        raise ShapeError("complexes, clean images and labels must be aligned")
    if num_samples < 1:
        raise ParameterError("num_samples must be >= 1")
    c_images, c_labels, r_images, r_labels = [], [], [], []
    for i, k in enumerate(complexes):
        r = rng.derive(i)
        for s in k.simplices:
            c_images.append(centroid(s.vertices))
            c_labels.append(labels[i])
            for _ in range(num_samples):
                r_images.append(sample_point(s, r))
                r_labels.append(labels[i])
    clean = accuracy(model, clean_images, labels)
    center = clean - accuracy(model, np.stack(c_images), np.stack(c_labels))
    random = clean - accuracy(model, np.stack(r_images), np.stack(r_labels))
    if center == 0:
        raise UndefinedRateError("centre samples cause no degradation; decline rate undefined")
    return (center - random) / center * 100.0


@dataclass
class ModelResult:
    clean: float
    adversarial: float
    degradation: float
    decline_rate: float | None = None


@dataclass
class TransferReport:
    row: str
    models: dict
    feature_shift: float
    domain_gap: float
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["models"] = {k: asdict(v) for k, v in self.models.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransferReport":
        d = dict(d)
        d["models"] = {k: ModelResult(**v) for k, v in d["models"].items()}
        return cls(**d)


def transfer_report(row: str, adv_images, clean_images, labels, models: dict,
                    encoder: Encoder, reference_images, epsilon: float,
                    complexes: list | None = None, rng: RngState | None = None,
                    decline_samples: int = 5, config: dict | None = None,
                    seeds: dict | None = None) -> TransferReport:
    """Evaluate one set of adversarial images against every downstream model.

    ``adv_images`` may hold several samples per clean image (image-major);
    clean images and labels are repeated to match. Feasibility is re-checked
    here rather than trusted from the attack stage. When ``complexes`` are
    given the decline rate is computed per model; it is left as None where
    the centre samples cause no degradation.
    """
    adv_images = np.asarray(adv_images)
    clean_images = np.asarray(clean_images)
    labels = np.asarray(labels)
    if len(adv_images) % len(clean_images):
        raise ShapeError("adversarial images are not a whole multiple of the clean set")
    reps = len(adv_images) // len(clean_images)
    clean_rep = np.repeat(clean_images, reps, axis=0)
    labels_rep = np.repeat(labels, reps, axis=0)
    verify_feasible(adv_images, clean_rep, epsilon)
    results = {}
    for name in MODES:
        if name not in models:
            continue
        clean, adv = evaluate_transfer(adv_images, clean_rep, labels_rep, models[name])
        rate = None
        if complexes is not None:
            try:
                rate = decline_rate(complexes, clean_images, labels, models[name],
                                    (rng or RngState(0)).derive(7), decline_samples)
            except UndefinedRateError:
                rate = None
        results[name] = ModelResult(clean, adv, clean - adv, rate)
    return TransferReport(
        row=row,
        models=results,
        feature_shift=feature_shift(adv_images, clean_rep, encoder),
        domain_gap=domain_gap(adv_images, reference_images, encoder),
        config=dict(config or {}),
        seeds=dict(seeds or {}),
    )


def evaluate_rows(results: list, clean_images, labels, models: dict, encoder: Encoder,
                  reference_images, epsilon: float, rng: RngState | None = None,
                  decline_samples: int = 5, config: dict | None = None,
                  seeds: dict | None = None) -> list:
    """Reports for every row present in per-image attack ``results``."""
    present = [r for r in ABLATION_ROWS if r in results[0].adversarial]
    reports = []
    for row in present:
        advs = stack_row(results, row)
        cx = complexes_of(results, row) if row in results[0].complexes else None
        reports.append(transfer_report(row, advs, clean_images, labels, models, encoder,
                                       reference_images, epsilon, cx, rng, decline_samples,
                                       config, seeds))
    return reports


def run_ablation(encoder: Encoder, models: dict, clean_images, labels, reference_images,
                 reference_mean, cfg: AttackConfig, rng: RngState, jobs: int = 1,
                 decline_samples: int = 5, seeds: dict | None = None) -> list:
    """Attack ``clean_images`` with every ablation row and evaluate each row.

    Rows: full attack, no domain re-adaptation, jittered copies instead of
    patch augmentation, plain single-point momentum attack, random sign noise.
    """
    results = attack_many(encoder, clean_images, reference_mean, cfg, rng, ABLATION_ROWS,
                          jobs=jobs, trace_level="off")
    return evaluate_rows(results, clean_images, labels, models, encoder, reference_images,
                         cfg.epsilon, rng, decline_samples, cfg.to_dict(), seeds)


# --- serialisation ---------------------------------------------------------

CSV_COLUMNS = ("schema_version", "row", "model", "clean", "adversarial", "degradation",
               "feature_shift", "domain_gap", "decline_rate")


def _finite_or_none(v):
    if v is None:
        return None
    if not math.isfinite(v):
        raise ValueError("report values must be finite")
    return v


def reports_to_json(reports: list, extra: dict | None = None) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "decline_rate_protocol": DECLINE_PROTOCOL,
        "metric": "patch_accuracy",
        "rows": [r.to_dict() for r in reports],
    }
    for r in doc["rows"]:
        for k in ("feature_shift", "domain_gap"):
            _finite_or_none(r[k])
        for m in r["models"].values():
            for v in m.values():
                _finite_or_none(v)
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def reports_from_json(text: str) -> list:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')!r}")
    return [TransferReport.from_dict(r) for r in doc["rows"]]


def reports_to_csv(reports: list) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in reports:
        for model, m in r.models.items():
            vals = (SCHEMA_VERSION, r.row, model, m.clean, m.adversarial, m.degradation,
                    r.feature_shift, r.domain_gap, "" if m.decline_rate is None else m.decline_rate)
            lines.append(",".join(v if isinstance(v, str) else repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"
