"""End-to-end stages behind the command line: data, surrogate, attack, evaluation.

Every stage draws from a fixed stream of the root seed, so any stage can be
re-run on its own and reproduce the same bytes:

=================  =======================
stream             use
=================  =======================
``derive(0)``      synthetic dataset
``derive(1)``      surrogate initial weights
``derive(2)``      surrogate pre-training order
``derive(3)``      downstream model training
``derive(4)``      reference subset choice
``derive(5)``      attack (image ``i`` uses ``derive(5).derive(100, i)``)
``derive(6)``      evaluation sampling (decline rate)
=================  =======================
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .config import RunConfig
from .data import Dataset, load_dataset, save_dataset, synth_dataset
from .encoder import MODES, Encoder, init_params, make_downstream, mean_reference_embedding
from .harness import ABLATION_ROWS, SCHEMA_VERSION, evaluate_rows, reports_to_csv, reports_to_json
from .numerics import RngState
from .pipeline import ImageResult, attack_many, check_results

log = logging.getLogger(__name__)

STREAMS = {"dataset": 0, "surrogate_init": 1, "surrogate_training": 2, "downstream": 3,
           "reference": 4, "attack": 5, "evaluation": 6}
SURROGATE_FILE = "surrogate.vckpt"
REFERENCE_FILE = "reference_mean.vten"
MANIFEST_FILE = "attack_manifest.json"
TRACE_FILE = "trace.jsonl"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"


class MissingArtifactsError(FileNotFoundError):
    """Evaluation was asked for before the attack artifacts exist."""

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("missing attack artifacts:\n  " + "\n  ".join(self.paths))


class _Timer:
    def __init__(self, label):
        self.label = label

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        log.info("%s took %.2f s", self.label, time.perf_counter() - self.t0)


def seeds_record(cfg: RunConfig) -> dict:
    return {"root": cfg.seed, "streams": dict(STREAMS)}


def get_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset is not None:
        return load_dataset(cfg.dataset)
    return synth_dataset(cfg.synth, RngState(cfg.seed).derive(STREAMS["dataset"]))


def write_dataset(cfg: RunConfig, out_dir) -> list:
    with _Timer("dataset synthesis"):
        ds = synth_dataset(cfg.synth, RngState(cfg.seed).derive(STREAMS["dataset"]))
    return save_dataset(ds, out_dir)


def pretrain_surrogate(cfg: RunConfig, ds: Dataset) -> Encoder:
    """Train every weight of a fresh encoder on the source-domain segmentation task."""
    root = RngState(cfg.seed)
    enc = Encoder(cfg.encoder, init_params(cfg.encoder, root.derive(STREAMS["surrogate_init"])))
    model = make_downstream(enc, "full", ds.source, ds.source_labels, cfg.pretrain_epochs,
                            root.derive(STREAMS["surrogate_training"]), lr=cfg.pretrain_lr,
                            batch_size=cfg.batch_size)
    return model.encoder


def get_surrogate(cfg: RunConfig, ds: Dataset) -> Encoder:
    if cfg.encoder_checkpoint is not None:
        enc, _ = formats.load_checkpoint(cfg.encoder_checkpoint)
        if enc.spec != cfg.encoder:
            raise ValueError("checkpoint architecture differs from the configured encoder")
        return enc
    with _Timer("surrogate pre-training"):
        return pretrain_surrogate(cfg, ds)


def reference_indices(cfg: RunConfig, ds: Dataset) -> np.ndarray:
    order = RngState(cfg.seed).derive(STREAMS["reference"]).permutation(len(ds.source))
    return np.sort(order[:cfg.reference_size])


def downstream_models(cfg: RunConfig, surrogate: Encoder, ds: Dataset) -> dict:
    rng = RngState(cfg.seed).derive(STREAMS["downstream"])
    models = {}
    for mode in MODES:
        with _Timer(f"downstream training ({mode})"):
            models[mode] = make_downstream(surrogate, mode, ds.target_train,
                                           ds.target_train_labels, cfg.downstream_epochs, rng,
                                           lr=cfg.downstream_lr, batch_size=cfg.batch_size)
    return models


@dataclass
class AttackArtifacts:
    surrogate: Encoder
    reference_mean: np.ndarray
    reference_indices: np.ndarray
    results: list


def _image_name(i: int) -> str:
    return f"img_{i:04d}"


def artifact_paths(cfg: RunConfig, out_dir) -> list:
    out = Path(out_dir)
    paths = [out / MANIFEST_FILE, out / SURROGATE_FILE, out / REFERENCE_FILE]
    for i in range(cfg.num_images):
        paths.append(out / "complexes" / f"{_image_name(i)}.vsc")
        for s in range(cfg.samples):
            paths.append(out / "adversarial" / f"{_image_name(i)}_{s:02d}.vten")
    return paths


def run_attack(cfg: RunConfig, out_dir, jobs: int | None = None,
               trace_level: str = "vertex") -> AttackArtifacts:
    """Attack the first ``num_images`` target test images and write every artifact."""
    out = Path(out_dir)
    ds = get_dataset(cfg)
    surrogate = get_surrogate(cfg, ds)
    ref_idx = reference_indices(cfg, ds)
    ref_mean = mean_reference_embedding(surrogate, ds.source[ref_idx])
    images = ds.target_test[:cfg.num_images]
    rng = RngState(cfg.seed).derive(STREAMS["attack"])
    with _Timer(f"attack on {len(images)} images"):
        results = attack_many(surrogate, images, ref_mean, cfg.attack, rng, ("vesca",),
                              samples=cfg.samples, jobs=jobs or cfg.jobs,
                              trace_level=trace_level)
    if not check_results(results, images, cfg.attack.epsilon):
        raise RuntimeError("an attack output left the epsilon ball")

    (out / "complexes").mkdir(parents=True, exist_ok=True)
    (out / "adversarial").mkdir(parents=True, exist_ok=True)
    formats.save_checkpoint(out / SURROGATE_FILE, surrogate)
    formats.save_tensor(out / REFERENCE_FILE, ref_mean, np.float64)
    for r in results:
        formats.save_complex(out / "complexes" / f"{_image_name(r.index)}.vsc",
                             r.complexes["vesca"])
        for s, adv in enumerate(r.adversarial["vesca"]):
            formats.save_tensor(out / "adversarial" / f"{_image_name(r.index)}_{s:02d}.vten",
                                adv, np.float64)
    trace_path = out / TRACE_FILE
    if trace_level == "off":
        trace_path.unlink(missing_ok=True)
    else:
        with trace_path.open("w") as fh:
            for r in results:
                for rec in r.trace:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "seeds": seeds_record(cfg),
        "reference_indices": [int(i) for i in ref_idx],
        "images": [_image_name(i) for i in range(cfg.num_images)],
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return AttackArtifacts(surrogate, ref_mean, ref_idx, results)


def load_attack(cfg: RunConfig, out_dir) -> AttackArtifacts:
    out = Path(out_dir)
    missing = [p for p in artifact_paths(cfg, out) if not p.is_file()]
    if missing:
        raise MissingArtifactsError(missing)
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    surrogate, _ = formats.load_checkpoint(out / SURROGATE_FILE)
    results = []
    for i in range(cfg.num_images):
        name = _image_name(i)
        k = formats.load_complex(out / "complexes" / f"{name}.vsc")
        advs = [formats.load_tensor(out / "adversarial" / f"{name}_{s:02d}.vten")
                for s in range(cfg.samples)]
        results.append(ImageResult(i, {"vesca": k}, {"vesca": advs}))
    return AttackArtifacts(surrogate, formats.load_tensor(out / REFERENCE_FILE),
                           np.asarray(manifest["reference_indices"]), results)


def run_evaluate(cfg: RunConfig, out_dir, ablation: bool = False, jobs: int | None = None,
                 models: dict | None = None) -> list:
    """Evaluate the stored attack, optionally adding every ablation row; writes reports."""
    out = Path(out_dir)
    art = load_attack(cfg, out)
    ds = get_dataset(cfg)
    clean = ds.target_test[:cfg.num_images]
    labels = ds.target_test_labels[:cfg.num_images]
    results = art.results
    if ablation:
        extra_rows = tuple(r for r in ABLATION_ROWS if r != "vesca")
        rng = RngState(cfg.seed).derive(STREAMS["attack"])
        with _Timer("ablation attacks"):
            extra = attack_many(art.surrogate, clean, art.reference_mean, cfg.attack, rng,
                                extra_rows, samples=cfg.samples, jobs=jobs or cfg.jobs,
                                trace_level="off")
        for r, e in zip(results, extra):
            r.complexes.update(e.complexes)
            r.adversarial.update(e.adversarial)
    if models is None:
        models = downstream_models(cfg, art.surrogate, ds)
    references = ds.source[art.reference_indices]
    with _Timer("evaluation"):
        reports = evaluate_rows(results, clean, labels, models, art.surrogate, references,
                                cfg.attack.epsilon, RngState(cfg.seed).derive(STREAMS["evaluation"]),
                                cfg.decline_samples, cfg.to_dict(), seeds_record(cfg))
    extra = {
        "reference_size": int(len(references)),
        "reference_mean": [float(v) for v in art.reference_mean],
        "mmd_bandwidth": "median",
        "num_images": cfg.num_images,
        "samples_per_image": cfg.samples,
    }
    (out / REPORT_JSON).write_text(reports_to_json(reports, extra))
    (out / REPORT_CSV).write_text(reports_to_csv(reports))
    return reports
