"""Synthetic two-domain segmentation data.

The source domain (standing in for the encoder's pre-training data) holds
random coloured shapes on textured backgrounds. The target domain uses the
same shape generator, drawn from a different stream, followed by a fixed
global colour cast, contrast change and texture overlay. Every image comes
with a per-patch foreground label grid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .formats import load_tensor, save_image, save_tensor
from .numerics import ParameterError, RngState

SHAPES = ("disc", "box", "triangle", "ring")


@dataclass(frozen=True)
class SynthParams:
    image_side: int = 32
    channels: int = 3
    patch_side: int = 4
    num_source: int = 200
    num_target_train: int = 256
    num_target_test: int = 64
    label_threshold: float = 0.5

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ParameterError("patch_side must divide image_side")
        if self.channels != 3:
            raise ParameterError("the synthetic generator produces RGB images")
        if min(self.num_source, self.num_target_train, self.num_target_test) < 2:
            raise ParameterError("every split needs at least two images")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    source: np.ndarray
    source_labels: np.ndarray
    target_train: np.ndarray
    target_train_labels: np.ndarray
    target_test: np.ndarray
    target_test_labels: np.ndarray
    params: SynthParams

    def manifest(self) -> dict:
        return {
            "source": len(self.source),
            "target_train": len(self.target_train),
            "target_test": len(self.target_test),
            "label_grid": self.params.image_side // self.params.patch_side,
        }


def _shape_mask(kind, side, rng: RngState):
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    cy, cx = rng.uniform(2, low=0.25 * side, high=0.75 * side)
    r = rng.uniform(low=0.18 * side, high=0.35 * side)
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if kind == "box":
        ry, rx = rng.uniform(2, low=0.6 * r, high=1.2 * r)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    # triangle with apex up
    return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) * 0.6)


def _texture(side, rng: RngState):
    yy, xx = np.mgrid[0:side, 0:side] / side
    fy, fx = rng.uniform(2, low=1.0, high=4.0)
    phase = rng.uniform(low=0, high=2 * np.pi)
    wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return 0.5 * wave + 0.5 * rng.uniform((side, side), -1, 1)


def _render(side, rng: RngState):
    bg = rng.uniform(3, low=0.2, high=0.6)
    tex = _texture(side, rng)
    img = bg[None, None, :] + 0.12 * tex[..., None]
    kind = SHAPES[int(rng.integers(len(SHAPES)))]
    mask = _shape_mask(kind, side, rng)
    fg = rng.uniform(3, low=0.45, high=0.95)
    shade = 1.0 + 0.05 * rng.uniform((side, side), -1, 1)
    img = np.where(mask[..., None], fg[None, None, :] * shade[..., None], img)
    return np.clip(img, 0.0, 1.0), mask


# fixed colour-cast matrix, contrast and overlay for the target domain
_CAST = np.array([[0.55, 0.30, 0.15],
                  [0.10, 0.60, 0.30],
                  [0.35, 0.05, 0.60]])


def target_shift(img):
    """The fixed global colour/texture shift applied to target-domain images."""
    side = img.shape[0]
    yy, xx = np.mgrid[0:side, 0:side]
    stripes = 0.06 * ((yy + 2 * xx) % 6 < 3)
    out = img @ _CAST.T
    out = 0.35 + 0.7 * (out - 0.5) + stripes[..., None]
    out[..., 2] += 0.08
    return np.clip(out, 0.0, 1.0)


def patch_labels(mask, patch_side, threshold=0.5) -> np.ndarray:
    """Row-major per-patch foreground labels (1 if covered fraction >= threshold)."""
    g = mask.shape[0] // patch_side
    frac = mask.reshape(g, patch_side, g, patch_side).mean(axis=(1, 3))
    return (frac >= threshold).astype(np.int64).reshape(-1)


def _split(n, side, params, rng: RngState, shifted: bool):
    images, labels = [], []
    for i in range(n):
        img, mask = _render(side, rng.derive(i))
        if shifted:
            img = target_shift(img)
        images.append(img)
        labels.append(patch_labels(mask, params.patch_side, params.label_threshold))
    return np.stack(images), np.stack(labels)


def synth_dataset(params: SynthParams, rng: RngState) -> Dataset:
    """Generate the source pool and the target train/test splits."""
    side = params.image_side
    src, src_lab = _split(params.num_source, side, params, rng.derive(0), False)
    tr, tr_lab = _split(params.num_target_train, side, params, rng.derive(1), True)
    te, te_lab = _split(params.num_target_test, side, params, rng.derive(2), True)
    return Dataset(src, src_lab, tr, tr_lab, te, te_lab, params)


SPLITS = ("source", "target_train", "target_test")


def save_dataset(ds: Dataset, directory, previews: int = 4) -> list:
    """Write every split as raw tensors plus ``manifest.json``; returns written paths.

    Images are stored as float64 so a reload reproduces them exactly. The
    first ``previews`` target test images are also written as PPM files for
    viewing.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for split in SPLITS:
        for suffix, arr, dtype in (("", getattr(ds, split), np.float64),
                                   ("_labels", getattr(ds, split + "_labels"), np.float32)):
            path = directory / f"{split}{suffix}.vten"
            save_tensor(path, arr, dtype)
            written.append(path)
    for i in range(min(previews, len(ds.target_test))):
        path = directory / f"preview_{i:02d}.ppm"
        save_image(path, ds.target_test[i])
        written.append(path)
    manifest = {"params": ds.params.to_dict(), "counts": ds.manifest()}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    known = {f.name for f in fields(SynthParams)}
    params = SynthParams(**{k: v for k, v in doc["params"].items() if k in known})
    arrays = {}
    for split in SPLITS:
        arrays[split] = load_tensor(directory / f"{split}.vten")
        labels = load_tensor(directory / f"{split}_labels.vten")
        arrays[split + "_labels"] = labels.astype(np.int64)
    return Dataset(params=params, **arrays)
