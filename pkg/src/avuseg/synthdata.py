"""Deterministic synthetic segmentation scans.

Each scan is a short stack of 2D slices containing elliptical "organs"
(one per foreground class) plus look-alike distractor blobs in the
background. Geometry and texture come from separate random streams keyed by
(seed, scan index), so an OOD variant of a spec reuses the exact geometry of
its in-distribution twin.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .volumes import ImageVolume, LabelVolume, read_volume, write_volume

DATASET_FORMAT = "avuseg-dataset"
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


class SpecError(ValueError):
    """Invalid dataset spec; ``field`` names the offending entry."""

    def __init__(self, field: str, msg: str):
        self.field = field
        super().__init__(f"{field}: {msg}")


@dataclass(frozen=True)
class DatasetSpec:
    num_train: int = 33
    num_val: int = 5
    num_test: int = 10
    size: tuple = (64, 64)
    depth: int = 2
    num_classes: int = 2
    foreground_fraction: float = 0.05
    contrast: tuple = (0.6, 1.0)
    noise_std: float = 0.25
    distractors: int = 2
    distractor_contrast: float = 0.5
    jitter: float = 0.0
    intensity_shift: float = 0.0
    texture_noise: float = 0.0
    shape_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_train", "num_val", "num_test"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise SpecError(name, f"must be a non-negative integer, got {v!r}")
        if self.num_train + self.num_val + self.num_test < 1:
            raise SpecError("num_train", "dataset would contain no scans")
        size = tuple(self.size) if isinstance(self.size, (list, tuple)) else None
        if size is None or len(size) != 2 or any(not isinstance(s, int) or s < 8 or s % 4 for s in size):
            raise SpecError("size", f"needs two integers >= 8 divisible by 4, got {self.size!r}")
        object.__setattr__(self, "size", size)
        if not isinstance(self.depth, int) or self.depth < 1:
            raise SpecError("depth", f"must be a positive integer, got {self.depth!r}")
        if self.num_classes not in (2, 6):
            raise SpecError("num_classes", f"must be 2 or 6, got {self.num_classes!r}")
        if not 0 < self.foreground_fraction < 0.5:
            raise SpecError("foreground_fraction", "must lie in (0, 0.5)")
        c = tuple(self.contrast) if isinstance(self.contrast, (list, tuple)) else None
        if c is None or len(c) != 2 or not 0 < c[0] <= c[1]:
            raise SpecError("contrast", f"needs (low, high) with 0 < low <= high, got {self.contrast!r}")
        object.__setattr__(self, "contrast", c)
        for name in ("noise_std", "jitter", "texture_noise", "distractor_contrast"):
            if getattr(self, name) < 0:
                raise SpecError(name, "must be >= 0")
        if not isinstance(self.distractors, int) or self.distractors < 0:
            raise SpecError("distractors", "must be a non-negative integer")
        if self.shape_scale <= 0:
            raise SpecError("shape_scale", "must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError("spec", str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        d["contrast"] = list(self.contrast)
        return d

    @property
    def num_scans(self) -> int:
        return self.num_train + self.num_val + self.num_test

    def split_of(self, index: int) -> str:
        if index < self.num_train:
            return "train"
        if index < self.num_train + self.num_val:
            return "val"
        return "test"


@dataclass(frozen=True, eq=False)
class Scan:
    id: str
    split: str
    image: ImageVolume
    label: LabelVolume
    geometry: LabelVolume


@dataclass(eq=False)
class Dataset:
    spec: DatasetSpec
    scans: list

    def split(self, name: str) -> list:
        return [s for s in self.scans if s.split == name]

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


# --------------------------------------------------------------- geometry

def _ellipse_mask(yy, xx, cy, cx, a, b, theta, radial=None):
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    r = np.sqrt(u * u + v * v)
    if radial is None:
        return r <= 1.0
    ang = np.arctan2(v, u)
    return r <= 1.0 + radial(ang)


def _smooth_radial(rng: np.random.Generator, amplitude: float, mean_radius: float):
    """Smooth periodic radial perturbation, ``amplitude`` in pixels."""
    k = np.arange(1, 5)
    coef = rng.normal(0.0, 1.0, size=(2, k.size)) / k
    norm = np.abs(coef).sum() or 1.0
    scale = amplitude / mean_radius / norm

    def radial(ang):
        return scale * (coef[0][:, None, None] * np.cos(k[:, None, None] * ang)
                        + coef[1][:, None, None] * np.sin(k[:, None, None] * ang)).sum(axis=0)
    return radial


def _organ_params(rng: np.random.Generator, spec: DatasetSpec, area: float, h: int, w: int):
    aspect = rng.uniform(0.6, 1.0)
    b = np.sqrt(area / (np.pi * aspect)) * spec.shape_scale
    a = b * aspect
    margin = b + 3
    cy = rng.uniform(margin, h - margin) if h > 2 * margin else h / 2
    cx = rng.uniform(margin, w - margin) if w > 2 * margin else w / 2
    theta = rng.uniform(0, np.pi)
    return cy, cx, a, b, theta


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    return sum(p[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def generate_scan(spec: DatasetSpec, index: int) -> Scan:
    h, w = spec.size
    geo_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index, 0]))
    tex_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index, 1]))
    ood_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index, 2]))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n_fg = spec.num_classes - 1
    area = spec.foreground_fraction * h * w / n_fg
    organs = [_organ_params(geo_rng, spec, area, h, w) for _ in range(n_fg)]
    blobs = [_organ_params(geo_rng, spec, area * geo_rng.uniform(0.5, 1.0), h, w)
             for _ in range(spec.distractors)]
    radial = [_smooth_radial(geo_rng, spec.jitter, max(o[2], o[3])) if spec.jitter > 0 else None
              for o in organs]
    contrast = geo_rng.uniform(*spec.contrast)
    levels = np.linspace(1.0, 1.8, n_fg) if n_fg > 1 else np.array([1.0])
    z_mid = (spec.depth - 1) / 2.0

    image = np.zeros((spec.depth, h, w))
    geometry = np.zeros((spec.depth, h, w), dtype=np.uint8)
    annotation = np.zeros((spec.depth, h, w), dtype=np.uint8)
    for z in range(spec.depth):
        zs = 1.0 - 0.15 * abs(z - z_mid) / max(spec.depth, 1)
        slice_img = np.zeros((h, w))
        for (cy, cx, a, b, th) in blobs:
            m = _ellipse_mask(yy, xx, cy, cx, a * zs, b * zs, th)
            slice_img[m] = spec.distractor_contrast * contrast
        for k, (cy, cx, a, b, th) in enumerate(organs, start=1):
            m = _ellipse_mask(yy, xx, cy, cx, a * zs, b * zs, th)
            geometry[z][m] = k
            slice_img[m] = levels[k - 1] * contrast
            if radial[k - 1] is not None:
                annotation[z][_ellipse_mask(yy, xx, cy, cx, a * zs, b * zs, th, radial[k - 1])] = k
        if spec.jitter == 0:
            annotation[z] = geometry[z]
        noise = _box_blur(tex_rng.normal(0.0, 1.0, size=(h, w))) * 3.0 * spec.noise_std
        slice_img = slice_img + noise
        if spec.texture_noise > 0:
            slice_img = slice_img + ood_rng.normal(0.0, spec.texture_noise, size=(h, w))
        image[z] = slice_img + spec.intensity_shift
    return Scan(id=f"scan_{index:03d}", split=spec.split_of(index), image=ImageVolume(image),
                label=LabelVolume(annotation, num_classes=spec.num_classes),
                geometry=LabelVolume(geometry, num_classes=spec.num_classes))


def generate(spec: DatasetSpec) -> Dataset:
    if spec.size[0] * spec.size[1] * spec.depth == 0:
        raise SpecError("size", "degenerate volume")
    return Dataset(spec, [generate_scan(spec, i) for i in range(spec.num_scans)])


def class_frequencies(scans, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in scans:
        counts += np.bincount(s.label.data.ravel(), minlength=num_classes)
    return counts / max(counts.sum(), 1)


def balanced_class_weights(scans, num_classes: int) -> np.ndarray:
    """w_c = sqrt(f_background / f_c), so background weighs 1."""
    f = class_frequencies(scans, num_classes)
    f = np.maximum(f, 1.0 / max(sum(s.label.data.size for s in scans), 1))
    return np.sqrt(f[0] / f)


# -------------------------------------------------------------------- disk

def save_dataset(ds: Dataset, out_dir) -> dict:
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.scans:
        entry = {"id": s.id, "split": s.split}
        for key in ("image", "label", "geometry"):
            rel = f"scans/{s.id}_{key}.uevol"
            crc = write_volume(getattr(s, key), out / rel)
            entry[key] = rel
            entry[f"{key}_crc64"] = f"{crc:016x}"
        entries.append(entry)
    manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "spec": ds.spec.to_dict(),
                "splits": {name: [s.id for s in ds.split(name)] for name in SPLITS},
                "scans": entries}
    tmp = out / "dataset.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, out / "dataset.json")
    return manifest


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest = json.loads((root / "dataset.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{root} does not hold an {DATASET_FORMAT} manifest")
    spec = DatasetSpec.from_dict(manifest["spec"])
    scans = []
    for e in manifest["scans"]:
        vols = {key: read_volume(root / e[key]) for key in ("image", "label", "geometry")}
        label = LabelVolume(vols["label"].data, num_classes=spec.num_classes)
        geometry = LabelVolume(vols["geometry"].data, num_classes=spec.num_classes)
        scans.append(Scan(e["id"], e["split"], vols["image"], label, geometry))
    return Dataset(spec, scans)
