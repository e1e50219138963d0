"""
Synthetic deformable-shape datasets.

Each class owns a procedural template; samples are smooth diffeomorphic
deformations of that template plus pixel noise. Also: stratified splits,
the on-disk dataset layout, universal noise for robustness runs and a
direct pairwise registration helper.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

import gradcore as gc
from deform import Grid2D, VelocityField, exp_map, random_smooth_velocity, warp
from gradcore import Tensor
from logger import logger
from losses import clf_loss, registration_energy
from models import SHAPE_FAMILIES, GenSpec, LossWeights
from storage import crc32_of, load_tensor, read_csv, save_tensor, write_csv, write_text
from training import AdamState, adam_step
from validators import IntegrityError, ShapeError, ValidationError, validate_labels, validate_noise_scale

DATASET_VERSION = "CORLD-DS v1"
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
NOISE_KINDS = ("fgsm_universal", "fixed_random")


@dataclass
class Dataset:
    images: Tensor
    labels: np.ndarray
    templates: Tensor
    split: np.ndarray
    velocities: Optional[np.ndarray] = None
    spec: Optional[GenSpec] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        n = self.images.shape[0]
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ShapeError(f"dataset images must be [N,1,H,W], got {self.images.shape}")
        if self.templates.ndim != 4 or self.templates.shape[1:] != self.images.shape[1:]:
            raise ShapeError(f"templates {self.templates.shape} do not match images {self.images.shape}")
        if len(self.labels) != n or len(self.split) != n:
            raise ShapeError(f"{n} images but {len(self.labels)} labels and {len(self.split)} split tags")
        validate_labels(self.labels, self.num_classes)
        unknown = set(self.split) - set(SPLITS)
        if unknown:
            raise ValidationError(f"unknown split tags {sorted(unknown)}")

    @property
    def num_classes(self) -> int:
        return int(self.templates.shape[0])

    @property
    def size(self) -> int:
        return int(self.images.shape[-1])

    @property
    def mean_template(self) -> Tensor:
        """Pixel-wise mean of the class templates, [1,1,H,W]"""
        return Tensor(self.templates.data.mean(axis=0, keepdims=True).astype(self.templates.dtype))

    def indices(self, tag: str) -> np.ndarray:
        if tag not in SPLITS:
            raise ValidationError(f"unknown split {tag!r}")
        return np.flatnonzero(self.split == tag)

    def batch_images(self, idx) -> Tensor:
        """Images at idx in the current float mode"""
        return gc.tensor(self.images.data[np.asarray(idx)])

    def batch_templates(self, idx, mode: str = "multi") -> Tensor:
        """Per-sample templates: own class template (multi) or the global mean (single)"""
        idx = np.asarray(idx)
        if mode == "multi":
            return gc.tensor(self.templates.data[self.labels[idx]])
        if mode == "single":
            return gc.tensor(np.repeat(self.mean_template.data, len(idx), axis=0))
        raise ValidationError(f"unknown template_mode {mode!r}")

    def counts(self, tag: str) -> Dict[int, int]:
        labels = self.labels[self.indices(tag)]
        return {c: int((labels == c).sum()) for c in range(self.num_classes)}


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

def make_template(family: str, size: int) -> np.ndarray:
    """Procedural binary shape smoothed to grayscale, values in [0,1]"""
    c = (size - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(size) - c, np.arange(size) - c, indexing="ij")
    r = np.hypot(rows, cols)
    radius = 0.3 * size
    if family == "disk":
        mask = r < radius
    elif family == "ring":
        mask = (r < radius) & (r > 0.55 * radius)
    elif family == "cross":
        arm, half = 0.1 * size, 0.35 * size
        mask = ((np.abs(rows) < arm) & (np.abs(cols) < half)) | ((np.abs(cols) < arm) & (np.abs(rows) < half))
    elif family == "blob":
        mask = r < radius * (1 + 0.25 * np.cos(3 * np.arctan2(rows, cols)))
    elif family == "square":
        mask = np.maximum(np.abs(rows), np.abs(cols)) < 0.26 * size
    elif family == "ellipse":
        mask = (rows / (0.38 * size)) ** 2 + (cols / (0.18 * size)) ** 2 < 1
    else:
        raise ValidationError(f"unknown shape family {family!r}")
    smooth = gaussian_filter(mask.astype(np.float64), sigma=max(size / 32.0, 0.5), mode="wrap")
    return np.clip(smooth, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Generation and splits
# ---------------------------------------------------------------------------

def stratified_split(labels: np.ndarray, rng: np.random.Generator,
                     fractions: Tuple[float, float, float] = SPLIT_FRACTIONS) -> np.ndarray:
    """Per-class 70/15/15 assignment; validation remainders go to the lowest class ids"""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    per_class = {c: np.flatnonzero(labels == c) for c in classes}
    n_train = {c: int(round(fractions[0] * len(idx))) for c, idx in per_class.items()}
    n_val = {c: int(np.floor(fractions[1] * len(idx))) for c, idx in per_class.items()}
    remainder = int(round(fractions[1] * len(labels))) - sum(n_val.values())
    for c in classes:
        if remainder <= 0:
            break
        if len(per_class[c]) - n_train[c] - n_val[c] > 0:
            n_val[c] += 1
            remainder -= 1

    split = np.empty(len(labels), dtype=object)
    for c, idx in per_class.items():
        if n_train[c] < 2:
            raise ValidationError(f"class {c} has {n_train[c]} training samples (need >= 2)")
        order = rng.permutation(idx)
        split[order[:n_train[c]]] = "train"
        split[order[n_train[c]:n_train[c] + n_val[c]]] = "val"
        split[order[n_train[c] + n_val[c]:]] = "test"
    return split


def gen_synthetic(spec: GenSpec) -> Dataset:
    """Deformed, noisy copies of per-class templates with a stratified split"""
    rng = np.random.default_rng(spec.seed)
    grid = Grid2D(spec.size, spec.size)
    families = SHAPE_FAMILIES[:spec.classes]
    templates = np.stack([make_template(f, spec.size) for f in families])[:, None]

    with gc.float_mode("f64"):
        images, velocities, labels = [], [], []
        for c in range(spec.classes):
            v = random_smooth_velocity(grid, spec.deform_amplitude, rng, batch=spec.per_class)
            template = gc.tensor(np.repeat(templates[c:c + 1], spec.per_class, axis=0))
            deformed = warp(template, exp_map(v, spec.steps)).data
            noisy = deformed + spec.noise_std * rng.standard_normal(deformed.shape)
            images.append(np.clip(noisy, 0.0, 1.0))
            velocities.append(v.values.data)
            labels.extend([c] * spec.per_class)

    labels = np.asarray(labels, dtype=np.int64)
    split = stratified_split(labels, rng)
    dataset = Dataset(
        images=Tensor(np.concatenate(images).astype(np.float32)),
        labels=labels,
        templates=Tensor(templates.astype(np.float32)),
        split=split,
        velocities=np.concatenate(velocities).astype(np.float32),
        spec=spec,
    )
    counts = [int((split == tag).sum()) for tag in SPLITS]
    logger.info(
        f"Generated {len(labels)} samples ({', '.join(families)}) at {spec.size}x{spec.size}; "
        f"split train/val/test = {counts[0]}/{counts[1]}/{counts[2]}"
    )
    return dataset


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_dataset(d: Dataset, directory) -> Path:
    """images.f32t, templates.f32t, velocities.f32t, labels.csv, split.csv and a manifest"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "images.f32t", d.images.data.astype(np.float32))
    save_tensor(directory / "templates.f32t", d.templates.data.astype(np.float32))
    files = ["images.f32t", "templates.f32t", "labels.csv", "split.csv"]
    if d.velocities is not None:
        save_tensor(directory / "velocities.f32t", np.asarray(d.velocities, dtype=np.float32))
        files.append("velocities.f32t")
    write_csv(directory / "labels.csv", ["index", "label"], enumerate(d.labels.tolist()), "labels")
    write_csv(directory / "split.csv", ["index", "split"], enumerate(d.split.tolist()), "split")

    n, _, h, w = d.images.shape
    lines = [
        DATASET_VERSION,
        f"spec {json.dumps(d.spec.model_dump() if d.spec else None, sort_keys=True)}",
        f"seed {d.spec.seed if d.spec else ''}".rstrip(),
        f"counts {n} {d.num_classes} {h} {w}",
    ]
    lines += [f"file {name} {crc32_of(directory / name)}" for name in files]
    write_text(directory / "manifest.txt", "\n".join(lines) + "\n")
    logger.info(f"Saved dataset ({n} samples) to {directory}")
    return directory


def _read_manifest(directory: Path) -> Tuple[Optional[GenSpec], Tuple[int, ...], Dict[str, str]]:
    path = directory / "manifest.txt"
    if not path.exists():
        raise IntegrityError(f"{path}: missing dataset manifest")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != DATASET_VERSION:
        raise IntegrityError(f"{path}: unsupported dataset version {lines[0] if lines else ''!r}")
    spec, counts, files = None, (), {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "spec":
            raw = json.loads(rest)
            spec = GenSpec.model_validate(raw) if raw else None
        elif key == "counts":
            counts = tuple(int(x) for x in rest.split())
        elif key == "file":
            name, crc = rest.split()
            files[name] = crc
    return spec, counts, files


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    spec, counts, files = _read_manifest(directory)
    for name, crc in files.items():
        path = directory / name
        if not path.exists():
            raise IntegrityError(f"{path}: listed in manifest but missing")
        actual = crc32_of(path)
        if actual != crc:
            raise IntegrityError(f"{path}: checksum mismatch (manifest {crc}, file {actual})")

    images = load_tensor(directory / "images.f32t")
    templates = load_tensor(directory / "templates.f32t")
    velocities = load_tensor(directory / "velocities.f32t") if "velocities.f32t" in files else None
    labels = np.array([int(row["label"]) for row in read_csv(directory / "labels.csv")], dtype=np.int64)
    split = np.array([row["split"] for row in read_csv(directory / "split.csv")], dtype=object)
    if counts and (images.shape[0], templates.shape[0], images.shape[2], images.shape[3]) != counts:
        raise IntegrityError(f"{directory}: manifest counts {counts} disagree with stored tensors")
    return Dataset(Tensor(images), labels, Tensor(templates), split, velocities, spec)


# ---------------------------------------------------------------------------
# Universal noise
# ---------------------------------------------------------------------------

def make_universal_noise(clf, net, data: Dataset, scale: float, kind: str = "fgsm_universal",
                         seed: int = 0, split: str = "val") -> Tensor:
    """One fixed [1,1,H,W] perturbation with max-abs equal to scale.

    fgsm_universal averages the sign of the classification-loss input gradient
    over the chosen split; fixed_random is a seeded model-agnostic control.
    """
    from networks import boosted_forward

    validate_noise_scale(scale)
    if kind not in NOISE_KINDS:
        raise ValidationError(f"unknown noise kind {kind!r}")
    shape = (1, 1, data.size, data.size)
    if scale == 0:
        return gc.tensor(np.zeros(shape))

    if kind == "fixed_random":
        pattern = np.random.default_rng(seed).uniform(-1.0, 1.0, shape)
    else:
        idx = data.indices(split)
        if len(idx) == 0:
            idx = data.indices("train")
        images = gc.tensor(data.images.data[idx], requires_grad=True)
        templates = None
        if net is not None and net.arch.in_channels > 1:
            templates = data.batch_templates(idx, "single")
        with gc.Tape() as tape:
            logits = boosted_forward(clf, net, images, training=False, finetune=True, templates=templates)
            loss = clf_loss(logits, data.labels[idx], 1.0)
        gc.backward(tape, loss)
        pattern = np.sign(images.grad).mean(axis=0, keepdims=True).astype(np.float64)
        clf.zero_grad()
        if net is not None:
            net.zero_grad()

    peak = np.abs(pattern).max()
    if peak == 0:
        logger.warning(f"Universal noise pattern ({kind}) vanished; returning zero perturbation")
        return gc.tensor(np.zeros(shape))
    return gc.tensor(pattern / peak * scale)


def apply_noise(images: Tensor, noise: Tensor) -> Tensor:
    """Add a universal pattern to every image and clamp to [0,1]"""
    return gc.tensor(np.clip(images.data + noise.data, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Direct pairwise registration
# ---------------------------------------------------------------------------

def register_pair(S: Tensor, T: Tensor, w: Optional[LossWeights] = None, iters: int = 200,
                  lr: float = 0.1, steps: int = 6) -> Tuple[VelocityField, List[float]]:
    """Minimize the pairwise registration energy over a velocity field with Adam"""
    w = w or LossWeights()
    grid = Grid2D.of(S)
    v = gc.zeros((2,) + (grid.height, grid.width), requires_grad=True)
    state = AdamState()
    limit = 0.45 * 2 ** steps
    energies = []
    for _ in range(iters):
        with gc.Tape() as tape:
            energy = registration_energy(S, T, VelocityField(grid, v), w, steps)
        energies.append(energy.item())
        gc.backward(tape, energy)
        adam_step({"v": v}, {"v": v.grad}, state, lr, weight_decay=0.0)
        v.grad = None
        peak = VelocityField(grid, v).max_magnitude()
        if peak > limit:
            v.data = (v.data * (limit / peak)).astype(v.dtype)
    with gc.no_tape():
        energies.append(registration_energy(S, T, VelocityField(grid, v), w, steps).item())
    return VelocityField(grid, v.detach()), energies
