"""Deterministic synthetic lung phantoms, dataset I/O, and augmentation.

A phantom is two bright elliptical lung fields on a dark background, banded
into 3 + 2 lobe intensity zones; positive-label images carry one or more
bright disk lesions placed strictly inside a lung. Generation is a pure
function of (spec, seed): per-image randomness derives from (seed, index),
so datasets are byte-identical across platforms and runs.

Dataset directory layout::

    images/NNNNNN.pgm    8-bit PGM (P5)
    masks/NNNNNN.pgm     ground-truth lung masks (lung phantoms only)
    labels.csv           filename,label,split
    meta.json            spec echo + seed
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIOError
from .pgm import read_pgm, write_pgm
from .regions import resize_region

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    lesion_probability_by_label: dict[int, float] = field(
        default_factory=lambda: {0: 0.0, 1: 1.0})
    lobe_intensity_profile: tuple[float, ...] = (0.58, 0.66, 0.60, 0.63, 0.56)
    noise_sigma: float = 0.02
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "lesion_probability_by_label": {
                str(k): v for k, v in self.lesion_probability_by_label.items()},
            "lobe_intensity_profile": list(self.lobe_intensity_profile),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class AugmentPolicy:
    scale_to: int = 72
    crop_to: int = 64
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    gray_prob: float = 0.5
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2

    def __post_init__(self):
        if self.crop_to > self.scale_to:
            raise ContractError("crop_to must be <= scale_to")


@dataclass
class LabeledDataset:
    images: list[np.ndarray]
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    masks: list[np.ndarray] | None = None
    lung_boxes: list[tuple[int, int, int, int]] | None = None
    lesion_pixels: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def split_indices(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise ContractError(f"unknown split {name!r}")
        return self.splits[name]


# ---------------------------------------------------------------------
# phantom drawing
# ---------------------------------------------------------------------


def _ellipse_mask(size, cx, cy, a, b):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def _lung_geometry(size: int, rng: np.random.Generator):
    """Two ellipses with mild seeded jitter; image-left is the right lung."""
    j = lambda s: rng.uniform(-s, s) * size
    right = dict(cx=0.30 * size + j(0.015), cy=0.50 * size + j(0.015),
                 a=0.160 * size * rng.uniform(0.94, 1.06),
                 b=0.300 * size * rng.uniform(0.94, 1.06))
    left = dict(cx=0.70 * size + j(0.015), cy=0.50 * size + j(0.015),
                a=0.150 * size * rng.uniform(0.94, 1.06),
                b=0.270 * size * rng.uniform(0.94, 1.06))
    return right, left


def _paint_lung(img, size, geom, band_starts, intensities):
    """Fill an ellipse with per-band intensities (bands split the y extent).

    Bands are painted cumulatively from the top, each overwriting the rows
    at and below its start fraction, so the zones tile the ellipse exactly.
    """
    mask = _ellipse_mask(size, geom["cx"], geom["cy"], geom["a"], geom["b"])
    y0 = geom["cy"] - geom["b"]
    extent = 2.0 * geom["b"]
    yy = np.mgrid[0:size, 0:size][0]
    for frac, intensity in zip(band_starts, intensities):
        img[mask & (yy >= y0 + extent * frac)] = intensity
    return mask


def _place_lesion(img, size, geom, rng, radius, intensity):
    """Draw a hard disk fully inside the ellipse; returns its pixel coords."""
    margin = (radius + 1.5) / min(geom["a"], geom["b"])
    if margin >= 0.95:
        radius = max(1.0, 0.5 * min(geom["a"], geom["b"]))
        margin = (radius + 1.5) / min(geom["a"], geom["b"])
    while True:
        t = rng.uniform(0, 2 * np.pi)
        r = np.sqrt(rng.uniform(0, 1.0)) * max(0.0, 1.0 - margin)
        cx = geom["cx"] + r * np.cos(t) * geom["a"]
        cy = geom["cy"] + r * np.sin(t) * geom["b"]
        if 0 <= cx < size and 0 <= cy < size:
            break
    yy, xx = np.mgrid[0:size, 0:size]
    disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    img[disk] = intensity
    return np.argwhere(disk)


def render_phantom(size: int, rng: np.random.Generator,
                   profile: tuple[float, ...], noise_sigma: float,
                   lesions: list[tuple[float, float]]):
    """One phantom image.

    ``lesions`` is a list of (radius_fraction, intensity); each is placed in
    a seeded lung. Returns (image, lung_mask, lung_bbox, lesion_pixels).
    """
    img = np.full((size, size), 0.10)
    img += rng.normal(0.0, 0.01, size=(size, size))  # background texture
    right, left = _lung_geometry(size, rng)
    m_right = _paint_lung(img, size, right, (0.0, 1 / 3, 2 / 3), profile[:3])
    m_left = _paint_lung(img, size, left, (0.0, 0.5), profile[3:])
    mask = m_right | m_left

    pixels = []
    for radius_frac, intensity in lesions:
        geom = right if rng.random() < 0.5 else left
        radius = max(1.5, radius_frac * size)
        pixels.append(_place_lesion(img, size, geom, rng, radius, intensity))
    lesion_pixels = (np.concatenate(pixels, axis=0) if pixels
                     else np.zeros((0, 2), dtype=np.int64))

    img += rng.normal(0.0, noise_sigma, size=(size, size))
    img = np.clip(img, 0.0, 1.0)
    ys, xs = np.nonzero(mask)
    bbox = (int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1)
    return img, mask.astype(np.float64), bbox, lesion_pixels


def _lesion_plan(label: int, kind: str, rng: np.random.Generator,
                 prob: float) -> list[tuple[float, float]]:
    if rng.random() >= prob:
        return []
    if kind == "target":
        count = int(rng.integers(1, 4))
        return [(rng.uniform(0.05, 0.085), rng.uniform(0.90, 0.98)) for _ in range(count)]
    if label == 1:  # diffuse: several small faint lesions
        count = int(rng.integers(4, 8))
        return [(rng.uniform(0.02, 0.035), rng.uniform(0.78, 0.86)) for _ in range(count)]
    # focal: one large bright lesion
    return [(rng.uniform(0.06, 0.09), rng.uniform(0.90, 0.97))]


def _stratified_splits(labels: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """50/25/25 split, shuffled and stratified per label."""
    buckets: dict[str, list[int]] = {s: [] for s in SPLITS}
    for lab in np.unique(labels):
        idx = np.nonzero(labels == lab)[0]
        idx = idx[rng.permutation(idx.size)]
        k = idx.size
        n_train, n_val = k // 2, k // 4
        buckets["train"] += idx[:n_train].tolist()
        buckets["val"] += idx[n_train:n_train + n_val].tolist()
        buckets["test"] += idx[n_train + n_val:].tolist()
    return {s: np.array(sorted(v), dtype=np.int64) for s, v in buckets.items()}


def generate_phantom(spec: PhantomSpec, n: int) -> LabeledDataset:
    """Binary lung-phantom dataset: label 1 images carry lesions.

    Labels alternate 0/1 so counts are balanced to within one; per-image rng
    derives from (seed, index).
    """
    return _generate_lung_dataset(spec, n, num_classes=2, kind="target")


def generate_medical_source(spec: PhantomSpec, n: int) -> LabeledDataset:
    """Three-class lung source set: normal / diffuse lesions / focal lesion."""
    return _generate_lung_dataset(spec, n, num_classes=3, kind="medical")


def _generate_lung_dataset(spec: PhantomSpec, n: int, num_classes: int,
                           kind: str) -> LabeledDataset:
    if n < 1:
        raise ContractError("n must be >= 1")
    labels = np.array([i % num_classes for i in range(n)], dtype=np.int64)
    images, masks, boxes, lesions = [], [], [], []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, i])
        label = int(labels[i])
        prob = spec.lesion_probability_by_label.get(
            label, 0.0 if label == 0 else 1.0)
        plan = _lesion_plan(label, kind, rng, prob)
        img, mask, bbox, pix = render_phantom(
            spec.image_size, rng, spec.lobe_intensity_profile, spec.noise_sigma, plan)
        images.append(img)
        masks.append(mask)
        boxes.append(bbox)
        lesions.append(pix)
    split_rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    return LabeledDataset(
        images=images, labels=labels, splits=_stratified_splits(labels, split_rng),
        masks=masks, lung_boxes=boxes, lesion_pixels=lesions,
        meta={"kind": kind, "spec": spec.to_dict(), "n": n, "num_classes": num_classes},
    )


# ---------------------------------------------------------------------
# textured source images (no anatomy)
# ---------------------------------------------------------------------


def _texture(size: int, label: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    if label == 0:  # oriented stripes
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 7)
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.35 * np.sin(2 * np.pi * freq *
                                  (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    elif label == 1:  # checkerboard
        cell = int(rng.integers(4, 11))
        off = int(rng.integers(0, cell))
        grid = ((np.arange(size) + off) // cell) % 2
        img = 0.25 + 0.5 * np.logical_xor.outer(grid, grid).astype(np.float64)
    elif label == 2:  # blob field
        img = np.full((size, size), 0.2)
        for _ in range(int(rng.integers(5, 12))):
            cx, cy = rng.uniform(0, size, 2)
            s = rng.uniform(size / 20, size / 8)
            img += 0.55 * np.exp(-(((xx * size - cx) ** 2 + (yy * size - cy) ** 2)
                                   / (2 * s * s)))
    else:  # gradient
        gx, gy = rng.uniform(-1, 1, 2)
        img = 0.5 + 0.4 * (gx * (xx - 0.5) + gy * (yy - 0.5))
    return img


def generate_natural_source(spec: PhantomSpec, n: int) -> LabeledDataset:
    """Four-class textured source set standing in for generic labeled images."""
    if n < 1:
        raise ContractError("n must be >= 1")
    labels = np.array([i % 4 for i in range(n)], dtype=np.int64)
    images = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, i])
        img = _texture(spec.image_size, int(labels[i]), rng)
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
        images.append(np.clip(img, 0.0, 1.0))
    split_rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    return LabeledDataset(
        images=images, labels=labels, splits=_stratified_splits(labels, split_rng),
        meta={"kind": "natural", "spec": spec.to_dict(), "n": n, "num_classes": 4},
    )


GENERATORS = {
    "target": generate_phantom,
    "medical": generate_medical_source,
    "natural": generate_natural_source,
}


# ---------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------


def write_dataset(ds: LabeledDataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if ds.masks is not None:
        (out / "masks").mkdir(exist_ok=True)
    split_of = {}
    for name, idx in ds.splits.items():
        for i in idx:
            split_of[int(i)] = name
    rows = []
    for i, img in enumerate(ds.images):
        fname = f"{i:06d}.pgm"
        write_pgm(out / "images" / fname, img)
        if ds.masks is not None:
            write_pgm(out / "masks" / fname, ds.masks[i])
        rows.append((fname, int(ds.labels[i]), split_of[i]))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label", "split"])
        writer.writerows(rows)
    (out / "meta.json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True))


def load_dataset(path) -> LabeledDataset:
    root = Path(path)
    labels_file = root / "labels.csv"
    if not labels_file.exists():
        raise DataIOError(f"no labels.csv under {root}")
    images, labels = [], []
    split_lists: dict[str, list[int]] = {s: [] for s in SPLITS}
    masks: list[np.ndarray] = []
    have_masks = (root / "masks").is_dir()
    with open(labels_file, newline="") as fh:
        reader = csv.DictReader(fh)
        for i, row in enumerate(reader):
            images.append(read_pgm(root / "images" / row["filename"]))
            labels.append(int(row["label"]))
            split = row["split"]
            if split not in split_lists:
                raise DataIOError(f"unknown split {split!r} in labels.csv")
            split_lists[split].append(i)
            if have_masks:
                masks.append(read_pgm(root / "masks" / row["filename"]))
    if not images:
        raise DataIOError(f"empty dataset under {root}")
    meta = {}
    meta_file = root / "meta.json"
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
    return LabeledDataset(
        images=images, labels=np.array(labels, dtype=np.int64),
        splits={s: np.array(v, dtype=np.int64) for s, v in split_lists.items()},
        masks=masks if have_masks else None, meta=meta,
    )


def generate_and_write(kind: str, spec: PhantomSpec, n: int, out_dir) -> LabeledDataset:
    if kind not in GENERATORS:
        raise ContractError(f"unknown dataset kind {kind!r}")
    ds = GENERATORS[kind](spec, n)
    write_dataset(ds, out_dir)
    return ds


# ---------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------


def augment(image, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Scale -> random crop -> flip/jitter/gray, each with its probability.

    Deterministic given the rng state. "Gray" is an identity on these
    single-channel images but still consumes its draw, keeping the random
    stream layout independent of channel count.
    """
    img = np.asarray(image, dtype=np.float64)
    img = resize_region(img, policy.scale_to, policy.scale_to)
    if img.shape[0] < policy.crop_to or img.shape[1] < policy.crop_to:
        raise ContractError("image smaller than crop size after scaling")
    max_off = policy.scale_to - policy.crop_to
    y0 = int(rng.integers(0, max_off + 1))
    x0 = int(rng.integers(0, max_off + 1))
    img = img[y0:y0 + policy.crop_to, x0:x0 + policy.crop_to]

    if rng.random() < policy.flip_prob:
        img = img[:, ::-1]
    if rng.random() < policy.jitter_prob:
        b = 1.0 + rng.uniform(-policy.jitter_brightness, policy.jitter_brightness)
        c = 1.0 + rng.uniform(-policy.jitter_contrast, policy.jitter_contrast)
        m = img.mean()
        img = (img * b - m) * c + m
    if rng.random() < policy.gray_prob:
        pass  # grayscale conversion of a grayscale image
    return np.clip(img, 0.0, 1.0).copy()


def center_crop(image, policy: AugmentPolicy) -> np.ndarray:
    """Deterministic eval-time view: scale then center crop."""
    img = resize_region(np.asarray(image, dtype=np.float64),
                        policy.scale_to, policy.scale_to)
    off = (policy.scale_to - policy.crop_to) // 2
    return img[off:off + policy.crop_to, off:off + policy.crop_to].copy()
