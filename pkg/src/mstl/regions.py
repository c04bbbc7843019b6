"""Lung-region decomposition: locate, crop, and resize the five lobe crops.

The pipeline is: smooth + Otsu threshold -> keep the two largest connected
components (the lung fields) -> boundary map -> bounding box -> five fixed
fractional windows. Image-left is treated as the patient's right lung
(radiological convention): it is split into vertical thirds (upper, middle,
lower lobes); the other half into vertical halves (upper, lower). Bands tile
each half exactly, so the five windows cover the whole lung box.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ContractError, DegenerateAnatomyError

LOBES = ("ru", "rm", "rl", "lu", "ll")
LOBE_INDEX = {lobe: i for i, lobe in enumerate(LOBES)}

MIN_COMPONENT_FRACTION = 0.01


@dataclass(frozen=True)
class RegionTuple:
    """Center (x=column, y=row) and extents of one lobe window."""

    x: int
    y: int
    w: int
    h: int
    lobe: str

    def col_start(self) -> int:
        return self.x - self.w // 2

    def row_start(self) -> int:
        return self.y - self.h // 2


@dataclass
class RegionSet:
    """Five lobe crops resized to the source image's size, plus their tuples."""

    regions: dict[str, np.ndarray]
    tuples: dict[str, RegionTuple]

    def ordered(self) -> list[tuple[str, np.ndarray, RegionTuple]]:
        return [(lobe, self.regions[lobe], self.tuples[lobe]) for lobe in LOBES]


def _check_grayscale(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise ContractError(f"expected a grayscale image, got shape {img.shape}")
    if img.max() > 1.5:  # 8-bit input
        img = img / 255.0
    return img


def mean_filter3(image: np.ndarray) -> np.ndarray:
    """3x3 mean smoothing with replicated edges."""
    p = np.pad(image, 1, mode="edge")
    acc = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy:dy + image.shape[0], dx:dx + image.shape[1]]
    return acc / 9.0


def otsu_threshold(image: np.ndarray, bins: int = 256) -> float:
    """Between-class-variance-maximizing threshold on [0,1] intensities."""
    flat = image.reshape(-1)
    lo, hi = float(flat.min()), float(flat.max())
    if hi - lo < 1e-12:
        raise DegenerateAnatomyError("constant image: no threshold separates classes")
    hist, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / flat.size
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        raise DegenerateAnatomyError("degenerate histogram")
    between = np.zeros_like(w0)
    between[valid] = (mu_t * w0[valid] - mu[valid]) ** 2 / (w0[valid] * w1[valid])
    return float(centers[int(np.argmax(between))])


def _label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connectivity labeling via BFS; label 0 is background."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            current += 1
            q = deque([(sy, sx)])
            labels[sy, sx] = current
            while q:
                y, x = q.popleft()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = current
                        q.append((ny, nx))
    return labels, current


def binarize_lung_mask(image) -> np.ndarray:
    """Foreground mask of the two largest bright components.

    Smooths, applies Otsu, and keeps the two largest 4-connected components;
    raises DegenerateAnatomyError when fewer than two components exceed 1%
    of the image area.
    """
    img = _check_grayscale(image)
    smoothed = mean_filter3(img)
    thr = otsu_threshold(smoothed)
    fg = smoothed > thr
    labels, count = _label_components(fg)
    if count == 0:
        raise DegenerateAnatomyError("no foreground component found")
    areas = np.bincount(labels.reshape(-1), minlength=count + 1)[1:]
    min_area = MIN_COMPONENT_FRACTION * img.size
    big = [i + 1 for i in np.argsort(areas)[::-1] if areas[i] >= min_area]
    if len(big) < 2:
        raise DegenerateAnatomyError(
            f"found {len(big)} usable components, need two lung fields"
        )
    keep = set(big[:2])
    return np.isin(labels, list(keep)).astype(np.float64)


def boundary_map(mask) -> np.ndarray:
    """Mark pixels whose 3x3 neighborhood holds both mask values.

    Edges are padded by replication, so border pixels can be boundaries.
    Invariant under complementing the mask.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError("boundary_map expects a 2-D mask")
    binary = m > 0.5
    p = np.pad(binary, 1, mode="edge")
    h, w = binary.shape
    any_on = np.zeros((h, w), dtype=bool)
    any_off = np.zeros((h, w), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            window = p[dy:dy + h, dx:dx + w]
            any_on |= window
            any_off |= ~window
    return (any_on & any_off).astype(np.float64)


def _bbox_from_boundary(bmap: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(bmap > 0.5)
    if ys.size == 0:
        raise DegenerateAnatomyError("empty boundary map")
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def _band_edges(start: int, extent: int, parts: int) -> list[int]:
    return [start + (extent * k) // parts for k in range(parts + 1)]


def locate(image) -> list[RegionTuple]:
    """Five lobe windows from the lung bounding box, in (ru,rm,rl,lu,ll) order."""
    img = _check_grayscale(image)
    mask = binarize_lung_mask(img)
    bmap = boundary_map(mask)
    r0, r1, c0, c1 = _bbox_from_boundary(bmap)
    height, width = r1 - r0, c1 - c0

    cols = _band_edges(c0, width, 2)          # split at the vertical midline
    right_rows = _band_edges(r0, height, 3)   # image-left half: three lobes
    left_rows = _band_edges(r0, height, 2)    # image-right half: two lobes

    def window(rows, k, u, v) -> tuple[int, int, int, int]:
        a, b = rows[k], rows[k + 1]
        w, h = v - u, b - a
        return u + w // 2, a + h // 2, w, h

    tuples = []
    for i, lobe in enumerate(("ru", "rm", "rl")):
        x, y, w, h = window(right_rows, i, cols[0], cols[1])
        tuples.append(RegionTuple(x, y, w, h, lobe))
    for i, lobe in enumerate(("lu", "ll")):
        x, y, w, h = window(left_rows, i, cols[1], cols[2])
        tuples.append(RegionTuple(x, y, w, h, lobe))
    return tuples


def crop(image, tup: RegionTuple) -> np.ndarray:
    """The w x h window centered at (x, y); errors if outside the image."""
    img = _check_grayscale(image)
    if tup.w < 1 or tup.h < 1:
        raise ContractError("region extents must be >= 1")
    rs, cs = tup.row_start(), tup.col_start()
    if rs < 0 or cs < 0 or rs + tup.h > img.shape[0] or cs + tup.w > img.shape[1]:
        raise BoundsError(f"window {tup} falls outside image {img.shape}")
    return img[rs:rs + tup.h, cs:cs + tup.w].copy()


def resize_region(region, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling; same-size is identity."""
    img = _check_grayscale(region)
    if target_h < 1 or target_w < 1:
        raise ContractError("target extents must be positive")
    h, w = img.shape
    if (h, w) == (target_h, target_w):
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, target_h) if target_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, target_w) if target_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bottom = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def generate_regions(image) -> RegionSet:
    """locate -> crop -> resize each window back to the source image's size."""
    img = _check_grayscale(image)
    h, w = img.shape
    tuples = locate(img)
    regions = {t.lobe: resize_region(crop(img, t), h, w) for t in tuples}
    return RegionSet(regions=regions, tuples={t.lobe: t for t in tuples})
