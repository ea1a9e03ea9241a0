"""Procedural urban scenes, simulated change pairs, noise, normalisation and PNG I/O.

Classes: 0 building, 1 immutable surface (roads, paving), 2 background (vegetation).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError, FormatError, GenerationError

BUILDING, IMMUTABLE, BACKGROUND = 0, 1, 2
CLASS_NAMES = ("building", "immutable", "background")
# ground-truth / rendering colours: blue building, green immutable, red background
CLASS_COLORS = np.array([[0, 0, 255], [0, 255, 0], [255, 0, 0]], dtype=np.uint8)

MIN_SCENE_SIZE = 32
JITTER_CAP = 8

_VEGETATION = np.array([[78, 118, 52], [58, 88, 44], [112, 118, 70], [90, 128, 60]], dtype=float)
_ROOFS = np.array([[176, 84, 62], [206, 204, 196], [152, 100, 72], [190, 120, 90]], dtype=float)


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 class indices
    # painted objects as (kind, y0, x0, y1, x1), half-open boxes
    objects: list[tuple[str, int, int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape or self.image.shape[2:] != (3,):
            raise DimensionError(f"image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass
class ChangePair:
    before: np.ndarray
    after: np.ndarray
    change_mask: np.ndarray  # (H, W) bool
    after_mask: np.ndarray  # (H, W) class indices of the after image
    before_mask: np.ndarray

    @property
    def changed_fraction(self) -> float:
        return float(self.change_mask.mean())


@dataclass
class NormalizationStats:
    mean: np.ndarray  # per channel, 0-255 scale
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if not np.all(self.std > 0):
            raise ConfigError(f"normalisation std must be positive per channel, got {self.std}")


# --------------------------------------------------------------------------- painting


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def _paint_background(rng, size):
    base = _VEGETATION[rng.integers(len(_VEGETATION))] + rng.uniform(-10, 10, 3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    img += 14 * _smooth_field(rng, size, max(3, size // 12))[..., None]
    # tree canopies: darker round blobs
    yy, xx = np.mgrid[:size, :size]
    for _ in range(rng.integers(2, 3 + size // 16)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(2, max(3, size / 12))
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[blob] *= rng.uniform(0.6, 0.8)
    return img


def _paint_paving(img, mask, y0, x0, y1, x1, rng):
    gray = rng.uniform(100, 145)
    tint = rng.uniform(-4, 4, 3)
    img[y0:y1, x0:x1] = gray + tint
    mask[y0:y1, x0:x1] = IMMUTABLE


def _paint_roads(img, mask, rng, size):
    objects = []
    for _ in range(rng.integers(1, 4)):
        width = int(rng.integers(max(3, size // 16), max(4, size // 8) + 1))
        pos = int(rng.integers(0, size - width + 1))
        if rng.random() < 0.5:
            box = (pos, 0, pos + width, size)
        else:
            box = (0, pos, size, pos + width)
        _paint_paving(img, mask, *box, rng)
        objects.append(("immutable", *box))
    return objects


def paint_building(img: np.ndarray, mask: np.ndarray, box: tuple[int, int, int, int], rng) -> None:
    """Paint a shaded roof with a dark outline over ``box`` and label it building."""
    y0, x0, y1, x1 = box
    roof = _ROOFS[rng.integers(len(_ROOFS))] + rng.uniform(-12, 12, 3)
    h, w = y1 - y0, x1 - x0
    patch = np.broadcast_to(roof, (h, w, 3)).copy()
    # ridge along the longer side: one half in shade
    if h >= w:
        patch[:, w // 2 :] *= 0.82
    else:
        patch[h // 2 :, :] *= 0.82
    patch[[0, -1], :] *= 0.6
    patch[:, [0, -1]] *= 0.6
    img[y0:y1, x0:x1] = patch
    mask[y0:y1, x0:x1] = BUILDING


def _free(occupied: np.ndarray, box, margin: int = 1) -> bool:
    y0, x0, y1, x1 = box
    h, w = occupied.shape
    return not occupied[max(0, y0 - margin) : min(h, y1 + margin), max(0, x0 - margin) : min(w, x1 + margin)].any()


def _finish(img: np.ndarray, rng, speckle: float = 4.0) -> np.ndarray:
    img = img + rng.normal(0, speckle, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(seed: int, size: int = 64) -> LabeledImage:
    """Vegetation background, 1-3 road bands and 2-8 non-overlapping buildings."""
    if size < MIN_SCENE_SIZE:
        raise ConfigError(f"scene size must be at least {MIN_SCENE_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    img = _paint_background(rng, size)
    mask = np.full((size, size), BACKGROUND, dtype=np.uint8)
    objects = _paint_roads(img, mask, rng, size)
    roads = mask == IMMUTABLE

    occupied = roads.copy()
    wanted = int(rng.integers(2, 9))
    lo, hi = max(4, size // 10), max(6, size // 4)
    placed = 0
    for _ in range(60 * wanted):
        if placed == wanted:
            break
        h, w = (int(v) for v in rng.integers(lo, hi + 1, 2))
        y0, x0 = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
        box = (y0, x0, y0 + h, x0 + w)
        if not _free(occupied, box):
            continue
        boxes = [box]
        # compound (L-shaped) building: a wing attached below or to the right
        if rng.random() < 0.35:
            wh, ww = max(3, h // 2), max(3, w // 2)
            wing = (y0 + h, x0, y0 + h + wh, x0 + ww) if rng.random() < 0.5 else (y0, x0 + w, y0 + wh, x0 + w + ww)
            if wing[2] <= size and wing[3] <= size and _free(occupied, wing):
                boxes.append(wing)
        for b in boxes:
            paint_building(img, mask, b, rng)
            occupied[b[0] : b[2], b[1] : b[3]] = True
            objects.append(("building", *b))
        placed += 1
    return LabeledImage(_finish(img, rng), mask, objects)


# --------------------------------------------------------------------------- change simulation


def _jitter_foliage(after: np.ndarray, where: np.ndarray, rng) -> np.ndarray:
    size = after.shape[0]
    delta = 5 * _smooth_field(rng, size, max(3, size // 10)) + rng.normal(0, 2, (size, size))
    delta = np.clip(np.rint(delta), -JITTER_CAP, JITTER_CAP)[..., None]
    jittered = np.clip(after.astype(np.int16) + delta.astype(np.int16), 0, 255).astype(np.uint8)
    return np.where(where[..., None], jittered, after)


def simulate_change(
    scene: LabeledImage,
    target_fraction: float,
    seed: int,
    kinds: Sequence[str] = ("building",),
    jitter: bool = True,
    tolerance: float = 0.005,
) -> ChangePair:
    """Insert new structures until the edited-pixel fraction is within ``tolerance`` of the target.

    The change mask is exactly the set of repainted pixels. With ``jitter``,
    vegetation outside the edit gets a small (at most 8 levels) brightness
    perturbation that is labelled unchanged.
    """
    if not 0 <= target_fraction < 0.5:
        raise ConfigError(f"target fraction must lie in [0, 0.5), got {target_fraction}")
    for kind in kinds:
        if kind not in ("building", "immutable"):
            raise ConfigError(f"unknown structure kind {kind!r}")
    before, before_mask = scene.image, scene.mask
    size = before_mask.shape[0]
    change = np.zeros(before_mask.shape, dtype=bool)
    if target_fraction == 0:
        return ChangePair(before.copy(), before.copy(), change, before_mask.copy(), before_mask.copy())

    rng = np.random.default_rng(seed)
    after = before.astype(np.float64)
    after_mask = before_mask.copy()
    total = before_mask.size
    target = int(round(target_fraction * total))
    tol = max(1, int(tolerance * total))
    max_side = max(6, size // 3)
    blocked = before_mask == BUILDING
    # largest rectangle area tried; shrinks after repeated misses on crowded scenes
    cap, misses = max_side * max_side, 0

    for _ in range(4000):
        remaining = target - int(change.sum())
        if abs(remaining) <= tol:
            break
        if misses >= 40 and cap > 9:
            cap, misses = max(9, cap // 2), 0
        misses += 1
        area = min(remaining, cap)
        aspect = rng.uniform(0.6, 1.6)
        h = int(np.clip(round(np.sqrt(area * aspect)), 3, max_side))
        w = int(np.clip(round(area / h), 3, max_side))
        if h * w > remaining + tol:
            continue
        y0, x0 = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
        box = (y0, x0, y0 + h, x0 + w)
        kind = kinds[int(rng.integers(len(kinds)))]
        if not _free(blocked | change, box):
            continue
        if kind == "immutable" and (before_mask[y0 : y0 + h, x0 : x0 + w] != BACKGROUND).any():
            continue
        if kind == "building":
            paint_building(after, after_mask, box, rng)
        else:
            _paint_paving(after, after_mask, *box, rng)
        change[y0 : y0 + h, x0 : x0 + w] = True
        misses = 0
    else:
        raise GenerationError(
            f"could not reach change fraction {target_fraction} on a {size}x{size} scene"
        )

    painted = rng.normal(0, 4, after.shape)
    after = np.where(change[..., None], np.clip(np.rint(after + painted), 0, 255), after).astype(np.uint8)
    if jitter:
        after = _jitter_foliage(after, ~change & (before_mask == BACKGROUND), rng)
    return ChangePair(before.copy(), after, change, after_mask, before_mask.copy())


def add_gaussian_noise(image: np.ndarray, variance: float, seed: int) -> np.ndarray:
    """Add zero-mean Gaussian noise (variance in squared 8-bit units), round and clamp."""
    if variance < 0:
        raise ConfigError(f"noise variance must be non-negative, got {variance}")
    if variance == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    noisy = image.astype(np.float64) + rng.normal(0.0, np.sqrt(variance), image.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------- normalisation


def compute_stats(images: Iterable[np.ndarray]) -> NormalizationStats:
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for img in images:
        px = img.reshape(-1, 3).astype(np.float64)
        total += px.sum(axis=0)
        total_sq += (px * px).sum(axis=0)
        count += px.shape[0]
    if count == 0:
        raise ConfigError("cannot compute normalisation statistics of an empty dataset")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 0))
    return NormalizationStats(mean, std)


def normalize(image: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Map raw (H, W, 3) or (B, H, W, 3) pixels to a float32 (B, 3, H, W) tensor.

    The affine map sends the dataset mean to 0.5 and one std above it to 1.0.
    """
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[-1] != 3:
        raise DimensionError(f"expected (H, W, 3) or (B, H, W, 3) pixels, got {np.shape(image)}")
    x = 0.5 + 0.5 * (img.astype(np.float64) - stats.mean) / stats.std
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float32)


def denormalize(tensor: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of ``normalize``; returns (B, H, W, 3) uint8."""
    x = np.asarray(tensor, dtype=np.float64).transpose(0, 2, 3, 1)
    raw = (x - 0.5) / 0.5 * stats.std + stats.mean
    return np.clip(np.rint(raw), 0, 255).astype(np.uint8)


def tile(image: np.ndarray, tile_size: int, stride: int | None = None) -> list[np.ndarray]:
    """Cut square tiles in row-major order; partial edge tiles are dropped."""
    stride = stride or tile_size
    if tile_size < 1 or stride < 1:
        raise ConfigError("tile size and stride must be positive")
    h, w = image.shape[:2]
    return [
        image[y : y + tile_size, x : x + tile_size].copy()
        for y in range(0, h - tile_size + 1, stride)
        for x in range(0, w - tile_size + 1, stride)
    ]


# --------------------------------------------------------------------------- files


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: not a PNG file ({im.format})")
        if im.mode != "RGB":
            kind = {"L": "grayscale", "LA": "grayscale+alpha", "RGBA": "RGB+alpha", "P": "palette", "1": "bilevel"}
            raise FormatError(
                f"{path}: expected 8-bit RGB, got color type {im.mode!r} ({kind.get(im.mode, 'unsupported')})"
            )
        return np.asarray(im, dtype=np.uint8).copy()


def save_png(image: np.ndarray, path) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"save_png expects (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    return CLASS_COLORS[np.asarray(mask, dtype=np.intp)]


def rgb_to_mask(rgb: np.ndarray) -> np.ndarray:
    mask = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    for cls, color in enumerate(CLASS_COLORS):
        mask[np.all(rgb == color, axis=-1)] = cls
    if (mask == 255).any():
        bad = rgb[mask == 255][0]
        raise FormatError(f"mask contains a colour that is not a class colour: {tuple(int(v) for v in bad)}")
    return mask


def bool_to_rgb(mask: np.ndarray) -> np.ndarray:
    return np.repeat((np.asarray(mask, bool) * 255).astype(np.uint8)[..., None], 3, axis=2)


def rgb_to_bool(rgb: np.ndarray) -> np.ndarray:
    return rgb.max(axis=-1) > 127


# Manifests are tab-separated text. The first line is "#" followed by the
# tab-separated column names; paths are relative to the manifest's directory.


def write_manifest(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["#" + "\t".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise FormatError(f"manifest row {row!r} does not match columns {columns}")
        lines.append("\t".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[dict[str, str]]:
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}: missing '#'-prefixed column header")
    columns = lines[0][1:].split("\t")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        values = ln.split("\t")
        if len(values) != len(columns):
            raise FormatError(f"{path}:{i}: expected {len(columns)} fields, got {len(values)}")
        rows.append(dict(zip(columns, values)))
    return rows


def load_labeled_dataset(manifest) -> list[LabeledImage]:
    """Load the (image, mask) records of a scene manifest."""
    manifest = Path(manifest)
    out = []
    for row in read_manifest(manifest):
        image = load_png(manifest.parent / row["image"])
        mask = rgb_to_mask(load_png(manifest.parent / row["mask"]))
        out.append(LabeledImage(image, mask))
    return out
