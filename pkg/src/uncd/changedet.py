"""Unsupervised change detection from encoder feature-map differences.

Both images go through the encoder. At every level the two taps are compared
elementwise and a difference image keeps the later image's activation only
where the two differ by more than that level's threshold. The decoder then
runs on the difference images in place of the later image's skips and bridge,
so unchanged regions see all-zero input. A pixel counts as changed when the
decoder output there moves away from the all-zero ("null") response.
"""
from __future__ import annotations

import hashlib
import logging
import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .metrics import argmax_map
from .synthdata import CLASS_COLORS, CLASS_NAMES
from .unet import UNetModel, decoder_forward, encoder_forward

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.4, 0.6, 0.8, 1.0, 1.2)
DEFAULT_EPSILON_CHANGE = 0.1
# normalised inputs sit around 0.5 with std 0.5; anything this far out is suspect
_PLAUSIBLE_RANGE = (-20.0, 21.0)


@dataclass(frozen=True)
class ThresholdSchedule:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        values = tuple(float(t) for t in self.thresholds)
        if not all(math.isfinite(t) and t >= 0 for t in values):
            raise ConfigError(f"thresholds must be finite and non-negative, got {values}")
        object.__setattr__(self, "thresholds", values)

    def __len__(self):
        return len(self.thresholds)

    def __getitem__(self, level: int) -> float:
        return self.thresholds[level]

    @property
    def nondecreasing(self) -> bool:
        return all(a <= b for a, b in zip(self.thresholds, self.thresholds[1:]))


@dataclass
class DifferenceImage:
    level: int  # 1-based
    tensor: np.ndarray

    @property
    def nonzero_fraction(self) -> float:
        return float(np.count_nonzero(self.tensor)) / self.tensor.size


def difference_image(f: np.ndarray, f_prime: np.ndarray, theta: float, level: int = 1) -> DifferenceImage:
    """Zero where |f - f'| <= theta, else f'. Comparison is done in the tensors' dtype."""
    f = np.asarray(f)
    f_prime = np.asarray(f_prime)
    if f.shape != f_prime.shape:
        raise DimensionError(f"feature maps differ in shape: {f.shape} vs {f_prime.shape}")
    if not theta >= 0:
        raise ConfigError(f"threshold must be non-negative, got {theta}")
    dt = np.result_type(f, f_prime)
    keep = np.abs(f - f_prime) > dt.type(theta)
    return DifferenceImage(level, np.where(keep, f_prime, dt.type(0)))


@dataclass
class NullResponse:
    probs: np.ndarray  # (1, C, H, W)


_null_lock = threading.Lock()
_null_cache: dict[str, NullResponse] = {}


def model_fingerprint(model: UNetModel) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr(model.config).encode())
    for store in (model.params, model.buffers):
        for name in sorted(store):
            h.update(name.encode())
            h.update(np.ascontiguousarray(store[name]).tobytes())
    return h.hexdigest()


def null_response(model: UNetModel) -> NullResponse:
    """Eval-mode decoder output for all-zero skips and bridge (cached per model state)."""
    key = model_fingerprint(model)
    with _null_lock:
        cached = _null_cache.get(key)
        if cached is not None:
            return cached
        cfg = model.config
        dtype = model.params["head.weight"].dtype
        extents = cfg.extents()
        zeros = [np.zeros((1, cfg.channels(lv), n, n), dtype) for lv, n in enumerate(extents, start=1)]
        resp = NullResponse(decoder_forward(model, zeros[:-1], zeros[-1], "eval"))
        _null_cache[key] = resp
        return resp


@dataclass
class ChangeResult:
    changed: np.ndarray  # (H, W) bool
    classes: np.ndarray  # (H, W) class index
    probs: np.ndarray  # (1, C, H, W) decoder output on the difference images
    distance: np.ndarray  # (H, W) L1 distance from the null response
    differences: list[DifferenceImage]
    rendered: np.ndarray  # (H, W, 3) uint8

    def report(self) -> dict:
        counts = {
            CLASS_NAMES[c]: int(np.count_nonzero(self.changed & (self.classes == c)))
            for c in range(len(CLASS_NAMES))
        }
        return {
            "pixels": int(self.changed.size),
            "changed_pixels": int(np.count_nonzero(self.changed)),
            "changed_fraction": float(self.changed.mean()),
            "changed_by_class": counts,
            "di_nonzero_fraction": {f"level{d.level}": d.nonzero_fraction for d in self.differences},
        }


def render_change(changed: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Black where unchanged, class colour where changed."""
    changed = np.asarray(changed, dtype=bool)
    out = np.zeros(changed.shape + (3,), dtype=np.uint8)
    out[changed] = CLASS_COLORS[np.asarray(classes)[changed]]
    return out


def _as_single(image: np.ndarray, model: UNetModel, what: str) -> np.ndarray:
    image = np.asarray(image, dtype=model.params["head.weight"].dtype)
    if image.ndim == 3:
        image = image[None]
    cfg = model.config
    expected = (1, cfg.input_channels, cfg.input_size, cfg.input_size)
    if image.shape != expected:
        raise DimensionError(f"{what}: expected shape {expected} for this model, got {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    if lo < _PLAUSIBLE_RANGE[0] or hi > _PLAUSIBLE_RANGE[1]:
        log.warning("%s spans [%.1f, %.1f]; was it normalised with the model's statistics?", what, lo, hi)
    return image


def detect(
    model: UNetModel,
    image1: np.ndarray,
    image2: np.ndarray,
    schedule: ThresholdSchedule | None = None,
    epsilon_change: float = DEFAULT_EPSILON_CHANGE,
) -> ChangeResult:
    """Detect change from ``image1`` (earlier) to ``image2`` (later).

    Both images must be normalised tensors of shape (1, 3, S, S) or (3, S, S).
    """
    schedule = schedule or ThresholdSchedule()
    if len(schedule) != model.config.levels:
        raise ConfigError(f"need {model.config.levels} thresholds, got {len(schedule)}")
    x1 = _as_single(image1, model, "image1")
    x2 = _as_single(image2, model, "image2")
    taps1 = encoder_forward(model, x1, "eval")
    taps2 = encoder_forward(model, x2, "eval")
    diffs = [
        difference_image(f, fp, schedule[i], level=i + 1)
        for i, (f, fp) in enumerate(zip(taps1.levels, taps2.levels))
    ]
    probs = decoder_forward(model, [d.tensor for d in diffs[:-1]], diffs[-1].tensor, "eval")
    null = null_response(model).probs
    distance = np.abs(probs - null).sum(axis=1)[0]
    changed = distance > epsilon_change
    classes = argmax_map(probs)[0]
    return ChangeResult(changed, classes, probs, distance, diffs, render_change(changed, classes))
