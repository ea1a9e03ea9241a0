"""Adam training loop and finite-difference gradient verification."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from .checkpoint import save_checkpoint
from .errors import ConfigError, DimensionError
from .metrics import argmax_map, pcc2
from .unet import UNetConfig, UNetModel, forward_train, init_model, layer_table, loss_only, segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch size and epochs must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    step_size = config.learning_rate / (1 - b1**t)
    bc2 = 1 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= p.dtype.type(b1)
        m += p.dtype.type(1 - b1) * g
        v *= p.dtype.type(b2)
        v += p.dtype.type(1 - b2) * (g * g)
        p -= (p.dtype.type(step_size) * m / (np.sqrt(v / p.dtype.type(bc2)) + p.dtype.type(config.eps))).astype(p.dtype)


@dataclass
class Dataset:
    """Normalised images (N, 3, H, W) float32 and class masks (N, H, W)."""

    images: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise DimensionError(f"{len(self.images)} images but {len(self.masks)} masks")

    def __len__(self):
        return len(self.images)


def predict_classes(model: UNetModel, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = [argmax_map(segment(model, images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def evaluate(model: UNetModel, data: Dataset, batch_size: int = 8) -> dict[str, float]:
    """Holdout PCC2 over all pixels, total and per class."""
    score, conf = pcc2(predict_classes(model, data.images, batch_size), data.masks)
    out = {"pcc2": score}
    for cls in range(model.config.num_classes):
        out[f"pcc2_class{cls}"] = conf.class_accuracy(cls)
    return out


@dataclass
class TrainResult:
    model: UNetModel
    best: UNetModel
    best_epoch: int
    history: dict[str, list[float]]


def train(
    model: UNetModel,
    data: Dataset,
    config: TrainConfig,
    holdout: Dataset | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Shuffled mini-batch Adam on the mean log loss.

    Holdout accuracy is measured after every epoch; the best-holdout model is
    kept (and written as ``best.uncd`` next to ``final.uncd`` when a directory
    is given). The last partial batch of an epoch is kept.
    """
    if len(data) == 0:
        raise ConfigError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history: dict[str, list[float]] = {"epoch": [], "train_loss": []}
    best, best_epoch, best_score = model.copy(), 0, -1.0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            loss, grads, _ = forward_train(model, data.images[idx], data.masks[idx])
            adam_step(model.params, grads, state, config)
            losses.append(loss)
            weights.append(len(idx))
        epoch_loss = float(np.average(losses, weights=weights))
        history["epoch"].append(float(epoch))
        history["train_loss"].append(epoch_loss)
        msg = f"epoch {epoch:3d}  loss {epoch_loss:.4f}"
        if holdout is not None and len(holdout):
            scores = evaluate(model, holdout)
            for key, val in scores.items():
                history.setdefault(f"holdout_{key}", []).append(val)
            msg += f"  holdout pcc2 {scores['pcc2']:.4f}"
            if scores["pcc2"] > best_score:
                best, best_epoch, best_score = model.copy(), epoch, scores["pcc2"]
        else:
            best, best_epoch = model.copy(), epoch
        log.info(msg)
        model.history = {k: list(v) for k, v in history.items()}
    best.history = {k: list(v) for k, v in history.items()}
    best.history["best_epoch"] = [float(best_epoch)]
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        save_checkpoint(model, checkpoint_dir / "final.uncd")
        save_checkpoint(best, checkpoint_dir / "best.uncd")
    return TrainResult(model, best, best_epoch, history)


# --------------------------------------------------------------------------- gradient checks


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f, x: np.ndarray, index, h: float = 1e-3) -> float:
    """Central difference of scalar ``f()`` with respect to ``x[index]`` (perturbed in place)."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def _layer_type(name: str, kinds: dict[str, str]) -> str:
    layer, _, leaf = name.rpartition(".")
    if layer.endswith(".bn"):
        return f"batchnorm.{leaf}"
    kind = {"block": "conv", "up": "deconv", "head": "head"}[kinds[layer]]
    return f"{kind}.{leaf}"


@dataclass
class GradCheckReport:
    tolerance: float
    # layer type -> (max relative error, parameter where it occurred, samples)
    per_type: dict[str, tuple[float, str, int]]
    # samples rejected because the +-h interval crossed a ReLU kink or pool switch
    rejected: int = 0

    @property
    def max_error(self) -> float:
        return max(e for e, _, _ in self.per_type.values())

    @property
    def worst(self) -> tuple[str, str]:
        kind = max(self.per_type, key=lambda k: self.per_type[k][0])
        return kind, self.per_type[kind][1]

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def as_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_relative_error": self.max_error,
            "worst_layer_type": self.worst[0],
            "worst_parameter": self.worst[1],
            "rejected_kink_samples": self.rejected,
            "per_type": {
                k: {"max_relative_error": e, "parameter": p, "samples": s}
                for k, (e, p, s) in sorted(self.per_type.items())
            },
        }


def grad_check(
    config: UNetConfig | None = None,
    tolerance: float = 1e-2,
    samples: int = 20,
    seed: int = 0,
    batch: int = 4,
    h: float = 1e-5,
    zero_input: bool = False,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients of the full model's loss.

    Runs in float64 on a tiny model (base 4, 32x32 by default), sampling
    ``samples`` parameter entries per layer type. A sample whose +-h interval
    changes any activation sign or pooling argmax straddles a kink of the
    piecewise-smooth loss and is redrawn.
    """
    config = config or UNetConfig(input_size=32, base_channels=4)
    rng = np.random.default_rng(seed)
    model = init_model(config, seed).astype(np.float64)
    # non-trivial BN affine parameters and biases so every path carries signal
    for name, p in model.params.items():
        if not name.endswith(".weight"):
            p += rng.uniform(-0.3, 0.3, p.shape)
    shape = (batch, config.input_channels, config.input_size, config.input_size)
    x = np.zeros(shape) if zero_input else rng.uniform(-1, 1, shape)
    targets = rng.integers(0, config.num_classes, (batch, config.input_size, config.input_size))
    _, grads, _ = forward_train(model, x, targets)
    _, base_pattern = loss_only(model, x, targets, pattern=True)

    kinds = {name: kind for name, kind, _ in layer_table(config)}
    by_type: dict[str, list[str]] = {}
    for name in model.params:
        by_type.setdefault(_layer_type(name, kinds), []).append(name)

    per_type = {}
    rejected = 0
    for kind, names in sorted(by_type.items()):
        worst, where, taken = -1.0, names[0], 0
        for _ in range(samples * 20):
            if taken == samples:
                break
            name = names[int(rng.integers(len(names)))]
            p = model.params[name]
            index = tuple(int(rng.integers(d)) for d in p.shape)
            old = p[index]
            p[index] = old + h
            up, pat_up = loss_only(model, x, targets, pattern=True)
            p[index] = old - h
            down, pat_down = loss_only(model, x, targets, pattern=True)
            p[index] = old
            if pat_up != base_pattern or pat_down != base_pattern:
                rejected += 1
                continue
            taken += 1
            analytic = grads[name][index]
            err = float(relative_error(analytic, (up - down) / (2 * h))) if np.isfinite(analytic) else float("inf")
            if err > worst:
                worst, where = err, f"{name}{list(index)}"
        if taken == 0:
            worst, where = float("inf"), f"{kind}: every sample crossed a kink"
        per_type[kind] = (worst, where, taken)
    return GradCheckReport(tolerance, per_type, rejected)
