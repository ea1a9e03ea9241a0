"""U-net with a five-level encoder and four-level decoder, built on ``kernels``.

Every hidden convolution is 3x3/stride 1/padding 1 and every deconvolution
3x3/stride 2/padding 0, each followed by batch norm and leaky ReLU. The
encoder pools with 3x3/stride 2 windows. Skip tensors ("taps") are the second
block output of each level, before pooling; the deepest tap is the bridge.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels as K
from .errors import ConfigError, DimensionError
from .synthdata import NormalizationStats

POOL_K, POOL_S = 3, 2
HEAD_INIT_SCALE = 0.1


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 320
    input_channels: int = 3
    num_classes: int = 3
    base_channels: int = 64
    levels: int = 5
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"need at least two levels, got {self.levels}")
        if self.base_channels < 1 or self.input_channels < 1 or self.num_classes < 2:
            raise ConfigError(f"invalid channel configuration {self}")
        if self.input_size < 1 or self.input_size % 2:
            raise ConfigError(f"input size must be a positive even integer, got {self.input_size}")
        n = self.input_size
        for _ in range(self.levels - 1):
            if n < POOL_K:
                break
            n = (n - POOL_K) // POOL_S + 1
        else:
            return
        raise ConfigError(
            f"input size {self.input_size} does not survive {self.levels - 1} pooling steps"
        )

    def channels(self, level: int) -> int:
        """Width of encoder level ``level`` (1-based); doubles per level."""
        return self.base_channels * 2 ** (level - 1)

    def extents(self) -> list[int]:
        """Spatial extent of each encoder level."""
        out = [self.input_size]
        for _ in range(self.levels - 1):
            out.append((out[-1] - POOL_K) // POOL_S + 1)
        return out


def _conv_spec(cin, cout):
    return K.ConvSpec(cin, cout, kernel_size=3, stride=1, padding=1)


def _deconv_spec(cin, cout):
    return K.ConvSpec(cin, cout, kernel_size=3, stride=2, padding=0)


def layer_table(config: UNetConfig) -> list[tuple[str, str, K.ConvSpec]]:
    """(name, kind, spec) for every convolutional layer in forward order.

    kind is "block" (conv+BN+act), "up" (deconv+BN+act) or "head" (plain conv).
    """
    c = config.channels
    table = []
    cin = config.input_channels
    for lv in range(1, config.levels + 1):
        table.append((f"enc{lv}.conv1", "block", _conv_spec(cin, c(lv))))
        table.append((f"enc{lv}.conv2", "block", _conv_spec(c(lv), c(lv))))
        cin = c(lv)
    for lv in range(config.levels - 1, 0, -1):
        table.append((f"dec{lv}.up", "up", _deconv_spec(c(lv + 1), c(lv))))
        table.append((f"dec{lv}.conv1", "block", _conv_spec(2 * c(lv), c(lv))))
        table.append((f"dec{lv}.conv2", "block", _conv_spec(c(lv), c(lv))))
    table.append(("head", "head", _conv_spec(c(1), config.num_classes)))
    return table


def parameter_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, kind, spec in layer_table(config):
        k = spec.kernel_size
        if kind == "up":
            shapes[f"{name}.weight"] = (spec.in_channels, spec.out_channels, k, k)
        else:
            shapes[f"{name}.weight"] = (spec.out_channels, spec.in_channels, k, k)
        shapes[f"{name}.bias"] = (spec.out_channels,)
        if kind != "head":
            shapes[f"{name}.bn.scale"] = (spec.out_channels,)
            shapes[f"{name}.bn.shift"] = (spec.out_channels,)
    return shapes


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, np.ndarray]
    # batch-norm running statistics, keyed "<layer>.bn.running_mean" / ".running_var"
    buffers: dict[str, np.ndarray]
    stats: NormalizationStats | None = None
    history: dict[str, list[float]] = field(default_factory=dict)

    def bn_state(self, layer: str) -> K.BatchNormState:
        return K.BatchNormState(
            self.params[f"{layer}.bn.scale"],
            self.params[f"{layer}.bn.shift"],
            self.buffers[f"{layer}.bn.running_mean"],
            self.buffers[f"{layer}.bn.running_var"],
        )

    def astype(self, dtype) -> "UNetModel":
        """Copy with parameters and buffers cast to ``dtype`` (used by gradient checks)."""
        return UNetModel(
            self.config,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            self.stats,
            {k: list(v) for k, v in self.history.items()},
        )

    def copy(self) -> "UNetModel":
        return self.astype(K.DTYPE)


def init_model(config: UNetConfig, seed: int = 0) -> UNetModel:
    """He-uniform weights for leaky ReLU (fan-in scaled, head shrunk), zero biases, identity BN."""
    rng = np.random.default_rng(seed)
    gain = 2.0 / (1 + config.leaky_slope**2)
    params, buffers = {}, {}
    for name, kind, spec in layer_table(config):
        k = spec.kernel_size
        if kind == "up":
            shape = (spec.in_channels, spec.out_channels, k, k)
            # each output pixel of a stride-2 deconv sees about in*k*k/s^2 inputs
            fan_in = spec.in_channels * k * k / spec.stride**2
        else:
            shape = (spec.out_channels, spec.in_channels, k, k)
            fan_in = spec.in_channels * k * k
        bound = np.sqrt(3 * gain / fan_in)
        if kind == "head":
            # small logits: the untrained model starts near the uniform class distribution
            bound *= HEAD_INIT_SCALE
        params[f"{name}.weight"] = rng.uniform(-bound, bound, shape).astype(K.DTYPE)
        params[f"{name}.bias"] = np.zeros(spec.out_channels, K.DTYPE)
        if kind != "head":
            bn = K.BatchNormState.fresh(spec.out_channels)
            params[f"{name}.bn.scale"] = bn.scale
            params[f"{name}.bn.shift"] = bn.shift
            buffers[f"{name}.bn.running_mean"] = bn.running_mean
            buffers[f"{name}.bn.running_var"] = bn.running_var
    return UNetModel(config, params, buffers)


@dataclass
class EncoderTaps:
    levels: list[np.ndarray]

    @property
    def skips(self) -> list[np.ndarray]:
        return self.levels[:-1]

    @property
    def bridge(self) -> np.ndarray:
        return self.levels[-1]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


# A trace hook receives (layer name, output tensor) after every layer.
TraceHook = Callable[[str, np.ndarray], None]


class _Net:
    """One forward pass; keeps per-layer caches when a backward pass will follow."""

    def __init__(self, model: UNetModel, mode: K.Mode, keep: bool, trace: TraceHook | None = None):
        self.model = model
        self.mode = mode
        self.keep = keep
        self.trace = trace
        self.specs = {name: spec for name, _, spec in layer_table(model.config)}
        self.caches: dict[str, tuple] = {}

    def _emit(self, name, y):
        if self.trace is not None:
            self.trace(name, y)

    def block(self, name: str, x: np.ndarray) -> np.ndarray:
        p, spec = self.model.params, self.specs[name]
        z = K.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], spec)
        zn, bn = K.batchnorm(z, self.model.bn_state(name), self.mode)
        y = K.leaky_relu(zn, self.model.config.leaky_slope)
        if self.keep:
            self.caches[name] = (x, bn, zn)
        self._emit(name, y)
        return y

    def up(self, name: str, x: np.ndarray) -> np.ndarray:
        p, spec = self.model.params, self.specs[name]
        z = K.deconv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], spec)
        zn, bn = K.batchnorm(z, self.model.bn_state(name), self.mode)
        y = K.leaky_relu(zn, self.model.config.leaky_slope)
        if self.keep:
            self.caches[name] = (x, bn, zn)
        self._emit(name, y)
        return y

    def head(self, x: np.ndarray) -> np.ndarray:
        p = self.model.params
        logits = K.conv2d(x, p["head.weight"], p["head.bias"], self.specs["head"])
        if self.keep:
            self.caches["head"] = (x,)
        self._emit("head", logits)
        probs = K.softmax_channels(logits)
        self._emit("softmax", probs)
        return probs

    def block_grad(self, name: str, dy: np.ndarray, grads: dict, deconv: bool = False) -> np.ndarray:
        x, bn, zn = self.caches[name]
        p, spec = self.model.params, self.specs[name]
        dzn = K.leaky_relu_grad(zn, dy, self.model.config.leaky_slope)
        dz, grads[f"{name}.bn.scale"], grads[f"{name}.bn.shift"] = K.batchnorm_grad(bn, dzn)
        grad_fn = K.deconv2d_grad if deconv else K.conv2d_grad
        dx, grads[f"{name}.weight"], grads[f"{name}.bias"] = grad_fn(x, p[f"{name}.weight"], spec, dz)
        return dx

    def head_grad(self, dlogits: np.ndarray, grads: dict) -> np.ndarray:
        (x,) = self.caches["head"]
        dx, grads["head.weight"], grads["head.bias"] = K.conv2d_grad(
            x, self.model.params["head.weight"], self.specs["head"], dlogits
        )
        return dx

    # ----------------------------------------------------------------- passes

    def encode(self, image: np.ndarray) -> EncoderTaps:
        cfg = self.model.config
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise DimensionError(f"encoder input: expected shape (N, {', '.join(map(str, expected))}), got {image.shape}")
        taps = []
        x = image
        for lv in range(1, cfg.levels + 1):
            t = self.block(f"enc{lv}.conv2", self.block(f"enc{lv}.conv1", x))
            taps.append(t)
            if lv < cfg.levels:
                rec = K.maxpool(t, POOL_K, POOL_S)
                if self.keep:
                    self.caches[f"enc{lv}.pool"] = (rec,)
                x = rec.output
                self._emit(f"enc{lv}.pool", x)
        return EncoderTaps(taps)

    def decode(self, skips: list[np.ndarray], bridge: np.ndarray) -> np.ndarray:
        cfg = self.model.config
        if len(skips) != cfg.levels - 1:
            raise DimensionError(f"decoder expects {cfg.levels - 1} skip tensors, got {len(skips)}")
        extents = cfg.extents()
        self._check_tensor("bridge", bridge, cfg.channels(cfg.levels), extents[-1], None)
        h = bridge
        for lv in range(cfg.levels - 1, 0, -1):
            skip = skips[lv - 1]
            self._check_tensor(f"skip {lv}", skip, cfg.channels(lv), extents[lv - 1], h.shape[0])
            u = K.align_spatial(self.up(f"dec{lv}.up", h), skip.shape[2])
            self._emit(f"dec{lv}.align", u)
            c = np.concatenate([skip, u], axis=1)
            h = self.block(f"dec{lv}.conv2", self.block(f"dec{lv}.conv1", c))
        return self.head(h)

    @staticmethod
    def _check_tensor(what, x, channels, extent, batch):
        if x.ndim != 4:
            raise DimensionError(f"{what}: expected rank-4 tensor, got shape {x.shape}")
        if x.shape[1] != channels:
            raise DimensionError(f"{what}: channel axis expected {channels}, got {x.shape[1]}")
        if x.shape[2] != extent or x.shape[3] != extent:
            raise DimensionError(f"{what}: spatial axes expected {extent}x{extent}, got {x.shape[2]}x{x.shape[3]}")
        if batch is not None and x.shape[0] != batch:
            raise DimensionError(f"{what}: batch axis expected {batch}, got {x.shape[0]}")

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        cfg = self.model.config
        grads: dict[str, np.ndarray] = {}
        dh = self.head_grad(dlogits, grads)
        dskips = {}
        for lv in range(1, cfg.levels):
            dc = self.block_grad(f"dec{lv}.conv1", self.block_grad(f"dec{lv}.conv2", dh, grads), grads)
            c_skip = cfg.channels(lv)
            dskips[lv] = dc[:, :c_skip]
            up_extent = self.caches[f"dec{lv}.up"][1].xhat.shape[2]
            du = K.align_spatial_grad(dc[:, c_skip:], up_extent)
            dh = self.block_grad(f"dec{lv}.up", du, grads, deconv=True)
        dt = dh  # gradient flowing into the bridge
        for lv in range(cfg.levels, 0, -1):
            if lv < cfg.levels:
                dt = K.maxpool_grad(self.caches[f"enc{lv}.pool"][0], dt) + dskips[lv]
            dt = self.block_grad(f"enc{lv}.conv1", self.block_grad(f"enc{lv}.conv2", dt, grads), grads)
        return grads


def encoder_forward(model: UNetModel, image: np.ndarray, mode: K.Mode = "eval", trace: TraceHook | None = None) -> EncoderTaps:
    """Run the encoder and return the per-level taps (the last one is the bridge)."""
    return _Net(model, mode, keep=False, trace=trace).encode(image)


def decoder_forward(
    model: UNetModel,
    skips: list[np.ndarray],
    bridge: np.ndarray,
    mode: K.Mode = "eval",
    trace: TraceHook | None = None,
) -> np.ndarray:
    """Decode skip tensors and a bridge tensor into per-pixel class probabilities."""
    return _Net(model, mode, keep=False, trace=trace).decode(list(skips), bridge)


def segment(model: UNetModel, image: np.ndarray, trace: TraceHook | None = None) -> np.ndarray:
    net = _Net(model, "eval", keep=False, trace=trace)
    taps = net.encode(image)
    return net.decode(taps.skips, taps.bridge)


def forward_train(model: UNetModel, batch: np.ndarray, targets: np.ndarray) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Train-mode forward and backward pass.

    Returns the mean log loss, gradients for every parameter, and the
    probabilities. Batch-norm running statistics are updated as a side effect.
    """
    net = _Net(model, "train", keep=True)
    taps = net.encode(batch)
    probs = net.decode(taps.skips, taps.bridge)
    loss, _ = K.cross_entropy_loss(probs, targets)
    grads = net.backward(K.softmax_cross_entropy_grad(probs, targets))
    return loss, grads, probs


def loss_only(model: UNetModel, batch: np.ndarray, targets: np.ndarray, mode: K.Mode = "train", pattern: bool = False):
    """Loss without gradients. In train mode the running statistics are left untouched.

    With ``pattern=True`` also returns a digest of every leaky-ReLU sign and
    max-pool argmax, which identifies the smooth piece of the loss surface the
    parameters sit on.
    """
    if mode == "train":
        saved = {k: v.copy() for k, v in model.buffers.items()}
    net = _Net(model, mode, keep=pattern)
    taps = net.encode(batch)
    loss, _ = K.cross_entropy_loss(net.decode(taps.skips, taps.bridge), targets)
    if mode == "train":
        for k, v in saved.items():
            model.buffers[k][...] = v
    if not pattern:
        return loss
    digest = hashlib.blake2b(digest_size=16)
    for name in sorted(net.caches):
        cache = net.caches[name]
        if name.endswith(".pool"):
            digest.update(cache[0].argmax.tobytes())
        elif len(cache) == 3:
            digest.update(np.packbits(cache[2] > 0).tobytes())
    return loss, digest.hexdigest()


def shape_trace(model: UNetModel, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """Layer-by-layer output shapes of an eval-mode forward on a zero image."""
    cfg = model.config
    out: list[tuple[str, tuple[int, ...]]] = []
    image = np.zeros((batch, cfg.input_channels, cfg.input_size, cfg.input_size), K.DTYPE)
    segment(model, image, trace=lambda name, y: out.append((name, y.shape)))
    return out
