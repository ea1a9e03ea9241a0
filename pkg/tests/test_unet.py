import math

import numpy as np
import pytest

from uncd import kernels as K
from uncd.errors import ConfigError, DimensionError
from uncd.trainer import AdamState, TrainConfig, adam_step
from uncd.unet import (
    UNetConfig,
    decoder_forward,
    encoder_forward,
    forward_train,
    init_model,
    layer_table,
    loss_only,
    parameter_shapes,
    segment,
    shape_trace,
)

SMALL = UNetConfig(input_size=32, base_channels=4)


@pytest.fixture(scope="module")
def small_model():
    return init_model(SMALL, seed=3)


def test_channel_widths():
    cfg = UNetConfig()
    assert [cfg.channels(lv) for lv in range(1, 6)] == [64, 128, 256, 512, 1024]


def test_extents():
    assert UNetConfig().extents() == [320, 159, 79, 39, 19]
    assert UNetConfig(input_size=64).extents() == [64, 31, 15, 7, 3]


@pytest.mark.parametrize("size", [0, 7, 16, 30])
def test_config_rejects_bad_sizes(size):
    with pytest.raises(ConfigError):
        UNetConfig(input_size=size)


def test_paper_scale_parameter_shapes():
    shapes = parameter_shapes(UNetConfig())
    assert shapes["enc5.conv2.weight"] == (1024, 1024, 3, 3)
    assert shapes["dec4.up.weight"] == (1024, 512, 3, 3)
    assert shapes["dec1.conv1.weight"] == (64, 128, 3, 3)
    assert shapes["head.weight"] == (3, 64, 3, 3)
    assert "head.bn.scale" not in shapes


def test_layer_table_order():
    names = [n for n, _, _ in layer_table(SMALL)]
    assert names[:2] == ["enc1.conv1", "enc1.conv2"]
    assert names[10:13] == ["dec4.up", "dec4.conv1", "dec4.conv2"]
    assert names[-1] == "head"
    assert len(names) == 10 + 12 + 1


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_model(SMALL, 1), init_model(SMALL, 1), init_model(SMALL, 2)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert not np.array_equal(a.params["enc1.conv1.weight"], c.params["enc1.conv1.weight"])
    assert not a.params["enc1.conv1.bias"].any()
    assert (a.params["enc1.conv1.bn.scale"] == 1).all()


def test_desk_scale_trace():
    trace = dict(shape_trace(init_model(UNetConfig(input_size=64, base_channels=16), 0)))
    assert [trace[f"enc{lv}.conv2"][-1] for lv in range(1, 6)] == [64, 31, 15, 7, 3]
    assert trace["dec1.up"][-1] == 63 and trace["dec1.align"][-1] == 64
    assert trace["head"] == (1, 3, 64, 64)


def test_every_concat_joins_equal_extents(small_model):
    trace = dict(shape_trace(small_model))
    for lv in range(1, 5):
        assert trace[f"dec{lv}.align"][2:] == trace[f"enc{lv}.conv2"][2:]
        assert trace[f"dec{lv}.align"][1] == trace[f"enc{lv}.conv2"][1]


def test_taps_shrink_and_double(small_model, rng):
    taps = encoder_forward(small_model, rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
    assert len(taps) == 5
    for a, b in zip(taps.levels, taps.levels[1:]):
        assert b.shape[1] == 2 * a.shape[1] and b.shape[2] < a.shape[2]


def test_encoder_rejects_wrong_shape(small_model):
    with pytest.raises(DimensionError):
        encoder_forward(small_model, np.zeros((1, 3, 30, 30), np.float32))


def test_decoder_rejects_channel_mismatch(small_model, rng):
    taps = encoder_forward(small_model, rng.normal(size=(1, 3, 32, 32)).astype(np.float32))
    skips = list(taps.skips)
    skips[1] = skips[1][:, :3]
    with pytest.raises(DimensionError, match="channel axis"):
        decoder_forward(small_model, skips, taps.bridge)


def test_decoder_on_taps_is_segment(small_model, rng):
    x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
    taps = encoder_forward(small_model, x)
    np.testing.assert_array_equal(decoder_forward(small_model, taps.skips, taps.bridge), segment(small_model, x))


def test_outputs_normalised(small_model, rng):
    p = segment(small_model, rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
    assert p.shape == (2, 3, 32, 32)
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-5


def test_null_input_gives_constant_field(small_model):
    cfg = small_model.config
    zeros = [np.zeros((1, cfg.channels(lv), n, n), np.float32) for lv, n in enumerate(cfg.extents(), 1)]
    a = decoder_forward(small_model, zeros[:-1], zeros[-1])
    b = decoder_forward(small_model, zeros[:-1], zeros[-1])
    np.testing.assert_array_equal(a, b)
    assert np.abs(a.sum(axis=1) - 1).max() <= 1e-5


def test_segment_independent_of_batch_packing(small_model, rng):
    x = rng.normal(size=(3, 3, 32, 32)).astype(np.float32)
    batched = segment(small_model, x)
    single = np.concatenate([segment(small_model, x[i : i + 1]) for i in range(3)])
    np.testing.assert_allclose(batched, single, atol=1e-5)


def test_identical_images_identical_taps(small_model, rng):
    x = rng.normal(size=(1, 3, 32, 32)).astype(np.float32)
    for a, b in zip(encoder_forward(small_model, x).levels, encoder_forward(small_model, x.copy()).levels):
        np.testing.assert_array_equal(a, b)


def test_initial_loss_near_ln3(rng):
    model = init_model(SMALL, 0)
    x = rng.normal(0.5, 0.5, (4, 3, 32, 32)).astype(np.float32)
    t = rng.integers(0, 3, (4, 32, 32))
    loss, grads, _ = forward_train(model, x, t)
    assert abs(loss - math.log(3)) <= 0.2
    assert set(grads) == set(model.params)
    for name, g in grads.items():
        assert g.shape == model.params[name].shape and np.isfinite(g).all()


def test_zero_lr_step_leaves_parameters(rng):
    model = init_model(SMALL, 0)
    before = {k: v.copy() for k, v in model.params.items()}
    _, grads, _ = forward_train(model, rng.normal(size=(2, 3, 32, 32)).astype(np.float32), rng.integers(0, 3, (2, 32, 32)))
    adam_step(model.params, grads, AdamState(), TrainConfig(learning_rate=0.0))
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_forward_train_updates_running_stats_only_in_train_mode(rng):
    model = init_model(SMALL, 0)
    x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
    t = rng.integers(0, 3, (2, 32, 32))
    segment(model, x)
    assert (model.buffers["enc1.conv1.bn.running_mean"] == 0).all()
    loss_only(model, x, t)
    assert (model.buffers["enc1.conv1.bn.running_mean"] == 0).all()
    forward_train(model, x, t)
    assert (model.buffers["enc1.conv1.bn.running_mean"] != 0).any()


def test_model_spot_gradient_check(rng):
    # a handful of entries of the full model against central differences
    model = init_model(SMALL, 5).astype(np.float64)
    x = rng.uniform(-1, 1, (2, 3, 32, 32))
    t = rng.integers(0, 3, (2, 32, 32))
    _, grads, _ = forward_train(model, x, t)
    _, base = loss_only(model, x, t, pattern=True)
    h, checked = 1e-5, 0
    for _ in range(200):
        if checked == 20:
            break
        name = sorted(model.params)[int(rng.integers(len(model.params)))]
        p = model.params[name]
        idx = tuple(int(rng.integers(d)) for d in p.shape)
        old = p[idx]
        p[idx] = old + h
        up, pu = loss_only(model, x, t, pattern=True)
        p[idx] = old - h
        down, pd = loss_only(model, x, t, pattern=True)
        p[idx] = old
        if pu != base or pd != base:
            continue
        num, ana = (up - down) / (2 * h), grads[name][idx]
        assert abs(num - ana) / max(abs(num), abs(ana), 1e-5) <= 1e-2, name
        checked += 1
    assert checked == 20
