import logging
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uncd import changedet as cd
from uncd.checkpoint import load_checkpoint, save_checkpoint
from uncd.errors import ConfigError, DimensionError
from uncd.synthdata import CLASS_COLORS
from uncd.unet import UNetConfig, init_model


def di_oracle(f, fp, theta):
    """Scalar loop over every element, in the tensors' own precision."""
    out = np.empty_like(fp)
    t = f.dtype.type(theta)
    for idx in np.ndindex(f.shape):
        if abs(f[idx] - fp[idx]) <= t:
            out[idx] = 0
        else:
            out[idx] = fp[idx]
    return out


@pytest.fixture(scope="module")
def model():
    m = init_model(UNetConfig(input_size=32, base_channels=4), seed=2)
    # give batch norm some non-trivial running statistics
    rng = np.random.default_rng(0)
    for k, v in m.buffers.items():
        v[...] = rng.uniform(0.5, 1.5, v.shape) if k.endswith("var") else rng.normal(0, 0.1, v.shape)
    return m


def test_hand_traced_examples():
    f = np.array([1.0, 1.0], np.float32)
    fp = np.array([1.3, 1.5], np.float32)
    np.testing.assert_array_equal(cd.difference_image(f, fp, 0.4).tensor, [0.0, 1.5])


def test_boundary_is_inclusive():
    f = np.array([1.0, 1.0, 1.0], np.float32)
    fp = np.array([1.5, 0.5, 1.5000001], np.float32)
    np.testing.assert_array_equal(cd.difference_image(f, fp, 0.5).tensor, np.array([0, 0, fp[2]], np.float32))


@given(seed=st.integers(0, 2**32 - 1), theta=st.sampled_from([0.0, 0.25, 0.4, 0.5, 1.0, 1.2]))
def test_matches_scalar_loop_bitwise(seed, theta):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 5, 2)) + tuple(int(v) for v in rng.integers(1, 9, 2))
    f = rng.normal(0, 1, shape).astype(np.float32)
    fp = rng.normal(0, 1, shape).astype(np.float32)
    # plant exact boundary cases: quarter steps are exact in float32
    steps = rng.random(shape) < 0.3
    fp = np.where(steps, f + np.float32(theta) * rng.choice([-1, 1], shape).astype(np.float32), fp)
    fp = np.where(steps, np.round(fp * 4) / 4, fp).astype(np.float32)
    f = np.where(steps, fp - np.float32(theta), f).astype(np.float32)
    got = cd.difference_image(f, fp, theta).tensor
    want = di_oracle(f, fp, theta)
    assert got.dtype == np.float32
    assert got.tobytes() == want.tobytes()


@given(seed=st.integers(0, 2**16), theta=st.floats(0, 10))
def test_identical_inputs_give_zero(seed, theta):
    f = np.random.default_rng(seed).normal(size=(2, 3, 4, 4)).astype(np.float32)
    assert not cd.difference_image(f, f.copy(), theta).tensor.any()


@given(seed=st.integers(0, 2**16))
def test_sparsity_monotone_and_support(seed):
    rng = np.random.default_rng(seed)
    f, fp = rng.normal(size=(2, 3, 6, 6)).astype(np.float32), rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    counts = []
    for theta in (0.0, 0.1, 0.4, 0.8, 1.6, 3.2):
        di = cd.difference_image(f, fp, theta).tensor
        nz = di != 0
        assert (np.abs(f - fp)[nz] > np.float32(theta)).all()
        assert (di[nz] == fp[nz]).all()
        counts.append(int(nz.sum()))
    assert counts == sorted(counts, reverse=True)


def test_di_errors():
    with pytest.raises(DimensionError):
        cd.difference_image(np.zeros((1, 2)), np.zeros((2, 1)), 0.1)
    with pytest.raises(ConfigError):
        cd.difference_image(np.zeros(2), np.zeros(2), -0.1)


def test_schedule_defaults():
    s = cd.ThresholdSchedule()
    assert s.thresholds == (0.4, 0.6, 0.8, 1.0, 1.2)
    assert s.nondecreasing
    steps = np.diff(s.thresholds)
    np.testing.assert_allclose(steps, 0.2)
    with pytest.raises(ConfigError):
        cd.ThresholdSchedule((0.1, float("nan"), 0, 0, 0))
    with pytest.raises(ConfigError):
        cd.ThresholdSchedule((0.1, -1, 0, 0, 0))


def test_null_response_cached_and_normalised(model):
    a, b = cd.null_response(model), cd.null_response(model)
    assert a is b
    assert np.abs(a.probs.sum(axis=1) - 1).max() <= 1e-5
    assert a.probs.shape == (1, 3, 32, 32)


def test_null_response_thread_safe():
    m = init_model(UNetConfig(input_size=32, base_channels=4), seed=9)
    results = []
    threads = [threading.Thread(target=lambda: results.append(cd.null_response(m))) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r is results[0] for r in results)


def test_null_response_survives_round_trip(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.uncd")
    back = load_checkpoint(tmp_path / "m.uncd")
    assert cd.null_response(back).probs.tobytes() == cd.null_response(model).probs.tobytes()


@given(seed=st.integers(0, 2**16), scale=st.sampled_from([0.0, 0.1, 1.0, 5.0]))
def test_identity_collapse(model, seed, scale):
    x = np.random.default_rng(seed).normal(0.5, 0.5, (1, 3, 32, 32)).astype(np.float32)
    sched = cd.ThresholdSchedule(tuple(scale * t for t in cd.DEFAULT_THRESHOLDS))
    res = cd.detect(model, x, x.copy(), sched)
    assert res.changed.mean() <= 0.01
    assert all(d.nonzero_fraction == 0 for d in res.differences)


def test_huge_thresholds_degenerate_to_identity(model, rng):
    x1 = rng.normal(0.5, 0.5, (1, 3, 32, 32)).astype(np.float32)
    x2 = rng.normal(0.5, 0.5, (1, 3, 32, 32)).astype(np.float32)
    res = cd.detect(model, x1, x2, cd.ThresholdSchedule((1e9,) * 5))
    assert not res.changed.any()
    np.testing.assert_array_equal(res.probs, cd.null_response(model).probs)


def test_detect_shapes_and_report(model, rng):
    x1 = rng.normal(0.5, 0.5, (3, 32, 32)).astype(np.float32)
    x2 = x1.copy()
    x2[:, 8:20, 8:20] += 3
    res = cd.detect(model, x1, x2, cd.ThresholdSchedule((0.0,) * 5), epsilon_change=1e-3)
    assert res.changed.shape == res.classes.shape == (32, 32)
    assert res.rendered.shape == (32, 32, 3) and res.rendered.dtype == np.uint8
    assert res.changed.any()
    rep = res.report()
    assert rep["pixels"] == 1024
    assert rep["changed_pixels"] == int(res.changed.sum())
    assert sum(rep["changed_by_class"].values()) == rep["changed_pixels"]
    assert set(rep["di_nonzero_fraction"]) == {f"level{i}" for i in range(1, 6)}


def test_detect_shape_errors(model):
    with pytest.raises(DimensionError):
        cd.detect(model, np.zeros((1, 3, 64, 64)), np.zeros((1, 3, 64, 64)))
    with pytest.raises(ConfigError):
        cd.detect(model, np.zeros((1, 3, 32, 32)), np.zeros((1, 3, 32, 32)), cd.ThresholdSchedule((0.1,) * 4))


def test_unnormalised_input_warns(model, caplog):
    x = np.full((1, 3, 32, 32), 200.0, np.float32)
    with caplog.at_level(logging.WARNING, logger="uncd.changedet"):
        cd.detect(model, x, x)
    assert "normalised" in caplog.text


def test_detect_concurrent_matches_serial(model, rng):
    pairs = [(rng.normal(0.5, 0.5, (1, 3, 32, 32)).astype(np.float32), rng.normal(0.5, 0.5, (1, 3, 32, 32)).astype(np.float32)) for _ in range(4)]
    serial = [cd.detect(model, a, b).probs for a, b in pairs]
    out = [None] * 4

    def work(i):
        out[i] = cd.detect(model, *pairs[i]).probs

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for s, p in zip(serial, out):
        np.testing.assert_allclose(s, p, rtol=1e-5, atol=1e-7)


def test_render_counts(rng):
    changed = rng.random((16, 16)) > 0.7
    classes = rng.integers(0, 3, (16, 16))
    img = cd.render_change(changed, classes)
    assert int(img.any(axis=-1).sum()) == int(changed.sum())
    np.testing.assert_array_equal(img[changed], CLASS_COLORS[classes[changed]])
    assert not cd.render_change(np.zeros((4, 4), bool), classes[:4, :4]).any()
    mono = cd.render_change(np.ones((4, 4), bool), np.full((4, 4), 1))
    assert (mono == [0, 255, 0]).all()
