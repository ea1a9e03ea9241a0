import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from uncd import synthdata as sd
from uncd.errors import ConfigError, FormatError


def test_scene_deterministic():
    a, b = sd.generate_scene(11), sd.generate_scene(11)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert not np.array_equal(a.image, sd.generate_scene(12).image)


def test_scene_too_small():
    with pytest.raises(ConfigError):
        sd.generate_scene(0, 31)


def test_all_classes_present_over_100_seeds():
    for seed in range(100):
        scene = sd.generate_scene(seed, 64)
        assert set(np.unique(scene.mask)) == {0, 1, 2}, seed


def test_building_mask_matches_painted_boxes():
    for seed in range(30):
        scene = sd.generate_scene(seed, 64)
        painted = np.zeros(scene.mask.shape, bool)
        roads = np.zeros(scene.mask.shape, bool)
        for kind, y0, x0, y1, x1 in scene.objects:
            (painted if kind == "building" else roads)[y0:y1, x0:x1] = True
        np.testing.assert_array_equal(scene.mask == sd.BUILDING, painted)
        np.testing.assert_array_equal(scene.mask == sd.IMMUTABLE, roads & ~painted)
        n_buildings = sum(1 for o in scene.objects if o[0] == "building")
        assert 2 <= n_buildings <= 16  # 2-8 buildings, each possibly with a wing


@pytest.mark.parametrize("target", [0.05, 0.10, 0.15])
def test_change_fraction_within_one_point(target):
    for seed in range(25):
        pair = sd.simulate_change(sd.generate_scene(seed), target, seed + 500)
        assert abs(pair.changed_fraction - target) <= 0.01


def test_change_zero_target_is_identity():
    scene = sd.generate_scene(3)
    pair = sd.simulate_change(scene, 0.0, 1)
    np.testing.assert_array_equal(pair.before, pair.after)
    assert not pair.change_mask.any()


def test_change_rejects_out_of_range():
    with pytest.raises(ConfigError):
        sd.simulate_change(sd.generate_scene(0), 0.6, 0)


def test_inserted_buildings_are_labelled_and_localised():
    scene = sd.generate_scene(4)
    pair = sd.simulate_change(scene, 0.10, 9)
    assert (pair.after_mask[pair.change_mask] == sd.BUILDING).all()
    np.testing.assert_array_equal(pair.after_mask[~pair.change_mask], scene.mask[~pair.change_mask])
    # outside the mask only vegetation jitter, capped
    diff = np.abs(pair.after.astype(int) - pair.before.astype(int))
    assert diff[~pair.change_mask].max() <= sd.JITTER_CAP
    assert (diff[~pair.change_mask & (scene.mask != sd.BACKGROUND)] == 0).all()


def test_change_without_jitter_edits_only_mask():
    scene = sd.generate_scene(5)
    pair = sd.simulate_change(scene, 0.05, 2, jitter=False)
    np.testing.assert_array_equal(pair.after[~pair.change_mask], scene.image[~pair.change_mask])


def test_change_deterministic():
    scene = sd.generate_scene(6)
    a, b = sd.simulate_change(scene, 0.1, 3), sd.simulate_change(scene, 0.1, 3)
    np.testing.assert_array_equal(a.after, b.after)
    np.testing.assert_array_equal(a.change_mask, b.change_mask)


def test_noise_statistics():
    clean = np.full((1024, 1024, 3), 128, np.uint8)
    noisy = sd.add_gaussian_noise(clean, 40, seed=0)
    d = noisy.astype(float) - clean
    assert abs(d.var() - 40) <= 0.15 * 40
    assert abs(d.mean()) <= 0.1
    np.testing.assert_array_equal(sd.add_gaussian_noise(clean[:4, :4], 0, 0), clean[:4, :4])
    with pytest.raises(ConfigError):
        sd.add_gaussian_noise(clean, -1, 0)


def test_noise_clamps():
    out = sd.add_gaussian_noise(np.array([[[0, 255, 0]]], np.uint8), 400, 1)
    assert out.dtype == np.uint8


def test_normalize_anchor_points():
    stats = sd.NormalizationStats([100, 110, 120], [10, 20, 30])
    x = np.array([[[100, 110, 120], [110, 130, 150]]], np.uint8)
    t = sd.normalize(x, stats)
    assert t.shape == (1, 3, 1, 2)
    np.testing.assert_allclose(t[0, :, 0, 0], 0.5)
    np.testing.assert_allclose(t[0, :, 0, 1], 1.0)


def test_normalized_training_set_moments():
    images = [sd.generate_scene(s).image for s in range(20)]
    stats = sd.compute_stats(images)
    t = sd.normalize(np.stack(images), stats).astype(np.float64)
    np.testing.assert_allclose(t.mean(axis=(0, 2, 3)), 0.5, atol=1e-3)
    np.testing.assert_allclose(t.std(axis=(0, 2, 3)), 0.5, atol=1e-3)


@given(seed=st.integers(0, 2**16))
def test_denormalize_inverts_normalize(seed):
    img = np.random.default_rng(seed).integers(0, 256, (5, 5, 3)).astype(np.uint8)
    stats = sd.NormalizationStats([90, 100, 80], [30, 40, 50])
    back = sd.denormalize(sd.normalize(img, stats), stats)[0]
    assert np.abs(back.astype(int) - img).max() <= 1


def test_stats_reject_zero_std():
    with pytest.raises(ConfigError):
        sd.NormalizationStats([0, 0, 0], [1, 0, 1])


def test_tiles():
    img = np.random.default_rng(0).integers(0, 256, (640, 650, 3)).astype(np.uint8)
    tiles = sd.tile(img, 320)
    assert len(tiles) == 4
    np.testing.assert_array_equal(tiles[3], img[320:640, 320:640])
    assert len(sd.tile(img[:320, :320], 320)) == 1
    assert len(sd.tile(img[:100, :100], 64, 32)) == 4


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (320, 320, 3)).astype(np.uint8)
    sd.save_png(img, tmp_path / "a.png")
    back = sd.load_png(tmp_path / "a.png")
    assert back.shape == (320, 320, 3)
    np.testing.assert_array_equal(back, img)


def test_png_grayscale_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8), mode="L").save(tmp_path / "g.png")
    with pytest.raises(FormatError, match="grayscale"):
        sd.load_png(tmp_path / "g.png")


def test_mask_colour_round_trip():
    mask = sd.generate_scene(2).mask
    rgb = sd.mask_to_rgb(mask)
    assert {tuple(c) for c in rgb.reshape(-1, 3)} <= {(0, 0, 255), (0, 255, 0), (255, 0, 0)}
    np.testing.assert_array_equal(sd.rgb_to_mask(rgb), mask)
    with pytest.raises(FormatError):
        sd.rgb_to_mask(np.zeros((1, 1, 3), np.uint8))
    flags = np.array([[True, False]])
    np.testing.assert_array_equal(sd.rgb_to_bool(sd.bool_to_rgb(flags)), flags)


def test_manifest_round_trip(tmp_path):
    sd.write_manifest(tmp_path / "m.tsv", ["a", "b"], [("x.png", 1), ("y.png", 2)])
    assert sd.read_manifest(tmp_path / "m.tsv") == [{"a": "x.png", "b": "1"}, {"a": "y.png", "b": "2"}]
    (tmp_path / "bad.tsv").write_text("a\tb\n")
    with pytest.raises(FormatError):
        sd.read_manifest(tmp_path / "bad.tsv")


def test_labeled_dataset_loading(tmp_path):
    scene = sd.generate_scene(0)
    sd.save_png(scene.image, tmp_path / "s.png")
    sd.save_png(sd.mask_to_rgb(scene.mask), tmp_path / "m.png")
    sd.write_manifest(tmp_path / "scenes.tsv", ["image", "mask"], [("s.png", "m.png")])
    (item,) = sd.load_labeled_dataset(tmp_path / "scenes.tsv")
    np.testing.assert_array_equal(item.image, scene.image)
    np.testing.assert_array_equal(item.mask, scene.mask)
