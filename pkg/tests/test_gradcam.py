import numpy as np
import pytest

from siamese_gap import checkpoint, data, gradcam as gc
from siamese_gap.data import KneeSample
from siamese_gap.errors import ConfigurationError
from siamese_gap.model import BlockSpec, ModelConfig, build


def toy(head_weight):
    """One 1-channel layer whose 3x3 kernel is the identity, on 2x2 inputs."""
    cfg = ModelConfig(blocks=(BlockSpec(1, 1, 1),), taps=(1,), input_size=2, dropout_p=0.0)
    model = build(cfg, seed=0)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1.0
    model.params["block1.layer1.conv.weight"].data = w
    model.params["head.weight"].data = np.array([head_weight], np.float32)
    return model


def test_toy_closed_form():
    # eval BN with fresh statistics scales by 1/sqrt(1+eps); ReLU; GAP; the
    # class-1 logit is (mean A_lat + mean A_med) * w1 + b1, so every dA is w1/4
    # and the normalised map is relu(x) / max relu(x)
    x_lat = np.array([[[0.2, -0.4], [0.8, 0.4]]], np.float32)
    x_med = np.array([[[0.1, 0.3], [0.0, -0.5]]], np.float32)
    s = KneeSample("t", x_lat, x_med, 1)
    lat, med = gc.gradcam(toy([0.7, 1.5]), s, 1)
    np.testing.assert_allclose(lat.values, [[0.25, 0.0], [1.0, 0.5]], atol=1e-7)
    np.testing.assert_allclose(med.values, [[1 / 3, 1.0], [0.0, 0.0]], atol=1e-7)
    scale = 1.5 / 4
    np.testing.assert_allclose(lat.raw, scale * np.maximum(x_lat[0], 0) / np.sqrt(1 + 1e-5), rtol=1e-6)
    # a negative class weight makes every alpha negative, so the ReLU empties the map
    neg_lat, _ = gc.gradcam(toy([0.7, -1.5]), s, 1)
    assert not neg_lat.values.any() and not neg_lat.raw.any()


def test_cam_from_and_normalise():
    act = np.random.default_rng(0).random((4, 4, 3))
    grad = np.broadcast_to(np.array([1.0, -2.0, 0.5]), (4, 4, 3))
    np.testing.assert_allclose(gc.cam_from(act, grad), np.maximum(act @ [1.0, -2.0, 0.5], 0))
    assert not gc.normalise(np.zeros((2, 2))).any()
    assert gc.normalise(np.array([[0.0, 2.0]])).max() == 1.0


def test_upsample_identity_and_argmax_footprint():
    rng = np.random.default_rng(1)
    small = rng.random((5, 5))
    np.testing.assert_array_equal(gc.upsample(small, 5), small)
    for _ in range(200):
        cam = rng.random((16, 16)) ** 4
        big = gc.upsample(cam, 128)
        assert big.shape == (128, 128)
        assert big.max() == cam.max()
        ci, cj = np.unravel_index(cam.argmax(), cam.shape)
        bi, bj = np.unravel_index(big.argmax(), big.shape)
        assert ci * 8 <= bi < ci * 8 + 8 and cj * 8 <= bj < cj * 8 + 8


def test_maps_in_unit_range_for_random_models():
    cfg = ModelConfig(input_size=16)
    for seed in range(100):
        model = build(cfg, seed=seed)
        rng = np.random.default_rng(seed)
        s = KneeSample("r", rng.random((1, 16, 16), np.float32), rng.random((1, 16, 16), np.float32), 0)
        for m in gc.gradcam(model, s, seed % 2):
            assert m.values.shape == (16, 16) and m.raw.shape == (2, 2)
            assert m.values.min() >= 0.0 and m.values.max() <= 1.0
            assert m.raw.min() >= 0.0
            assert m.values.max() == 1.0 or not m.raw.any()
            assert m.layer == "block4"


def test_gradcam_full_size_does_not_mutate(tmp_path):
    model = build(seed=3)
    before = checkpoint.to_bytes(checkpoint.capture(model))
    s = data.synth_sample(0, 1, 0)
    lat, med = gc.gradcam(model, s, 1)
    assert lat.values.shape == (128, 128) and lat.raw.shape == (16, 16)
    assert (lat.branch, med.branch, lat.class_name) == ("lateral", "medial", "KL2")
    assert checkpoint.to_bytes(checkpoint.capture(model)) == before
    assert all(p.grad is None and p.requires_grad for p in model.params.values())
    with pytest.raises(ConfigurationError):
        gc.gradcam(model, s, 2)


def test_localisation_hit_definition():
    hot_map = np.zeros((128, 128), np.float32)
    hot_map[20:30, 20:30] = 1.0
    m = gc.AttentionMap(hot_map, np.zeros((16, 16)), "lateral", 1, "block4")
    hit, inside, outside = gc.localisation_hit([m, m], (25.0, 25.0), 10)
    assert hit and inside > outside
    miss, _, _ = gc.localisation_hit([m], (100.0, 100.0), 10)
    assert not miss


# -- overlay ------------------------------------------------------------------------


def zero_map():
    return gc.AttentionMap(np.zeros((128, 128), np.float32), np.zeros((16, 16)), "medial", 0, "block4")


def test_zero_map_overlay_is_scaled_gray(tmp_path):
    patch = np.linspace(0, 1, 128 * 128, dtype=np.float32).reshape(1, 128, 128)
    for alpha in (0.0, 0.5, 0.8):
        rgb = gc.blend(zero_map(), patch, alpha)
        expect = np.round((1 - alpha) * patch[0].astype(np.float64) * 255).astype(np.uint8)
        for c in range(3):
            np.testing.assert_array_equal(rgb[..., c], expect)
    with pytest.raises(ConfigurationError):
        gc.blend(zero_map(), patch, 1.5)


def test_overlay_file(tmp_path):
    rng = np.random.default_rng(0)
    m = gc.AttentionMap(rng.random((128, 128)).astype(np.float32), np.zeros((16, 16)), "lateral", 1, "block4")
    patch = rng.random((1, 128, 128)).astype(np.float32)
    a = gc.overlay(m, patch, tmp_path / gc.overlay_name("s1", m))
    b = gc.overlay(m, patch, tmp_path / "again.ppm")
    assert a.name == "s1_lateral_KL2.ppm"
    assert a.read_bytes() == b.read_bytes()
    img = data.read_pnm(a)
    assert img.shape == (128, 128, 3)
    with pytest.raises(OSError):
        gc.overlay(m, patch, tmp_path / "missing" / "x.ppm")


def test_hot_colormap_monotone():
    v = np.linspace(0, 1, 101)
    rgb = gc.hot(v)
    assert np.all(np.diff(rgb, axis=0) >= 0)
    np.testing.assert_array_equal(rgb[0], [0, 0, 0])
    np.testing.assert_array_equal(rgb[-1], [1, 1, 1])
