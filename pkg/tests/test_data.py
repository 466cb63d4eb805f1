import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import bilinear_point
from siamese_gap import data
from siamese_gap.data import AugmentConfig, AugmentParams, KneeSample
from siamese_gap.errors import ConfigurationError, DataError


def sample(sid, label, seed=0):
    rng = np.random.default_rng(seed)
    return KneeSample(sid, rng.random((1, 128, 128), dtype=np.float32), rng.random((1, 128, 128), dtype=np.float32), label)


def population(n0, n1):
    return [KneeSample(f"a{i}", None, None, 0) for i in range(n0)] + [KneeSample(f"b{i}", None, None, 1) for i in range(n1)]


# -- extraction ---------------------------------------------------------------


def test_exact_tiling_128x256():
    roi = np.random.default_rng(0).random((128, 256))
    lat, med = data.extract_patches(roi, "right")
    np.testing.assert_array_equal(lat, roi[:, :128].astype(np.float32))
    np.testing.assert_array_equal(med, roi[:, 128:][:, ::-1].astype(np.float32))
    lat2, med2 = data.extract_patches(roi, "left")
    np.testing.assert_array_equal(lat2, roi[:, 128:].astype(np.float32))
    np.testing.assert_array_equal(med2, roi[:, :128][:, ::-1].astype(np.float32))


def test_medial_flip_pixel_mapping():
    roi = np.zeros((128, 256))
    roi[40, 130] = 1.0  # right half: medial for a right knee
    _, med = data.extract_patches(roi, "right")
    assert med[40, 127 - 2] == 1.0 and med.sum() == 1.0


def test_upscale_checkerboard_matches_bilinear_oracle():
    yy, xx = np.mgrid[:64, :128]
    board = (((yy // 4) + (xx // 4)) % 2).astype(np.float64)
    lat, med = data.extract_patches(board, "right")
    for r in range(0, 128, 7):
        for c in range(0, 128, 5):
            # output pixel centre (c + 0.5) maps to source coordinate (c + 0.5)/2 - 0.5
            assert abs(lat[r, c] - bilinear_point(board, (r + 0.5) / 2 - 0.5, (c + 0.5) / 2 - 0.5)) < 1e-6
            src = 128 + (127 - c)
            assert abs(med[r, c] - bilinear_point(board, (r + 0.5) / 2 - 0.5, (src + 0.5) / 2 - 0.5)) < 1e-6


def test_narrow_roi_is_edge_replicated():
    roi = np.linspace(0, 1, 128 * 64).reshape(128, 64)
    lat, med = data.extract_patches(roi, "right")
    np.testing.assert_array_equal(lat[:, 64:], np.repeat(lat[:, 63:64], 64, axis=1))
    np.testing.assert_array_equal(lat, med[:, ::-1])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 300), st.integers(2, 400), st.sampled_from(data.LATERALITIES))
def test_extract_always_128(h, w, side):
    roi = np.random.default_rng(h * 1000 + w).random((h, w))
    lat, med = data.extract_patches(roi, side)
    assert lat.shape == med.shape == (128, 128)
    assert lat.min() >= 0 and lat.max() <= 1


@pytest.mark.parametrize(
    "roi, side",
    [(np.zeros((0, 5)), "left"), (np.zeros((5, 5, 3)), "left"), (np.zeros((8, 8)), "up"), (np.full((8, 8), 2.0), "left")],
)
def test_extract_errors(roi, side):
    with pytest.raises(DataError):
        data.extract_patches(roi, side)


# -- split and oversample ----------------------------------------------------------


def test_split_counts_examples():
    split = data.split_dataset(population(100, 100), seed=3)
    assert data.class_counts(split.train) == [70, 70]
    assert data.class_counts(split.validation) == [10, 10]
    assert data.class_counts(split.test) == [20, 20]
    again = data.split_dataset(population(100, 100), seed=3)
    assert [s.id for s in again.train] == [s.id for s in split.train]


def test_split_at_reference_scale():
    kl0, kl2 = data.split_counts(3185)[0], data.split_counts(2126)[0]
    assert kl0 == 2230
    assert abs(kl2 - 1488) <= 1  # flooring val/test hands the remainder to train


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 1000), st.integers(1, 1000), st.integers(0, 2**31))
def test_split_partition_property(n0, n1, seed):
    pop = population(n0, n1)
    split = data.split_dataset(pop, seed)
    ids = [[s.id for s in part] for part in (split.train, split.validation, split.test)]
    flat = sum(ids, [])
    assert len(flat) == len(set(flat)) == n0 + n1
    assert set(flat) == {s.id for s in pop}
    for label, n in ((0, n0), (1, n1)):
        tr, va, te = (data.class_counts(p)[label] for p in (split.train, split.validation, split.test))
        assert (tr, va, te) == data.split_counts(n)
        assert va == n // 10 and te == n // 5


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**31))
def test_oversample_balances_exactly(n0, n1, seed):
    pop = population(n0, n1)
    out = data.oversample(pop, seed)
    assert data.class_counts(out) == [max(n0, n1)] * 2
    ids = {s.id for s in pop}
    assert all(s.id in ids for s in out)
    major = 0 if n0 >= n1 else 1
    assert sorted(s.id for s in out if s.label == major) == sorted(s.id for s in pop if s.label == major)


def test_oversample_reference_counts_and_balanced_input():
    counts = data.class_counts(data.oversample(population(2230, 1488), 0))
    assert counts == [2230, 2230]
    pop = population(5, 5)
    out = data.oversample(pop, 1)
    assert sorted(s.id for s in out) == sorted(s.id for s in pop)
    with pytest.raises(DataError):
        data.oversample(population(3, 0), 0)


# -- augmentation -------------------------------------------------------------------


def test_identity_params_bit_identical():
    s = sample("x", 0)
    out = data.apply_params(s.lateral, AugmentParams())
    np.testing.assert_array_equal(out, s.lateral)
    none = AugmentConfig(apply_prob=0.0)
    aug = data.augment(s, none, np.random.default_rng(0))
    np.testing.assert_array_equal(aug.lateral, s.lateral)
    np.testing.assert_array_equal(aug.medial, s.medial)


def test_gamma_pointwise():
    grid = np.full((1, 4, 4), 0.5, np.float32)
    np.testing.assert_array_equal(data.apply_params(grid, AugmentParams(gamma=1.0)), grid)
    dark = data.apply_params(grid, AugmentParams(gamma=1.2))
    np.testing.assert_allclose(dark, 0.5**1.2, rtol=1e-6)
    assert dark.max() < 0.5


def test_full_turn_rotation_is_identity():
    yy, xx = np.mgrid[:128, :128]
    grid = (0.5 + 0.25 * np.sin(xx / 9.0) * np.cos(yy / 13.0)).astype(np.float32)[None]
    out = data.apply_params(grid, AugmentParams(angle=360.0))
    assert np.abs(out - grid).max() < 1e-3


def test_contrast_about_mean():
    img = np.linspace(0.3, 0.7, 16, dtype=np.float32).reshape(1, 4, 4)
    out = data.apply_params(img, AugmentParams(contrast=1.2))
    np.testing.assert_allclose(out.mean(), img.mean(), atol=1e-6)
    assert out.std() > img.std()


def test_augment_range_and_shape_1000_draws():
    s = sample("x", 1)
    cfg = AugmentConfig(apply_prob=0.8)
    rng = np.random.default_rng(7)
    for _ in range(1000):
        p = data.draw_params(cfg, rng)
        assert -10 <= p.angle <= 10 and -0.1 <= p.brightness <= 0.1
        assert 0.8 <= p.contrast <= 1.25 and 0.8 <= p.gamma <= 1.25
    small = KneeSample("y", s.lateral[:, :24, :24].copy(), s.medial[:, :24, :24].copy(), 1)
    for _ in range(1000):
        out = data.augment(small, cfg, rng)
        for patch in (out.lateral, out.medial):
            assert patch.shape == (1, 24, 24) and patch.dtype == np.float32
            assert patch.min() >= 0.0 and patch.max() <= 1.0


def test_augment_pairs_share_parameters():
    s = sample("x", 0)
    same = KneeSample("y", s.lateral, s.lateral.copy(), 0)
    for seed in range(20):
        out = data.augment(same, AugmentConfig(apply_prob=1.0), np.random.default_rng(seed))
        np.testing.assert_array_equal(out.lateral, out.medial)


def test_augment_config_validation():
    with pytest.raises(ConfigurationError):
        AugmentConfig(contrast_range=(1.1, 1.3))
    with pytest.raises(ConfigurationError):
        AugmentConfig(apply_prob=1.5)
    with pytest.raises(ConfigurationError):
        AugmentConfig(rotation_deg=-1)


# -- synthetic generator ------------------------------------------------------------


@pytest.fixture(scope="module")
def synth():
    return data.synth_generate(40, seed=11)


def test_synth_deterministic(synth):
    again = data.synth_generate(40, seed=11)
    for a, b in zip(synth, again):
        assert a.id == b.id and a.blob == b.blob
        np.testing.assert_array_equal(a.lateral, b.lateral)
    other = data.synth_sample(12, 0, 0)
    assert not np.array_equal(other.lateral, synth[0].lateral)
    with pytest.raises(ConfigurationError):
        data.synth_generate(0, 1)


def test_synth_contract(synth):
    assert data.class_counts(synth) == [40, 40]
    for s in synth:
        assert s.lateral.shape == s.medial.shape == (1, 128, 128)
        assert s.lateral.min() >= 0 and s.lateral.max() <= 1
        # stored as k/255 so the PGM round trip is lossless
        np.testing.assert_array_equal(np.round(s.lateral * 255) / 255, s.lateral)
        assert (s.blob is not None) == (s.label == 1)


def test_blob_region_contrast(synth):
    inside = {0: [], 1: []}
    reference = [s for s in synth if s.label == 1]
    for i, s in enumerate(synth):
        # score both classes on the blob discs recorded for KL2 samples
        mask = data.blob_mask(reference[i % len(reference)].blob if s.label == 0 else s.blob, 4)
        inside[s.label].append(float(s.lateral[0][mask].mean()))
    assert np.mean(inside[1]) - np.mean(inside[0]) > 0.15


def test_pixel_mean_threshold_beats_chance(synth):
    # mean brightness of the outer margin columns separates the classes
    score = np.array([s.lateral[0, :, 5:35].mean() + s.medial[0, :, 5:35].mean() for s in synth])
    labels = np.array([s.label for s in synth])
    best = max(((score > t) == labels).mean() for t in np.unique(score))
    assert best > 0.6


# -- dataset I/O --------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path, synth):
    data.save_dataset(synth[:6] + synth[-6:], tmp_path)
    back = data.load_dataset(tmp_path)
    assert [(s.id, s.label, s.blob) for s in back] == [(s.id, s.label, s.blob) for s in synth[:6] + synth[-6:]]
    for a, b in zip(back, synth[:6] + synth[-6:]):
        np.testing.assert_array_equal(a.lateral, b.lateral)
        np.testing.assert_array_equal(a.medial, b.medial)
    lines = (tmp_path / "manifest.tsv").read_text().splitlines()
    assert lines[0].split("\t") == [synth[0].id, "KL0", f"{synth[0].id}_lat.pgm", f"{synth[0].id}_med.pgm"]


def test_pgm_round_trip_8bit(tmp_path):
    img = np.arange(256, dtype=np.float32).reshape(16, 16) / 255
    data.write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n")
    np.testing.assert_array_equal(data.load_gray(tmp_path / "a.pgm"), img)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(data.read_pnm(tmp_path / "c.pgm"), [[0, 255]])


def test_loader_rejections(tmp_path, synth):
    data.save_dataset(synth[:2], tmp_path)
    (tmp_path / f"{synth[1].id}_med.pgm").unlink()
    with pytest.raises(DataError, match="missing"):
        data.load_dataset(tmp_path)
    (tmp_path / "manifest.tsv").write_text("a\tKL3\tx.pgm\ty.pgm\n")
    with pytest.raises(DataError, match="label"):
        data.load_dataset(tmp_path)
    with pytest.raises(DataError):
        data.load_dataset(tmp_path / "nowhere")
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(DataError, match="truncated"):
        data.read_pnm(tmp_path / "t.pgm")


def test_stack_shapes(synth):
    lat, med, labels = data.stack(synth[:3])
    assert lat.shape == med.shape == (3, 1, 128, 128) and labels.tolist() == [0, 0, 0]


def test_parallel_map_matches_serial(monkeypatch):
    serial = data.synth_generate(3, seed=5)
    monkeypatch.setenv("SGAP_THREADS", "3")
    assert data.worker_count() == 3
    threaded = data.synth_generate(3, seed=5)
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a.lateral, b.lateral)
