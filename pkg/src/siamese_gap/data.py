"""Knee-pair datasets: patch extraction, splitting, oversampling,
augmentation, a synthetic generator and the on-disk PGM layout."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError

PATCH = 128
LABELS = ("KL0", "KL2")
LATERALITIES = ("left", "right")


@dataclass
class KneeSample:
    """One knee: lateral and (already flipped) medial patch, (1, 128, 128) float32 in [0, 1]."""

    id: str
    lateral: np.ndarray
    medial: np.ndarray
    label: int
    blob: tuple[float, float] | None = None  # synthetic lesion centre (x, y), patch pixels

    @property
    def label_name(self) -> str:
        return LABELS[self.label]


@dataclass
class DatasetSplit:
    train: list[KneeSample]
    validation: list[KneeSample]
    test: list[KneeSample]
    seed: int = 0

    def part(self, name: str) -> list[KneeSample]:
        key = {"val": "validation", "valid": "validation"}.get(name, name)
        if key not in ("train", "validation", "test"):
            raise ConfigurationError(f"unknown split {name!r}")
        return getattr(self, key)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 10.0
    brightness_delta: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.25)
    gamma_range: tuple[float, float] = (0.8, 1.25)
    apply_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.contrast_range
        glo, ghi = self.gamma_range
        if self.rotation_deg < 0 or self.brightness_delta < 0:
            raise ConfigurationError("rotation and brightness ranges must be non-negative")
        if not (0 < lo <= 1 <= hi and 0 < glo <= 1 <= ghi):
            raise ConfigurationError("contrast and gamma ranges must be positive and contain 1")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigurationError("apply_prob must lie in [0, 1]")


def worker_count() -> int:
    """Data-pipeline threads; ``SGAP_THREADS`` caps it (default 1)."""
    try:
        return max(1, int(os.environ.get("SGAP_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence) -> list:
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def stream(*key: int) -> np.random.Generator:
    """Independent generator for an integer key such as (seed, epoch, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


# -- patch extraction ------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), [yy, xx], order=1, mode="nearest")


def _take_columns(img: np.ndarray, start: int) -> np.ndarray:
    cols = np.clip(np.arange(start, start + PATCH), 0, img.shape[1] - 1)
    return img[:, cols]


def extract_patches(roi, laterality: str) -> tuple[np.ndarray, np.ndarray]:
    """Lateral and medial 128x128 patches from a grayscale knee ROI.

    The ROI is scaled to height 128 and the two patches are its extreme
    left and right 128 columns (edge-replicated when narrower). On a
    right knee the lateral side is the image's left; on a left knee it
    is the right. The medial patch is mirrored horizontally.
    """
    img = np.asarray(roi)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2 or img.size == 0:
        raise DataError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    if laterality not in LATERALITIES:
        raise DataError(f"laterality must be 'left' or 'right', got {laterality!r}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise DataError("image values must lie in [0, 1]")
    h, w = img.shape
    new_w = max(2, int(round(w * PATCH / h)))
    if (h, w) != (PATCH, new_w):
        img = resize_bilinear(img, PATCH, new_w)
    img = np.clip(img, 0.0, 1.0)
    left = _take_columns(img, 0)
    right = _take_columns(img, new_w - PATCH) if new_w >= PATCH else left
    lateral, medial = (left, right) if laterality == "right" else (right, left)
    return lateral.astype(np.float32), medial[:, ::-1].astype(np.float32)


# -- splitting and oversampling ---------------------------------------------


def split_counts(n: int) -> tuple[int, int, int]:
    """7:1:2 sizes for ``n`` items, flooring validation and test."""
    val, test = n // 10, n // 5
    return n - val - test, val, test


def split_dataset(samples: Sequence[KneeSample], seed: int) -> DatasetSplit:
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for label in range(len(LABELS)):
        group = [s for s in samples if s.label == label]
        order = rng.permutation(len(group))
        ntr, nva, _ = split_counts(len(group))
        picked = [group[i] for i in order]
        train += picked[:ntr]
        val += picked[ntr : ntr + nva]
        test += picked[ntr + nva :]
    return DatasetSplit(train, val, test, seed)


def class_counts(samples: Iterable[KneeSample]) -> list[int]:
    counts = [0] * len(LABELS)
    for s in samples:
        counts[s.label] += 1
    return counts


def oversample(train: Sequence[KneeSample], seed) -> list[KneeSample]:
    """Bootstrap every smaller class up to the majority count, then shuffle."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = class_counts(train)
    if min(counts) == 0:
        raise DataError(f"cannot oversample with an empty class, counts={counts}")
    target = max(counts)
    out = list(train)
    for label, count in enumerate(counts):
        group = [s for s in train if s.label == label]
        extra = rng.integers(0, count, size=target - count)
        out += [group[i] for i in extra]
    return [out[i] for i in rng.permutation(len(out))]


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0


def draw_params(config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    def maybe(draw, identity):
        # both random numbers are consumed regardless, keeping streams aligned
        use, value = rng.random() < config.apply_prob, draw()
        return value if use else identity

    return AugmentParams(
        angle=maybe(lambda: rng.uniform(-config.rotation_deg, config.rotation_deg), 0.0),
        brightness=maybe(lambda: rng.uniform(-config.brightness_delta, config.brightness_delta), 0.0),
        contrast=maybe(lambda: math.exp(rng.uniform(*np.log(config.contrast_range))), 1.0),
        gamma=maybe(lambda: math.exp(rng.uniform(*np.log(config.gamma_range))), 1.0),
    )


def apply_params(patch: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = patch
    if p.angle != 0.0:
        planes = [ndimage.rotate(c, p.angle, reshape=False, order=1, mode="nearest") for c in out]
        out = np.clip(np.stack(planes), 0.0, 1.0)
    if p.brightness != 0.0:
        out = np.clip(out + p.brightness, 0.0, 1.0)
    if p.contrast != 1.0:
        mean = out.mean()
        out = np.clip((out - mean) * p.contrast + mean, 0.0, 1.0)
    if p.gamma != 1.0:
        out = np.power(out, p.gamma)
    return out.astype(np.float32, copy=False)


def augment(sample: KneeSample, config: AugmentConfig, rng: np.random.Generator) -> KneeSample:
    """Apply one random draw of the augmentations identically to both patches."""
    p = draw_params(config, rng)
    return replace(sample, lateral=apply_params(sample.lateral, p), medial=apply_params(sample.medial, p))


# -- synthetic generator ----------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Shape of the synthetic surrogate; KL2 adds a bright marginal blob
    next to the band edge and a slightly narrower band."""

    band_width_kl0: tuple[float, float] = (16.0, 22.0)
    band_width_kl2: tuple[float, float] = (12.0, 18.0)
    blob_sigma: float = 5.0
    blob_amplitude: float = 0.35
    noise_sd: float = 0.03


def _band_image(rng, width: float, centre: float, cfg: SynthConfig) -> np.ndarray:
    rows = np.arange(PATCH)[:, None]
    cols = np.arange(PATCH)[None, :]
    tilt = rng.uniform(-0.05, 0.05)
    edge = centre + tilt * (cols - PATCH / 2)
    bone = 0.55 + 0.1 * rng.random() + 0.05 * np.cos(cols / 19.0 + rng.uniform(0, 6.3))
    img = np.where(np.abs(rows - edge) < width / 2, 0.15, bone)
    img = ndimage.gaussian_filter(img, 2.0, mode="nearest")
    return img + rng.normal(0.0, cfg.noise_sd, size=img.shape)


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def blob_mask(centre: tuple[float, float], radius: float) -> np.ndarray:
    """Disk of ``radius`` pixels around a blob centre (x, y) on the patch grid."""
    cx, cy = centre
    yy, xx = np.mgrid[:PATCH, :PATCH]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2


def synth_sample(seed: int, label: int, index: int, cfg: SynthConfig = SynthConfig()) -> KneeSample:
    rng = stream(seed, label, index)
    width = rng.uniform(*(cfg.band_width_kl2 if label else cfg.band_width_kl0))
    centre = PATCH / 2 + rng.uniform(-6, 6)
    patches = [_band_image(rng, width, centre, cfg) for _ in range(2)]
    blob = None
    if label == 1:
        side = 1 if rng.random() < 0.5 else -1
        cx = rng.uniform(12, 30)  # outer joint margin
        cy = centre + side * (width / 2 + rng.uniform(2, 6))
        yy, xx = np.mgrid[:PATCH, :PATCH]
        bump = cfg.blob_amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * cfg.blob_sigma**2))
        patches = [p + bump for p in patches]
        blob = (float(cx), float(cy))
    lat, med = (_quantize(p)[None] for p in patches)
    return KneeSample(f"{LABELS[label].lower()}_{index:05d}", lat, med, label, blob)


def synth_generate(n_per_class: int, seed: int, cfg: SynthConfig = SynthConfig()) -> list[KneeSample]:
    """``n_per_class`` KL0 then ``n_per_class`` KL2 samples, deterministic in ``seed``."""
    if n_per_class < 1:
        raise ConfigurationError("n_per_class must be at least 1")
    jobs = [(label, i) for label in range(len(LABELS)) for i in range(n_per_class)]
    return parallel_map(lambda job: synth_sample(seed, job[0], job[1], cfg), jobs)


# -- PGM / PPM and dataset directories --------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """8-bit binary PGM (P5) -> (H, W) or PPM (P6) -> (H, W, 3), as uint8."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file")
    try:
        w, pos = _read_token(buf, pos)
        h, pos = _read_token(buf, pos)
        maxval, pos = _read_token(buf, pos)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DataError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    pixels = buf[pos + 1 : pos + 1 + w * h * channels]
    if len(pixels) != w * h * channels:
        raise DataError(f"{path}: truncated pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, channels)
    return arr[:, :, 0] if channels == 1 else arr


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit P5."""
    q = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + q.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def load_gray(path) -> np.ndarray:
    return read_pnm(path).astype(np.float32) / 255.0


def save_dataset(samples: Sequence[KneeSample], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines, meta = [], []
    for s in samples:
        lat, med = f"{s.id}_lat.pgm", f"{s.id}_med.pgm"
        write_pgm(directory / lat, s.lateral[0])
        write_pgm(directory / med, s.medial[0])
        lines.append(f"{s.id}\t{s.label_name}\t{lat}\t{med}\n")
        if s.blob is not None:
            meta.append(f"{s.id}\t{s.blob[0]!r}\t{s.blob[1]!r}\n")
    (directory / "manifest.tsv").write_text("".join(lines))
    if meta:
        (directory / "meta.tsv").write_text("".join(meta))
    return directory


def _load_meta(directory: Path) -> dict[str, tuple[float, float]]:
    path = directory / "meta.tsv"
    if not path.exists():
        return {}
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{n}: expected 3 tab-separated fields")
        out[parts[0]] = (float(parts[1]), float(parts[2]))
    return out


def load_dataset(directory) -> list[KneeSample]:
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"{directory}: no manifest.tsv")
    meta = _load_meta(directory)
    samples, seen = [], set()
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{manifest}:{n}: expected 4 tab-separated fields")
        sid, label, lat, med = parts
        if label not in LABELS:
            raise DataError(f"{manifest}:{n}: unknown label {label!r}")
        if sid in seen:
            raise DataError(f"{manifest}:{n}: duplicate id {sid!r}")
        seen.add(sid)
        patches = []
        for name in (lat, med):
            if not (directory / name).exists():
                raise DataError(f"{manifest}:{n}: sample {sid!r} is missing {name}")
            img = load_gray(directory / name)
            if img.shape != (PATCH, PATCH):
                raise DataError(f"{directory / name}: expected {PATCH}x{PATCH}, got {img.shape}")
            patches.append(img[None])
        samples.append(KneeSample(sid, patches[0], patches[1], LABELS.index(label), meta.get(sid)))
    if not samples:
        raise DataError(f"{manifest}: empty manifest")
    return samples


def stack(samples: Sequence[KneeSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (lateral, medial, labels) for a list of samples."""
    lat = np.stack([s.lateral for s in samples]).astype(np.float32, copy=False)
    med = np.stack([s.medial for s in samples]).astype(np.float32, copy=False)
    return lat, med, np.array([s.label for s in samples], dtype=np.int64)
