"""Grad-CAM attention maps for the two branches of a Siamese-GAP network."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import ops
from .data import KneeSample, blob_mask, write_ppm
from .errors import ConfigurationError
from .model import CLASS_NAMES, SiameseGapNetwork
from .tensor import Tape, Tensor

BRANCHES = ("lateral", "medial")


@dataclass(frozen=True)
class AttentionMap:
    values: np.ndarray  # (S, S) in [0, 1]
    raw: np.ndarray  # ReLU(sum_k alpha_k A_k) before normalisation, feature-map grid
    branch: str
    target_class: int
    layer: str

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.target_class]


def cam_from(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Raw Grad-CAM for one (H, W, K) activation block and its gradient."""
    alpha = gradients.astype(np.float64).mean(axis=(0, 1))
    return np.maximum(activations.astype(np.float64) @ alpha, 0.0)


def normalise(raw: np.ndarray) -> np.ndarray:
    peak = raw.max()
    return raw / peak if peak > 0 else np.zeros_like(raw)


def upsample(cam: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor ``f``; pixel ``f*i + f//2`` lands exactly on cell ``i``.

    Because every cell centre is sampled exactly and every other pixel is
    a convex combination of neighbouring cells, the output maximum equals
    the input maximum and sits inside that cell's footprint.
    """
    h, w = cam.shape
    ys = np.clip((np.arange(size) - (size // h) // 2) * (h / size), 0, h - 1)
    xs = np.clip((np.arange(size) - (size // w) // 2) * (w / size), 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(cam.astype(np.float64), [yy, xx], order=1, mode="nearest")


def gradcam(
    model: SiameseGapNetwork, sample: KneeSample, target_class: int
) -> tuple[AttentionMap, AttentionMap]:
    """Per-branch Grad-CAM maps from the last block's activations.

    Runs in eval mode and never touches parameters or their gradients.
    """
    if not 0 <= target_class < model.config.num_classes:
        raise ConfigurationError(f"target_class {target_class} out of range")
    lat = Tensor(sample.lateral[None], requires_grad=True)
    med = Tensor(sample.medial[None], requires_grad=True)
    with model.frozen(), Tape() as tape:
        out = model.forward_pair(lat, med, training=False)
        blocks = [out.lateral.activations[-1].retain_grad(), out.medial.activations[-1].retain_grad()]
        score = ops.index(out.logits, (0, target_class))
    tape.backward(score)
    layer = f"block{len(model.config.blocks)}"
    size = model.config.input_size
    maps = []
    for branch, act in zip(BRANCHES, blocks):
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
        raw = cam_from(act.data[0], grad[0])
        maps.append(AttentionMap(upsample(normalise(raw), size).astype(np.float32), raw, branch, target_class, layer))
    return maps[0], maps[1]


def localisation_hit(maps: Sequence[AttentionMap], blob: tuple[float, float], radius: float) -> tuple[bool, float, float]:
    """Whether the branch-averaged map is hotter inside the blob disk than outside."""
    mean_map = np.mean([m.values for m in maps], axis=0)
    mask = blob_mask(blob, radius)
    inside, outside = float(mean_map[mask].mean()), float(mean_map[~mask].mean())
    return inside > outside, inside, outside


def localisation_rate(
    model: SiameseGapNetwork, samples: Sequence[KneeSample], radius: float = 10.0, target_class: int = 1
) -> tuple[float, list[tuple[bool, float, float]]]:
    """Fraction of blob-carrying samples whose attention concentrates on the blob."""
    results = [
        localisation_hit(gradcam(model, s, target_class), s.blob, radius) for s in samples if s.blob is not None
    ]
    if not results:
        raise ConfigurationError("no samples with recorded blob positions")
    return sum(r[0] for r in results) / len(results), results


# -- rendering --------------------------------------------------------------


def hot(values: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white colormap, monotone in every channel."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    return np.clip(3.0 * v - np.array([0.0, 1.0, 2.0]), 0.0, 1.0)


def blend(attention: AttentionMap | np.ndarray, patch: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """(H, W, 3) uint8 rendering of ``(1 - alpha) * patch + alpha * hot(map)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"blend weight must lie in [0, 1], got {alpha}")
    values = attention.values if isinstance(attention, AttentionMap) else np.asarray(attention)
    gray = np.asarray(patch, dtype=np.float64).reshape(values.shape)
    rgb = (1.0 - alpha) * gray[..., None] + alpha * hot(values)
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def overlay(attention: AttentionMap, patch: np.ndarray, path, alpha: float = 0.5) -> Path:
    """Write the blended heatmap as a binary PPM."""
    path = Path(path)
    write_ppm(path, blend(attention, patch, alpha))
    return path


def overlay_name(sample_id: str, attention: AttentionMap) -> str:
    return f"{sample_id}_{attention.branch}_{attention.class_name}.ppm"
