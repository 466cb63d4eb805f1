"""Differentiable primitives used by the Siamese-GAP network.

Every function takes and returns :class:`~siamese_gap.tensor.Tensor` values
and records a backward rule on the active tape. Arithmetic stays in the
operands' dtype (32-bit by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, StateError
from . import _conv
from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - 3) // stride + 1


def _to_nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _to_nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def conv2d(
    x: Tensor, weight: Tensor, stride: int = 1, padding: int = 1, channels_last: bool = False
) -> Tensor:
    """3x3 cross-correlation without bias.

    ``x`` is (N, C, H, W), or (N, H, W, C) with ``channels_last``; the
    kernel is always (K, C, 3, 3). The output uses the input's layout.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-d operands, got {x.shape} and {weight.shape}")
    if channels_last:
        n, h, w, c = x.shape
    else:
        n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ConfigurationError(f"only 3x3 kernels are supported, got {kh}x{kw}")
    if c != cw:
        raise ConfigurationError(f"input has {c} channels but kernel expects {cw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    ho, wo = conv_output_size(h, stride, padding), conv_output_size(w, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv output size {ho}x{wo} is not positive")

    xl = x.data if channels_last else _to_nhwc(x.data)
    wp = _conv.pack(weight.data, np.result_type(xl, weight.data))
    out = _conv.forward(xl, wp, stride, padding, ho, wo)
    if not channels_last:
        out = _to_nchw(out)

    def backward(g, needs):
        gl = g if channels_last else _to_nhwc(g)
        dx, dw = _conv.backward(xl, wp, gl, stride, padding, ho, wo, needs[0], needs[1])
        if dx is not None and not channels_last:
            dx = _to_nchw(dx)
        return dx, dw

    return record(out, (x, weight), backward, "conv2d")


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class RunningStats:
    """Per-channel running mean and variance used by eval-mode batch norm."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean[...] = (1.0 - m) * self.mean + m * batch_mean
        self.var[...] = (1.0 - m) * self.var + m * batch_var_unbiased


def _row_block(rows: int) -> int:
    return int(np.gcd(rows, 1024))


def _channel_sum(a: np.ndarray, channels_last: bool) -> np.ndarray:
    """Per-channel sum in float64 (float32 partial sums over blocks of rows)."""
    if not channels_last:
        n, k = a.shape[:2]
        return a.reshape(n, k, -1).sum(axis=2, dtype=np.float64).sum(axis=0)
    k = a.shape[-1]
    rows = a.size // k
    b = _row_block(rows)
    blocks = a.reshape(rows // b, b, k)
    return np.matmul(np.ones(b, dtype=a.dtype), blocks).sum(axis=0, dtype=np.float64)


def _channel_dot(a: np.ndarray, b: np.ndarray, channels_last: bool) -> np.ndarray:
    """Per-channel sum of ``a * b`` without materialising the product."""
    if not channels_last:
        n, k = a.shape[:2]
        return np.einsum("nkp,nkp->k", a.reshape(n, k, -1), b.reshape(n, k, -1), dtype=np.float64)
    k = a.shape[-1]
    rows = a.size // k
    blk = _row_block(rows)
    a3, b3 = a.reshape(rows // blk, blk, k), b.reshape(rows // blk, blk, k)
    return np.einsum("rbk,rbk->rk", a3, b3).sum(axis=0, dtype=np.float64)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats | None = None,
    training: bool = True,
    eps: float = BN_EPS,
    channels_last: bool = False,
) -> Tensor:
    """Per-channel normalisation over (N, H, W) followed by ``gamma * x + beta``.

    In training mode the biased batch variance normalises the input and, if
    ``running`` is given, the running estimates are updated in place
    (with the unbiased variance). Eval mode normalises with ``running``.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"batchnorm2d expects a 4-d input, got {x.shape}")
    k = x.shape[3] if channels_last else x.shape[1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ConfigurationError(f"gamma/beta must have shape ({k},)")
    xd = x.data
    dtype = np.result_type(xd, gamma.data, beta.data)
    count = x.data.size // k

    def per_channel(v):
        v = np.asarray(v, dtype=dtype)
        return v if channels_last else v[:, None, None]

    if training:
        if count < 2:
            raise ConfigurationError("train-mode batch norm needs N*H*W >= 2")
        mean = _channel_sum(xd, channels_last) / count
        xhat = xd - per_channel(mean)
        var = _channel_dot(xhat, xhat, channels_last) / count
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= per_channel(inv)
        if running is not None:
            running.update(mean, var * count / (count - 1))
    else:
        if running is None:
            raise StateError("eval-mode batch norm needs running statistics")
        inv = 1.0 / np.sqrt(running.var.astype(np.float64) + eps)
        xhat = (xd - per_channel(running.mean)) * per_channel(inv)

    gd = gamma.data.astype(dtype, copy=False)
    out = xhat * per_channel(gd)
    out += per_channel(beta.data)

    def backward(g, needs):
        dbeta = _channel_sum(g, channels_last)
        dgamma = _channel_dot(g, xhat, channels_last)
        dx = None
        if needs[0]:
            scale = per_channel(gd * inv)
            if training:
                t = xhat * per_channel(dgamma / count)
                t -= g
                t += per_channel(dbeta / count)
                t *= -scale
                dx = t
            else:
                dx = g * scale
        return dx, dgamma.astype(dtype), dbeta.astype(dtype)

    return record(out, (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# elementwise and pooling


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g, needs):
        return (g * (out > 0),)

    return record(out, (x,), backward, "relu")


def _spatial_view(x: Tensor, channels_last: bool, op: str):
    # -> (N, C, H*W) or (N, H*W, C) view plus the spatial axis
    if x.ndim != 4:
        raise ConfigurationError(f"{op} expects a 4-d input, got {x.shape}")
    if channels_last:
        n, h, w, k = x.shape
        return x.data.reshape(n, h * w, k), 1
    n, k, h, w = x.shape
    return x.data.reshape(n, k, h * w), 2


def gap(x: Tensor, channels_last: bool = False) -> Tensor:
    """Global average pooling: each feature map becomes its spatial mean.

    Sums run sequentially over row-major spatial positions in 64-bit before
    dividing by H*W, so results are reproducible bit-for-bit.
    """
    flat, axis = _spatial_view(x, channels_last, "gap")
    size = flat.shape[axis]
    sums = np.zeros((flat.shape[0], flat.shape[3 - axis]), dtype=np.float64)
    for r in range(size):
        sums += flat[:, r, :] if axis == 1 else flat[:, :, r]
    out = (sums / size).astype(x.dtype)
    shape = x.shape

    def backward(g, needs):
        gs = g / size
        gs = gs[:, None, None, :] if channels_last else gs[:, :, None, None]
        return (np.ascontiguousarray(np.broadcast_to(gs, shape)),)

    return record(out, (x,), backward, "gap")


def gmp(x: Tensor, channels_last: bool = False) -> Tensor:
    """Global max pooling; the gradient goes to the first maximum in row-major order."""
    flat, axis = _spatial_view(x, channels_last, "gmp")
    arg = np.expand_dims(flat.argmax(axis=axis), axis)
    out = np.take_along_axis(flat, arg, axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g, needs):
        dx = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(dx, arg, np.expand_dims(g, axis), axis=axis)
        return (dx.reshape(shape),)

    return record(out, (x,), backward, "gmp")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight stored as (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"linear: cannot apply {weight.shape} weight to {x.shape} input")
    if bias.shape != (weight.shape[1],):
        raise ConfigurationError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def backward(g, needs):
        dx = g @ wd.T if needs[0] else None
        dw = xd.T @ g if needs[1] else None
        db = g.sum(axis=0) if needs[2] else None
        return dx, dw, db

    return record(out, (x, weight, bias), backward, "linear")


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate (N, D_i) tensors along the feature axis, in order."""
    if not parts:
        raise ConfigurationError("concat needs at least one part")
    n = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != n:
            raise ConfigurationError(f"concat: part shape {p.shape} incompatible with N={n}")
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + widths)

    def backward(g, needs):
        return tuple(g[:, bounds[i] : bounds[i + 1]].copy() for i in range(len(parts)))

    return record(out, tuple(parts), backward, "concat")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def backward(g, needs):
        return g, g

    return record(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two equally-shaped tensors."""
    if a.shape != b.shape:
        raise ConfigurationError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g, needs):
        return (g * bd if needs[0] else None), (g * ad if needs[1] else None)

    return record(out, (a, b), backward, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    shape = x.shape

    def backward(g, needs):
        return (np.full(shape, g, dtype=g.dtype),)

    return record(out, (x,), backward, "sum")


def index(x: Tensor, key) -> Tensor:
    """Basic/advanced indexing with a scatter-add backward."""
    out = np.array(x.data[key])
    shape = x.shape

    def backward(g, needs):
        dx = np.zeros(shape, dtype=g.dtype)
        np.add.at(dx, key, g)
        return (dx,)

    return record(out, (x,), backward, "index")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return record(out, (x,), backward, "transpose")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("train-mode dropout needs an RNG stream")
    keep = rng.random(x.shape, dtype=np.float64) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    out = x.data * mask

    def backward(g, needs):
        return (g * mask,)

    return record(out, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# classification head


def softmax(logits: Tensor) -> Tensor:
    z = logits.data
    e = np.exp(z - z.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g, needs):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record(out, (logits,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean softmax cross-entropy for integer class labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ConfigurationError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be {n} integers")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise DataError(f"labels must lie in [0, {c})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(total)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype)

    def backward(g, needs):
        d = e / total
        d[rows, labels] -= 1
        return (d * (g / n),)

    return record(out, (logits,), backward, "cross_entropy")


__all__ = [
    "RunningStats",
    "add",
    "batchnorm2d",
    "concat",
    "conv2d",
    "conv_output_size",
    "cross_entropy",
    "dropout",
    "gap",
    "gmp",
    "index",
    "linear",
    "mul",
    "relu",
    "softmax",
    "tensor_sum",
    "transpose",
    "as_tensor",
]
