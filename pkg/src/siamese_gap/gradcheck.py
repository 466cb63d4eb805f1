"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


class NonSmoothPoint(ArithmeticError):
    """The analytic gradient was taken on a different smooth piece than the
    64-bit reference point, so no finite difference can confirm it."""


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    *,
    precision: int = 32,
    probes: int | None = None,
    seed: int = 0,
    pattern: Callable[[], object] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(*inputs)`` must return a scalar tensor and be deterministic. The
    analytic gradient is computed in ``precision`` bits (32 or 64); the
    finite-difference reference always runs in 64-bit so its truncation and
    rounding error stays well below the tolerance being checked.

    ``probes`` limits the number of coordinates differenced per input
    (sampled without replacement with ``seed``); by default every
    coordinate is checked. Input values are restored on return.

    ``pattern``, if given, returns a comparable summary of the branch
    decisions (ReLU signs, max positions) taken by the most recent call of
    ``f``. Coordinates whose +/- ``eps`` step changes it straddle a kink and
    are skipped (another coordinate is drawn when probing); if the analytic
    pass itself lands on another piece, :class:`NonSmoothPoint` is raised.
    """
    if precision not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    originals = [t.data for t in inputs]
    flags = [t.requires_grad for t in inputs]
    analytic_dtype = np.float32 if precision == 32 else np.float64
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for t, orig in zip(inputs, originals):
            t.data = orig.astype(analytic_dtype)
            t.requires_grad = True
            t.grad = None
        with Tape() as tape:
            loss = f(*inputs)
        analytic_piece = pattern() if pattern else None
        tape.backward(loss)
        grads = [
            np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs
        ]

        for t, orig in zip(inputs, originals):
            t.data = orig.astype(np.float64)
            t.requires_grad = False
        piece = None
        if pattern:
            f(*inputs)
            piece = pattern()
            if analytic_piece != piece:
                raise NonSmoothPoint(f"{precision}-bit evaluation lies on a different piece")
        for t, g in zip(inputs, grads):
            flat = t.data.reshape(-1)
            order = rng.permutation(flat.size) if probes is not None else np.arange(flat.size)
            wanted = flat.size if probes is None else min(probes, flat.size)
            checked = 0
            for i in order:
                if checked == wanted:
                    break
                saved = flat[i]
                flat[i] = saved + eps
                up = float(f(*inputs).data)
                smooth = not pattern or pattern() == piece
                flat[i] = saved - eps
                down = float(f(*inputs).data)
                smooth = smooth and (not pattern or pattern() == piece)
                flat[i] = saved
                if not smooth:
                    continue
                checked += 1
                numeric = (up - down) / (2 * eps)
                worst = max(worst, float(relative_error(g.reshape(-1)[i], numeric)))
    finally:
        for t, orig, flag in zip(inputs, originals, flags):
            t.data = orig
            t.requires_grad = flag
            t.grad = None
    return worst
