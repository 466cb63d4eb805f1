"""Channels-last 3x3 convolution kernels.

The padded sample is split into ``stride**2`` polyphase grids (a single
grid when stride is 1). Inside a grid flattened to (rows*cols, C), kernel
tap (ky, kx) reads one contiguous row window, so each tap is a single GEMM
accumulated in place with BLAS ``beta=1`` and no im2col matrix is built.
Output rows that land in a grid's spare columns are junk and are dropped.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import blas

TAPS = tuple((ky, kx) for ky in range(3) for kx in range(3))


class _Geometry:
    def __init__(self, h, w, stride, padding, ho, wo):
        self.h, self.w = h, w
        self.stride, self.padding = stride, padding
        self.ho, self.wo = ho, wo
        reach = 2 // stride  # largest per-grid tap offset
        self.gh, self.gw = ho + reach, wo + reach
        self.span = (ho - 1) * self.gw + wo
        # tap -> (phase index, flat offset inside that phase grid)
        self.tap_phase = [
            ((ky % stride) * stride + kx % stride, (ky // stride) * self.gw + kx // stride)
            for ky, kx in TAPS
        ]
        self.phases = [(a, b) for a in range(stride) for b in range(stride)]

        self.phase_maps = [self._phase_map(a, b) for a, b in self.phases]

    def _axis_map(self, a, size, extent):
        # grid index i <-> unpadded index a + stride*i - padding
        s, p = self.stride, self.padding
        i0 = max(0, -(-(p - a) // s))
        r0 = a + s * i0 - p
        count = max(0, min(extent - i0, -(-(size - r0) // s)))
        return slice(i0, i0 + count), slice(r0, r0 + s * count, s) if count else slice(0, 0)

    def _phase_map(self, a, b):
        gi, xi = self._axis_map(a, self.h, self.gh)
        gj, xj = self._axis_map(b, self.w, self.gw)
        return (gi, gj), (xi, xj)


def _gemm(dtype):
    return blas.dgemm if dtype == np.float64 else blas.sgemm


def _fill_phases(xs, geo: _Geometry, grids: np.ndarray) -> None:
    # xs: one unpadded (H, W, C) sample -> grids (P, gh, gw, C); padding cells stay 0
    for idx, (gsl, xsl) in enumerate(geo.phase_maps):
        grids[(idx,) + gsl] = xs[xsl]


def pack(weight: np.ndarray, dtype) -> np.ndarray:
    """(K, C, 3, 3) kernel -> (3, 3, K, C); every tap slice is C-ordered (K, C)."""
    return np.ascontiguousarray(weight.transpose(2, 3, 0, 1), dtype=dtype)


def forward(x: np.ndarray, packed: np.ndarray, stride: int, padding: int, ho: int, wo: int):
    """x: (N, H, W, C), packed kernel from :func:`pack` -> (N, ho, wo, K)."""
    n, h, w, c = x.shape
    k = packed.shape[2]
    dtype = np.result_type(x, packed)
    geo = _Geometry(h, w, stride, padding, ho, wo)
    gemm = _gemm(dtype)
    w_ck = [packed[ky, kx].T for ky, kx in TAPS]  # Fortran-ordered (C, K)
    grids = np.zeros((len(geo.phases), geo.gh, geo.gw, c), dtype=dtype)
    flat = grids.reshape(len(geo.phases), geo.gh * geo.gw, c)
    acc = np.empty((ho * geo.gw, k), dtype=dtype)
    out = np.empty((n, ho, wo, k), dtype=dtype)
    span = geo.span
    for i in range(n):
        _fill_phases(x[i], geo, grids)
        acc.fill(0)
        for t, (ph, off) in enumerate(geo.tap_phase):
            gemm(1.0, w_ck[t], flat[ph, off : off + span].T, trans_a=1, beta=1.0, c=acc[:span].T, overwrite_c=1)
        out[i] = acc.reshape(ho, geo.gw, k)[:, :wo]
    return out


def backward(x, packed, g, stride, padding, ho, wo, need_x: bool, need_w: bool):
    """Gradients w.r.t. input (N, H, W, C) and the (K, C, 3, 3) kernel."""
    n, h, w, c = x.shape
    k = packed.shape[2]
    dtype = np.result_type(x, packed, g)
    geo = _Geometry(h, w, stride, padding, ho, wo)
    gemm = _gemm(dtype)
    span = geo.span
    nph = len(geo.phases)

    grids = np.zeros((nph, geo.gh, geo.gw, c), dtype=dtype)
    flat = grids.reshape(nph, geo.gh * geo.gw, c)
    gbuf = np.zeros((ho, geo.gw, k), dtype=dtype)
    gflat = gbuf.reshape(ho * geo.gw, k)[:span]

    if need_w:
        dw_ck = [np.zeros((c, k), dtype=dtype, order="F") for _ in TAPS]
    if need_x:
        w_ck = [packed[ky, kx].astype(dtype, copy=False).T for ky, kx in TAPS]
        dgrids = np.empty_like(grids)
        dflat = dgrids.reshape(nph, geo.gh * geo.gw, c)
        dx = np.zeros((n, h, w, c), dtype=dtype)

    for i in range(n):
        gbuf[:, :wo] = g[i]
        if need_w:
            _fill_phases(x[i], geo, grids)
        if need_x:
            dgrids.fill(0)
        for t, (ph, off) in enumerate(geo.tap_phase):
            if need_w:
                gemm(1.0, flat[ph, off : off + span].T, gflat.T, trans_b=1, beta=1.0,
                     c=dw_ck[t], overwrite_c=1)
            if need_x:
                gemm(1.0, w_ck[t], gflat.T, beta=1.0, c=dflat[ph, off : off + span].T, overwrite_c=1)
        if need_x:
            for idx, (gsl, xsl) in enumerate(geo.phase_maps):
                dx[(i,) + xsl] += dgrids[(idx,) + gsl]

    dw = None
    if need_w:
        dw = np.empty((k, c, 3, 3), dtype=dtype)
        for t, (ky, kx) in enumerate(TAPS):
            dw[:, :, ky, kx] = dw_ck[t].T
    return (dx if need_x else None), dw
