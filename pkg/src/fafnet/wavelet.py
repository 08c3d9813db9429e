"""Differentiable single-level 2D DWT / IDWT with length-2 filter banks.

Sub-bands are named by (vertical filter, horizontal filter): ``LH`` applies
the low-pass down the columns and the high-pass along each row, so it
responds to horizontal differences. The high-frequency map stacks
``(LH, HL, HH)`` per input channel, channel-major::

    hf[:, 3*c + 0] = LH of channel c
    hf[:, 3*c + 1] = HL of channel c
    hf[:, 3*c + 2] = HH of channel c
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass
class FilterBank:
    """Analysis and synthesis low/high-pass filters.

    With ``learnable=False`` the analysis and synthesis filters are the same
    constant (non-trainable) tensors.
    """

    analysis_lo: Tensor
    analysis_hi: Tensor
    synthesis_lo: Tensor
    synthesis_hi: Tensor
    learnable: bool = False

    def __post_init__(self):
        for f in (self.analysis_lo, self.analysis_hi, self.synthesis_lo, self.synthesis_hi):
            if f.ndim != 1 or f.shape[0] % 2:
                raise ShapeError(f"wavelet filters must be 1D with even length, got {f.shape}")
            if f.shape[0] != 2:
                raise ShapeError("only length-2 filter banks are supported")


def haar_filters(dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([INV_SQRT2, INV_SQRT2], dtype=dtype)
    hi = np.array([INV_SQRT2, -INV_SQRT2], dtype=dtype)
    return lo, hi


def haar_bank(dtype=np.float32) -> FilterBank:
    """Orthonormal Haar bank; synthesis equals analysis."""
    lo, hi = haar_filters(dtype)
    lo_t, hi_t = Tensor(lo), Tensor(hi)
    return FilterBank(lo_t, hi_t, lo_t, hi_t, learnable=False)


@dataclass
class WaveletBands:
    lf: Tensor
    hf: Tensor
    size: tuple[int, int] | None = None  # pre-padding (H, W) when an odd dim was padded

    def __post_init__(self):
        if self.lf.ndim != 4 or self.hf.ndim != 4:
            raise ShapeError("wavelet bands must be 4D feature maps")
        n, c, h, w = self.lf.shape
        if self.hf.shape != (n, 3 * c, h, w):
            raise ShapeError(f"hf must be {(n, 3 * c, h, w)} for lf {self.lf.shape}, got {self.hf.shape}")


def _kernels(lo: Tensor, hi: Tensor) -> Tensor:
    """Stack the four separable 2x2 kernels (LL, LH, HL, HH) -> (4, 2, 2)."""
    if lo is hi:
        raise ValueError("low- and high-pass filters must be distinct tensors")
    pairs = ((lo, lo), (lo, hi), (hi, lo), (hi, hi))
    out = np.stack([np.outer(v.data, h.data) for v, h in pairs])

    def bw(g):
        glo = np.zeros_like(lo.data)
        ghi = np.zeros_like(hi.data)
        grads = {id(lo): glo, id(hi): ghi}
        for k, (v, h) in enumerate(pairs):
            grads[id(v)] += g[k] @ h.data
            grads[id(h)] += g[k].T @ v.data
        return glo, ghi

    return Tensor(out, parents=(lo, hi), backward_fn=bw, op="wavelet_kernels")


def _pad_index(n: int) -> np.ndarray:
    idx = np.arange(n)
    if n % 2:
        idx = np.append(idx, n - 2 if n >= 2 else 0)
    return idx


def _pad_trailing(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    ri, ci = _pad_index(h), _pad_index(w)
    if len(ri) == h and len(ci) == w:
        return x
    out = x.data[:, :, ri][:, :, :, ci]

    def bw(g):
        gx = np.zeros((g.shape[0], g.shape[1], h, g.shape[3]), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), ri), g)
        gx2 = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx2, (slice(None), slice(None), slice(None), ci), gx)
        return (gx2,)

    return Tensor(out, parents=(x,), backward_fn=bw, op="reflect_pad")


def _analysis(x: Tensor, kern: Tensor) -> Tensor:
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = np.einsum("ncipjq,kpq->nckij", blocks, kern.data, optimize=True)

    def bw(g):
        gx = np.einsum("nckij,kpq->ncipjq", g, kern.data, optimize=True).reshape(x.shape)
        gk = np.einsum("nckij,ncipjq->kpq", g, blocks, optimize=True)
        return gx, gk

    return Tensor(out, parents=(x, kern), backward_fn=bw, op="dwt")


def _synthesis(coeffs: Tensor, kern: Tensor) -> Tensor:
    n, c, _, h, w = coeffs.shape
    out = np.einsum("nckij,kpq->ncipjq", coeffs.data, kern.data, optimize=True).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        gb = g.reshape(n, c, h, 2, w, 2)
        gc = np.einsum("ncipjq,kpq->nckij", gb, kern.data, optimize=True)
        gk = np.einsum("nckij,ncipjq->kpq", coeffs.data, gb, optimize=True)
        return gc, gk

    return Tensor(out, parents=(coeffs, kern), backward_fn=bw, op="idwt")


def _split(coeffs: Tensor) -> tuple[Tensor, Tensor]:
    n, c, _, h, w = coeffs.shape

    def bw_lf(g):
        out = np.zeros_like(coeffs.data)
        out[:, :, 0] = g
        return (out,)

    def bw_hf(g):
        out = np.zeros_like(coeffs.data)
        out[:, :, 1:] = g.reshape(n, c, 3, h, w)
        return (out,)

    lf = Tensor(coeffs.data[:, :, 0].copy(), parents=(coeffs,), backward_fn=bw_lf, op="band_lf")
    hf = Tensor(coeffs.data[:, :, 1:].reshape(n, 3 * c, h, w), parents=(coeffs,), backward_fn=bw_hf, op="band_hf")
    return lf, hf


def _merge(lf: Tensor, hf: Tensor) -> Tensor:
    n, c, h, w = lf.shape
    out = np.concatenate([lf.data[:, :, None], hf.data.reshape(n, c, 3, h, w)], axis=2)

    def bw(g):
        return g[:, :, 0].copy(), g[:, :, 1:].reshape(n, 3 * c, h, w)

    return Tensor(out, parents=(lf, hf), backward_fn=bw, op="band_merge")


def dwt2(x: Tensor, bank: FilterBank) -> WaveletBands:
    """One analysis level: (N, C, H, W) -> lf (N, C, H/2, W/2), hf (N, 3C, H/2, W/2).

    Odd spatial sizes are reflect-padded by one sample on the trailing edge;
    the original size is kept on the result so :func:`idwt2` can crop.
    """
    if x.ndim != 4:
        raise ShapeError(f"dwt2 expects (N, C, H, W), got {x.shape}")
    if 0 in x.shape:
        raise ShapeError(f"dwt2 got an empty input {x.shape}")
    h, w = x.shape[2:]
    xp = _pad_trailing(x)
    coeffs = _analysis(xp, _kernels(bank.analysis_lo, bank.analysis_hi))
    lf, hf = _split(coeffs)
    return WaveletBands(lf, hf, size=(h, w) if xp is not x else None)


def idwt2(bands: WaveletBands, bank: FilterBank) -> Tensor:
    """Synthesis level inverting :func:`dwt2`; output has twice the band resolution."""
    lf, hf = bands.lf, bands.hf
    if hf.shape[1] != 3 * lf.shape[1]:
        raise ShapeError(f"idwt2: hf has {hf.shape[1]} channels, expected {3 * lf.shape[1]}")
    out = _synthesis(_merge(lf, hf), _kernels(bank.synthesis_lo, bank.synthesis_hi))
    if bands.size is not None:
        h, w = bands.size
        full = out

        def bw(g):
            gfull = np.zeros_like(full.data)
            gfull[:, :, :h, :w] = g
            return (gfull,)

        out = Tensor(full.data[:, :, :h, :w].copy(), parents=(full,), backward_fn=bw, op="crop")
    return out
