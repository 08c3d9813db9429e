"""Reconstruction and high-frequency feature similarity losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, flatten_rows, linear_map, lrelu, matmul, tabs, tsqrt, tsum

DEFAULT_BETA = {"wv4": 10.0, "qb": 15.0, "wv2": 30.0}


@dataclass(frozen=True)
class HfsConfig:
    lam: float = 5e-3
    hidden: int = 512
    dim: int = 128

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.dim < 1 or self.hidden < 1:
            raise ValueError("MLP dims must be >= 1")


@dataclass
class LossBreakdown:
    mae: float
    hfs1: float
    hfs2: float
    beta: float
    total: Tensor

    def as_dict(self) -> dict:
        return {"mae": self.mae, "hfs1": self.hfs1, "hfs2": self.hfs2, "total": self.total.item()}


def mae_loss(fused: Tensor, reference) -> Tensor:
    """Mean absolute error over every element (bands, pixels and batch)."""
    reference = reference if isinstance(reference, Tensor) else Tensor(np.asarray(reference, dtype=fused.dtype))
    if fused.shape != reference.shape:
        raise ShapeError(f"mae_loss: shapes differ {fused.shape} vs {reference.shape}")
    return tabs(fused - reference).mean()


def project(hf: Tensor, params, prefix: str) -> Tensor:
    """Flatten each sample and apply the two-layer projection head ``prefix``."""
    z = flatten_rows(hf)
    w1 = params[f"{prefix}.fc1.w"]
    if z.shape[1] != w1.shape[1]:
        raise ShapeError(f"{prefix}: flattened feature size {z.shape[1]} != MLP input dim {w1.shape[1]}")
    h = lrelu(linear_map(z, w1, params[f"{prefix}.fc1.b"]))
    return linear_map(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def _clip_unit(x: Tensor) -> Tensor:
    inside = np.abs(x.data) <= 1.0

    def bw(g):
        return (np.where(inside, g, 0.0),)

    return Tensor(np.clip(x.data, -1.0, 1.0), parents=(x,), backward_fn=bw, op="clip")


def _unit_rows(z: Tensor, label: str) -> Tensor:
    sq = tsum(z * z, axis=1, keepdims=True)
    zero = np.flatnonzero(sq.data[:, 0] == 0)
    if zero.size:
        raise ValueError(f"cross_corr: row {int(zero[0])} of {label} has zero norm")
    return z / tsqrt(sq)


def cross_corr(z_p: Tensor, z_m: Tensor) -> Tensor:
    """Instance-wise cosine matrix ``c_ij = <z_p[i], z_m[j]> / (|z_p[i]| |z_m[j]|)``."""
    if z_p.ndim != 2 or z_p.shape != z_m.shape:
        raise ShapeError(f"cross_corr needs two (N, K) matrices of equal shape, got {z_p.shape} and {z_m.shape}")
    return _clip_unit(matmul(_unit_rows(z_p, "z_p"), _unit_rows(z_m, "z_m").T))


def hfs_loss(corr: Tensor, lam: float = 5e-3) -> Tensor:
    """Pull the diagonal of ``corr`` to 1 and, weighted by ``lam``, the off-diagonal to 0."""
    n = corr.shape[0]
    if corr.ndim != 2 or corr.shape[1] != n:
        raise ShapeError(f"hfs_loss needs a square matrix, got {corr.shape}")
    if n < 2:
        raise ShapeError("hfs_loss needs a batch of at least 2 samples")
    eye = np.eye(n, dtype=corr.dtype)
    diag = tsum(((corr - 1.0) * eye) ** 2) * (1.0 / n)
    off = tsum((corr * (1.0 - eye)) ** 2) * (lam / (n * (n - 1)))
    return diag + off


def total_loss(record, reference, hfs_cfg: HfsConfig, beta: float, params) -> LossBreakdown:
    """``mae + beta * (hfs1 + hfs2)``; the similarity terms are skipped when ``beta == 0``."""
    mae = mae_loss(record.fused, reference)
    if beta == 0:
        return LossBreakdown(mae.item(), 0.0, 0.0, 0.0, mae)
    terms = []
    for level, (hp, hm) in ((1, (record.hf_p1, record.hf_m1)), (2, (record.hf_p2, record.hf_m2))):
        prefix = f"hfs{level}"
        corr = cross_corr(project(hp, params, prefix), project(hm, params, prefix))
        terms.append(hfs_loss(corr, hfs_cfg.lam))
    total = mae + (terms[0] + terms[1]) * beta
    return LossBreakdown(mae.item(), terms[0].item(), terms[1].item(), float(beta), total)
