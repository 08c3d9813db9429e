"""Pansharpening quality indexes and error/spectrum diagnostics.

All functions take ``(H, W, B)`` arrays (or :class:`~fafnet.data.Image`) and
compute in float64. Block-based indexes tile the image with non-overlapping
``block x block`` windows; when the size is not a multiple of the block the
last window is aligned to the far edge so every pixel is covered.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

LAPLACIAN = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=np.float64)


def _arr(x) -> np.ndarray:
    data = getattr(x, "data", x)
    data = np.asarray(data, dtype=np.float64)
    return data[:, :, None] if data.ndim == 2 else data


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shapes differ {a.shape} vs {b.shape}")


def _tile_starts(n: int, block: int) -> list[int]:
    if block >= n:
        return [0]
    starts = list(range(0, n - block + 1, block))
    if starts[-1] + block < n:
        starts.append(n - block)
    return starts


def _tiles(h: int, w: int, block: int | None):
    if block is None:
        yield slice(0, h), slice(0, w)
        return
    bh, bw = min(block, h), min(block, w)
    for i in _tile_starts(h, bh):
        for j in _tile_starts(w, bw):
            yield slice(i, i + bh), slice(j, j + bw)


def _tiny(*means) -> float:
    return 1e-12 * max(1.0, *(m * m for m in means))


# ---------------------------------------------------------------------------
# universal image quality index


def _uiqi_block(a: np.ndarray, b: np.ndarray) -> float:
    ma, mb = a.mean(), b.mean()
    da, db = a - ma, b - mb
    va, vb = (da * da).mean(), (db * db).mean()
    cov = (da * db).mean()
    eps = _tiny(ma, mb)
    if va <= eps and vb <= eps:
        return 1.0 if abs(ma - mb) <= math.sqrt(eps) else 0.0
    if va <= eps or vb <= eps:
        return 0.0
    mean_energy = ma * ma + mb * mb
    if mean_energy <= eps:
        return float(2 * cov / (va + vb))
    return float(4 * cov * ma * mb / ((va + vb) * mean_energy))


def uiqi(a, b, block: int | None = 32) -> float:
    """Wang-Bovik quality index, averaged over tiles (``block=None`` for one global window).

    Degenerate windows: both variances zero -> 1 if the means agree, else 0;
    exactly one variance zero -> 0; both means zero -> correlation-times-contrast term.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b, "uiqi")
    if a.ndim == 1:
        a, b = a[None], b[None]
    if block is not None and block < 2:
        raise ValueError("block must be >= 2")
    vals = [_uiqi_block(a[r, c], b[r, c]) for r, c in _tiles(*a.shape, block)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# reduced-resolution indexes


def spectral_angles(ref, fused) -> tuple[np.ndarray, int]:
    """Per-pixel spectral angles in degrees for pixels where both vectors are nonzero."""
    r, f = _arr(ref), _arr(fused)
    _same_shape(r, f, "sam")
    r, f = r.reshape(-1, r.shape[2]), f.reshape(-1, f.shape[2])
    nr, nf = np.linalg.norm(r, axis=1), np.linalg.norm(f, axis=1)
    ok = (nr > 0) & (nf > 0)
    # half-angle form stays accurate near 0 and 180 degrees, unlike arccos
    u, v = r[ok] / nr[ok, None], f[ok] / nf[ok, None]
    ang = 2 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    return np.degrees(ang), int((~ok).sum())


def sam(ref, fused) -> float:
    """Mean spectral angle in degrees; zero-vector pixels are skipped."""
    if _arr(ref).shape[2] < 2:
        raise ValueError("sam needs at least two bands")
    angles, skipped = spectral_angles(ref, fused)
    if angles.size == 0:
        raise ValueError("sam: every pixel has a zero spectral vector")
    if skipped:
        warnings.warn(f"sam: skipped {skipped} zero-vector pixels", RuntimeWarning, stacklevel=2)
    return float(angles.mean())


def ergas(ref, fused, ratio: float = 4) -> float:
    r, f = _arr(ref), _arr(fused)
    _same_shape(r, f, "ergas")
    mu = r.mean(axis=(0, 1))
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise ValueError(f"ergas: reference band {int(zero[0])} has zero mean")
    rmse = np.sqrt(((r - f) ** 2).mean(axis=(0, 1)))
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / mu) ** 2)))


def scc(ref, fused) -> float:
    """Mean per-band correlation of Laplacian-filtered images."""
    r, f = _arr(ref), _arr(fused)
    _same_shape(r, f, "scc")
    vals = []
    for b in range(r.shape[2]):
        hr = ndimage.correlate(r[:, :, b], LAPLACIAN, mode="reflect")
        hf = ndimage.correlate(f[:, :, b], LAPLACIAN, mode="reflect")
        hr, hf = hr - hr.mean(), hf - hf.mean()
        den = math.sqrt((hr * hr).sum() * (hf * hf).sum())
        if den <= 1e-12 * max(1.0, np.abs(r[:, :, b]).max() ** 2) * hr.size:
            warnings.warn(f"scc: band {b} has no high-frequency content, skipped", RuntimeWarning, stacklevel=2)
            continue
        vals.append((hr * hf).sum() / den)
    if not vals:
        raise ValueError("scc: every band was skipped")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# hypercomplex Q2^n


def hc_conj(x: np.ndarray) -> np.ndarray:
    out = -x
    out[..., 0] = x[..., 0]
    return out


def hc_mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cayley-Dickson product over the last axis: (a, b)(c, d) = (ac - d*b, da + bc*)."""
    n = x.shape[-1]
    if n == 1:
        return x * y
    h = n // 2
    a, b = x[..., :h], x[..., h:]
    c, d = y[..., :h], y[..., h:]
    return np.concatenate([hc_mul(a, c) - hc_mul(hc_conj(d), b), hc_mul(d, a) + hc_mul(b, hc_conj(c))], axis=-1)


def _q2n_block(z: np.ndarray, zh: np.ndarray) -> float:
    mz, mh = z.mean(axis=0), zh.mean(axis=0)
    dz, dh = z - mz, zh - mh
    vz, vh = (dz * dz).sum(axis=1).mean(), (dh * dh).sum(axis=1).mean()
    cov = hc_mul(dz, hc_conj(dh)).mean(axis=0)
    nz, nh = float(np.linalg.norm(mz)), float(np.linalg.norm(mh))
    eps = _tiny(nz, nh)
    if vz <= eps and vh <= eps:
        return 1.0 if np.linalg.norm(mz - mh) <= math.sqrt(eps) else 0.0
    if vz <= eps or vh <= eps:
        return 0.0
    mean_energy = nz * nz + nh * nh
    if mean_energy <= eps:
        return float(2 * np.linalg.norm(cov) / (vz + vh))
    return float(4 * np.linalg.norm(cov) * nz * nh / ((vz + vh) * mean_energy))


def q2n(ref, fused, block: int = 32) -> float:
    """Hypercomplex quality index for 2^n-band images (Q4, Q8), averaged over tiles."""
    r, f = _arr(ref), _arr(fused)
    _same_shape(r, f, "q2n")
    nb = r.shape[2]
    if nb < 1 or nb & (nb - 1):
        raise ValueError(f"q2n needs a power-of-two band count, got {nb}")
    vals = []
    for rs, cs in _tiles(r.shape[0], r.shape[1], block):
        vals.append(_q2n_block(r[rs, cs].reshape(-1, nb), f[rs, cs].reshape(-1, nb)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# full-resolution indexes


def qnr_from(d_lambda: float, d_s: float, alpha: float = 1.0, beta: float = 1.0) -> float:
    return (1.0 - d_lambda) ** alpha * (1.0 - d_s) ** beta


def d_lambda(fused, ms, block: int = 32, p: float = 1.0) -> float:
    f, m = _arr(fused), _arr(ms)
    nb = f.shape[2]
    if nb < 2:
        return 0.0
    acc = 0.0
    for b in range(nb):
        for c in range(nb):
            if b != c:
                diff = uiqi(f[:, :, b], f[:, :, c], block) - uiqi(m[:, :, b], m[:, :, c], block)
                acc += abs(diff) ** p
    return float((acc / (nb * (nb - 1))) ** (1.0 / p))


def d_s(fused, ms, pan, lr_pan, block: int = 32, q: float = 1.0) -> float:
    f, m = _arr(fused), _arr(ms)
    pn, lp = _arr(pan)[:, :, 0], _arr(lr_pan)[:, :, 0]
    acc = 0.0
    for b in range(f.shape[2]):
        diff = uiqi(f[:, :, b], pn, block) - uiqi(m[:, :, b], lp, block)
        acc += abs(diff) ** q
    return float((acc / f.shape[2]) ** (1.0 / q))


def qnr_suite(fused, ms, pan, lr_pan, block: int = 32) -> tuple[float, float, float]:
    """Return ``(D_lambda, D_s, QNR)`` with all exponents equal to 1."""
    f, m, pn, lp = _arr(fused), _arr(ms), _arr(pan), _arr(lr_pan)
    if f.shape[:2] != pn.shape[:2]:
        raise ValueError(f"fused {f.shape[:2]} and PAN {pn.shape[:2]} must share a grid")
    if m.shape[:2] != lp.shape[:2]:
        raise ValueError(f"MS {m.shape[:2]} and degraded PAN {lp.shape[:2]} must share a grid")
    if f.shape[2] != m.shape[2]:
        raise ValueError("fused and MS band counts differ")
    if pn.shape[0] <= lp.shape[0] or pn.shape[0] % lp.shape[0] or pn.shape[1] % lp.shape[1]:
        raise ValueError(f"PAN {pn.shape[:2]} is not an integer upscale of the MS grid {lp.shape[:2]}")
    dl = d_lambda(f, m, block)
    ds = d_s(f, m, pn, lp, block)
    return dl, ds, qnr_from(dl, ds)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    name: str = ""
    sam_deg: float | None = None
    ergas: float | None = None
    q2n: float | None = None
    scc: float | None = None
    d_lambda: float | None = None
    d_s: float | None = None
    qnr: float | None = None


METRIC_FIELDS = ("sam_deg", "ergas", "q2n", "scc", "d_lambda", "d_s", "qnr")


def reduced_report(ref, fused, ratio: int = 4, block: int = 32, name: str = "") -> MetricsReport:
    r = _arr(ref)
    q = q2n(ref, fused, block) if (r.shape[2] & (r.shape[2] - 1)) == 0 else None
    return MetricsReport(name, sam(ref, fused), ergas(ref, fused, ratio), q, scc(ref, fused))


def full_report(fused, ms, pan, lr_pan, block: int = 32, name: str = "") -> MetricsReport:
    dl, ds, qn = qnr_suite(fused, ms, pan, lr_pan, block)
    return MetricsReport(name, d_lambda=dl, d_s=ds, qnr=qn)


def aggregate(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of every populated index."""
    out = {}
    for key in METRIC_FIELDS:
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            out[key] = (float(np.mean(vals)), float(np.std(vals)))
    return out


def format_reports(reports: list[MetricsReport]) -> str:
    lines = []
    for r in reports:
        parts = [f"{k}={getattr(r, k):.4f}" for k in METRIC_FIELDS if getattr(r, k) is not None]
        lines.append(f"{r.name}: " + " ".join(parts))
    agg = aggregate(reports)
    lines.append("mean: " + " ".join(f"{k}={m:.4f}±{s:.4f}" for k, (m, s) in agg.items()))
    return "\n".join(lines) + "\n"


def reports_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(MetricsReport)]
    writer.writerow(names)
    for r in reports:
        writer.writerow(["" if v is None else repr(v) for v in asdict(r).values()])
    for label, idx in (("mean", 0), ("std", 1)):
        agg = aggregate(reports)
        writer.writerow([label] + [repr(agg[k][idx]) if k in agg else "" for k in names[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# diagnostics


def spectrum_map(img) -> np.ndarray:
    """8-bit log-magnitude of the centred 2D FFT of the band-mean image."""
    x = _arr(img).mean(axis=2)
    mag = np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(x))))
    lo, hi = mag.min(), mag.max()
    scaled = np.zeros_like(mag) if hi == lo else (mag - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)


def error_map(fused, ref) -> np.ndarray:
    f, r = _arr(fused), _arr(ref)
    _same_shape(f, r, "error_map")
    return np.abs(f - r).mean(axis=2)


def colorize(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Map non-negative values to RGB along black -> red -> yellow -> white."""
    vmax = float(values.max()) if vmax is None else float(vmax)
    t = np.zeros_like(values, dtype=np.float64) if vmax <= 0 else np.clip(values / vmax, 0.0, 1.0)
    rgb = np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def diagnostics(fused, ref, vmax: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(spectrum map of fused, colour absolute-error map)``."""
    return spectrum_map(fused), colorize(error_map(fused, ref), vmax)


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes())
