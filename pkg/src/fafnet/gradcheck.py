"""Finite-difference checks for every differentiable operator, in float64.

Each case wraps one operator (or the full network plus loss) as a scalar
function of a :class:`ParamStore` holding both weights and inputs, so input
gradients are verified alongside parameter gradients. Non-scalar outputs are
contracted with a fixed random array.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .losses import HfsConfig, cross_corr, hfs_loss, mae_loss, total_loss
from .model import ModelConfig, fafnet_forward, init_fafnet
from .tensor import (
    GradCheckReport,
    ParamStore,
    Tensor,
    apply_activation,
    batch_norm,
    conv2d,
    finite_diff_check,
    linear_map,
    tsum,
)
from .wavelet import FilterBank, WaveletBands, dwt2, idwt2

STEP = 1e-5
# Conv biases feeding batch norm have an exactly zero gradient; the floor keeps
# round-off in the numeric estimate of such coordinates from reading as error.
FLOOR = 1e-5


def _contract(out: Tensor, probe: np.ndarray) -> Tensor:
    return tsum(out * Tensor(probe))


def _store(rng: np.random.Generator, **arrays) -> ParamStore:
    ps = ParamStore(0)
    for name, shape in arrays.items():
        ps.add(name, rng.uniform(-1, 1, shape))
    return ps


def _perturbed_filters(rng) -> tuple[np.ndarray, np.ndarray]:
    s = 1 / np.sqrt(2)
    return np.array([s, s]) + rng.normal(0, 0.1, 2), np.array([-s, s]) + rng.normal(0, 0.1, 2)


def case_conv2d(rng, k: int = 3):
    ps = _store(rng, x=(2, 3, 8, 8), w=(4, 3, k, k), b=(4,))
    probe = rng.normal(size=(2, 4, 8, 8))
    return ps, lambda p: _contract(conv2d(p["x"], p["w"], p["b"]), probe)


def case_batch_norm(rng):
    ps = _store(rng, x=(3, 4, 8, 8), gamma=(4,), beta=(4,))
    ps.add_buffer("mean", np.zeros(4))
    ps.add_buffer("var", np.ones(4))
    probe = rng.normal(size=(3, 4, 8, 8))

    def f(p):
        out = batch_norm(p["x"], p["gamma"], p["beta"], p.buffers["mean"], p.buffers["var"], train=True)
        return _contract(out, probe)

    return ps, f


def case_activation(rng, kind: str):
    ps = _store(rng, x=(2, 3, 8, 8))
    # keep inputs away from the kink so central differences stay valid
    x = ps["x"].data
    x[np.abs(x) < 1e-3] = 0.5
    probe = rng.normal(size=x.shape)
    return ps, lambda p: _contract(apply_activation(p["x"], kind), probe)


def case_linear_map(rng):
    ps = _store(rng, z=(4, 12), w=(5, 12), b=(5,))
    probe = rng.normal(size=(4, 5))
    return ps, lambda p: _contract(linear_map(p["z"], p["w"], p["b"]), probe)


def case_dwt2(rng, size=(8, 8)):
    ps = _store(rng, x=(2, 3) + size)
    lo, hi = _perturbed_filters(rng)
    ps.add("lo", lo)
    ps.add("hi", hi)
    h, w = (size[0] + 1) // 2, (size[1] + 1) // 2
    p_lf, p_hf = rng.normal(size=(2, 3, h, w)), rng.normal(size=(2, 9, h, w))

    def f(p):
        bands = dwt2(p["x"], FilterBank(p["lo"], p["hi"], p["lo"], p["hi"], learnable=True))
        return _contract(bands.lf, p_lf) + _contract(bands.hf, p_hf)

    return ps, f


def case_idwt2(rng):
    ps = _store(rng, lf=(2, 3, 4, 4), hf=(2, 9, 4, 4))
    lo, hi = _perturbed_filters(rng)
    ps.add("lo", lo)
    ps.add("hi", hi)
    probe = rng.normal(size=(2, 3, 8, 8))

    def f(p):
        bank = FilterBank(p["lo"], p["hi"], p["lo"], p["hi"], learnable=True)
        return _contract(idwt2(WaveletBands(p["lf"], p["hf"]), bank), probe)

    return ps, f


def case_mae(rng):
    ps = _store(rng, x=(2, 4, 8, 8))
    ref = rng.uniform(-1, 1, (2, 4, 8, 8))
    return ps, lambda p: mae_loss(p["x"], ref)


def case_hfs(rng):
    ps = _store(rng, zp=(4, 6), zm=(4, 6))
    return ps, lambda p: hfs_loss(cross_corr(p["zp"], p["zm"]), lam=0.3)


def case_full(rng, wavelet: str = "learnable"):
    cfg = ModelConfig(bands=4, channels=2, patch_size=8, wavelet=wavelet, hfs=HfsConfig(hidden=6, dim=5))
    ps = init_fafnet(cfg).astype(np.float64)
    if wavelet == "learnable":
        for name, t in ps.items():
            if name.endswith((".lo", ".hi")):
                t.data += rng.normal(0, 0.05, t.data.shape)
    ms = rng.uniform(-1, 1, (3, 4, 8, 8))
    pan = rng.uniform(-1, 1, (3, 1, 8, 8))
    ref = rng.uniform(-1, 1, (3, 4, 8, 8))
    start = {k: v.copy() for k, v in ps.buffers.items()}

    def f(p):
        for k, v in start.items():
            p.buffers[k][...] = v
        rec = fafnet_forward(ms, pan, p, cfg, train=True)
        return total_loss(rec, ref, cfg.hfs, 10.0, p).total

    return ps, f


CASES: dict[str, Callable] = {
    "conv2d_3x3": case_conv2d,
    "conv2d_1x1": lambda rng: case_conv2d(rng, k=1),
    "batch_norm": case_batch_norm,
    "lrelu": lambda rng: case_activation(rng, "lrelu"),
    "tanh": lambda rng: case_activation(rng, "tanh"),
    "linear_map": case_linear_map,
    "dwt2": case_dwt2,
    "dwt2_odd": lambda rng: case_dwt2(rng, size=(7, 9)),
    "idwt2": case_idwt2,
    "mae_loss": case_mae,
    "hfs_loss": case_hfs,
    "fafnet_total_loss": case_full,
}


def run_case(name: str, n_coords: int = 40, seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    ps, f = CASES[name](rng)
    return finite_diff_check(f, ps, step=STEP, n_coords=n_coords, rng=rng, floor=FLOOR)


def run_suite(n_coords: int = 40, seed: int = 0) -> dict[str, GradCheckReport]:
    return {name: run_case(name, n_coords, seed) for name in CASES}
