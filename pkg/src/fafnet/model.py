"""The frequency-aware fusion network.

Layout of the parameter store (``B`` bands, ``C`` channels)::

    {ms,pan}.fab1   DWT (image) -> cb_l: B|1 -> C,  cb_h: 3B|3 -> 3C
    {ms,pan}.fab2   DWT (F^L1)  -> cb_l: C -> C,    cb_h: 3C -> 3C
    ffb2            fuse 1x1: 6C -> 3C, cb_h: 3C -> 3C, cb_l: C -> C, IDWT
    ffb1            fuse 1x1: 6C -> 3C, cb_h: 3C -> 3C, IDWT
    recon           (depth-1) x [conv C->C, BN, LReLU], conv C->B, tanh
    hfs1, hfs2      two-layer MLP projection heads for the similarity loss

The level-2 reconstruction is used directly as the low-frequency input of
the level-1 inverse transform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimensionOverflowError, FormatError, ShapeError, TruncatedPayloadError
from .losses import HfsConfig
from .tensor import LRELU_SLOPE, ParamStore, Tensor, apply_activation, batch_norm, concat_channels, conv2d
from .wavelet import FilterBank, WaveletBands, dwt2, haar_bank, haar_filters, idwt2

WAVELET_MODES = ("learnable", "fixed_haar")


@dataclass(frozen=True)
class ModelConfig:
    bands: int = 4
    channels: int = 32
    cb_depth: int = 2
    wavelet: str = "learnable"
    seed: int = 0
    patch_size: int = 64
    hfs: HfsConfig = field(default_factory=HfsConfig)

    def __post_init__(self):
        if self.bands < 1 or self.channels < 1 or self.cb_depth < 1:
            raise ValueError("bands, channels and cb_depth must all be >= 1")
        if self.wavelet not in WAVELET_MODES:
            raise ValueError(f"wavelet mode must be one of {WAVELET_MODES}, got {self.wavelet!r}")
        if self.patch_size % 4:
            raise ValueError("patch_size must be divisible by 4")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class ForwardRecord:
    fused: Tensor
    hf_p1: Tensor
    hf_m1: Tensor
    hf_p2: Tensor
    hf_m2: Tensor


# ---------------------------------------------------------------------------
# initialization

_LRELU_GAIN = np.sqrt(2.0 / (1.0 + LRELU_SLOPE**2))


def _uniform(store: ParamStore, shape, fan_in: int) -> np.ndarray:
    bound = _LRELU_GAIN * np.sqrt(3.0 / fan_in)
    return store.rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _add_conv(store, name, cin, cout, k):
    store.add(f"{name}.w", _uniform(store, (cout, cin, k, k), cin * k * k))
    store.add(f"{name}.b", np.zeros(cout, np.float32))


def _add_bn(store, name, c):
    store.add(f"{name}.gamma", np.ones(c, np.float32))
    store.add(f"{name}.beta", np.zeros(c, np.float32))
    store.add_buffer(f"{name}.mean", np.zeros(c, np.float32))
    store.add_buffer(f"{name}.var", np.ones(c, np.float32))


def _add_cb(store, prefix, cin, cout, depth):
    for i in range(depth):
        _add_conv(store, f"{prefix}.{i}.conv", cin if i == 0 else cout, cout, 3)
        _add_bn(store, f"{prefix}.{i}.bn", cout)


def _add_wavelet(store, prefix, cfg):
    if cfg.wavelet == "learnable":
        lo, hi = haar_filters(np.float32)
        store.add(f"{prefix}.lo", lo)
        store.add(f"{prefix}.hi", hi)


def _add_linear(store, name, din, dout):
    store.add(f"{name}.w", _uniform(store, (dout, din), din))
    store.add(f"{name}.b", np.zeros(dout, np.float32))


def hfs_input_dims(cfg: ModelConfig) -> tuple[int, int]:
    """Flattened HF feature sizes feeding the level-1 and level-2 projection heads."""
    c3 = 3 * cfg.channels
    return c3 * (cfg.patch_size // 2) ** 2, c3 * (cfg.patch_size // 4) ** 2


def init_fafnet(cfg: ModelConfig) -> ParamStore:
    """Create every learnable array for ``cfg`` deterministically from ``cfg.seed``.

    Wavelet filters draw no random numbers, so the learnable and fixed-Haar
    configurations share all other initial values.
    """
    store = ParamStore(cfg.seed)
    c, d = cfg.channels, cfg.cb_depth
    for branch, cin in (("ms", cfg.bands), ("pan", 1)):
        _add_wavelet(store, f"{branch}.fab1.dwt", cfg)
        _add_cb(store, f"{branch}.fab1.cb_l", cin, c, d)
        _add_cb(store, f"{branch}.fab1.cb_h", 3 * cin, 3 * c, d)
        _add_wavelet(store, f"{branch}.fab2.dwt", cfg)
        _add_cb(store, f"{branch}.fab2.cb_l", c, c, d)
        _add_cb(store, f"{branch}.fab2.cb_h", 3 * c, 3 * c, d)
    for level in (2, 1):
        _add_conv(store, f"ffb{level}.fuse", 6 * c, 3 * c, 1)
        _add_cb(store, f"ffb{level}.cb_h", 3 * c, 3 * c, d)
        if level == 2:
            _add_cb(store, "ffb2.cb_l", c, c, d)
        _add_wavelet(store, f"ffb{level}.idwt", cfg)
    for i in range(d - 1):
        _add_conv(store, f"recon.{i}.conv", c, c, 3)
        _add_bn(store, f"recon.{i}.bn", c)
    _add_conv(store, f"recon.{d - 1}.conv", c, cfg.bands, 3)
    for level, din in zip((1, 2), hfs_input_dims(cfg)):
        _add_linear(store, f"hfs{level}.fc1", din, cfg.hfs.hidden)
        _add_linear(store, f"hfs{level}.fc2", cfg.hfs.hidden, cfg.hfs.dim)
    return store


def is_wavelet_param(name: str) -> bool:
    return name.endswith((".dwt.lo", ".dwt.hi", ".idwt.lo", ".idwt.hi"))


# ---------------------------------------------------------------------------
# forward pass


def _dtype(params: ParamStore):
    return next(iter(params.items()))[1].dtype


def _bank(params: ParamStore, cfg: ModelConfig, prefix: str) -> FilterBank:
    if cfg.wavelet == "fixed_haar":
        return haar_bank(_dtype(params))
    lo, hi = params[f"{prefix}.lo"], params[f"{prefix}.hi"]
    return FilterBank(lo, hi, lo, hi, learnable=True)


def conv_block(x: Tensor, params: ParamStore, prefix: str, depth: int, train: bool) -> Tensor:
    for i in range(depth):
        p = f"{prefix}.{i}"
        x = conv2d(x, params[f"{p}.conv.w"], params[f"{p}.conv.b"])
        x = batch_norm(
            x,
            params[f"{p}.bn.gamma"],
            params[f"{p}.bn.beta"],
            params.buffers[f"{p}.bn.mean"],
            params.buffers[f"{p}.bn.var"],
            train,
        )
        x = apply_activation(x, "lrelu")
    return x


def fab_forward(x: Tensor, level: int, branch: str, params: ParamStore, cfg: ModelConfig, train: bool = False):
    """Frequency-aware block: DWT then parallel LF / HF convolutional blocks.

    Returns ``(F^L, F^H)`` with ``C`` and ``3C`` channels at half resolution.
    """
    if branch not in ("ms", "pan") or level not in (1, 2):
        raise ValueError(f"bad block selector branch={branch!r} level={level!r}")
    expected = (cfg.bands if branch == "ms" else 1) if level == 1 else cfg.channels
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"{branch} FAB{level} expects {expected} input channels, got shape {x.shape}")
    prefix = f"{branch}.fab{level}"
    bands = dwt2(x, _bank(params, cfg, f"{prefix}.dwt"))
    f_l = conv_block(bands.lf, params, f"{prefix}.cb_l", cfg.cb_depth, train)
    f_h = conv_block(bands.hf, params, f"{prefix}.cb_h", cfg.cb_depth, train)
    return f_l, f_h


def ffb_forward(
    hf_p: Tensor, hf_m: Tensor, lf_in: Tensor, level: int, params: ParamStore, cfg: ModelConfig, train: bool = False
) -> Tensor:
    """Frequency fusion block: fuse HF features of both branches, then invert the DWT.

    At level 2 ``lf_in`` is the MS branch's level-2 LF feature and passes
    through its own convolutional block; at level 1 ``lf_in`` is the level-2
    reconstruction and is used as-is.
    """
    c = cfg.channels
    if hf_p.shape != hf_m.shape or hf_p.ndim != 4 or hf_p.shape[1] != 3 * c:
        raise ShapeError(f"FFB{level}: HF inputs must both be (N, {3 * c}, h, w), got {hf_p.shape} and {hf_m.shape}")
    if lf_in.ndim != 4 or lf_in.shape[1] != c or lf_in.shape[2:] != hf_p.shape[2:]:
        raise ShapeError(f"FFB{level}: LF input {lf_in.shape} does not match HF {hf_p.shape}")
    prefix = f"ffb{level}"
    fused = conv2d(concat_channels(hf_p, hf_m), params[f"{prefix}.fuse.w"], params[f"{prefix}.fuse.b"])
    f_h = conv_block(fused, params, f"{prefix}.cb_h", cfg.cb_depth, train)
    f_l = conv_block(lf_in, params, "ffb2.cb_l", cfg.cb_depth, train) if level == 2 else lf_in
    return idwt2(WaveletBands(f_l, f_h), _bank(params, cfg, f"{prefix}.idwt"))


def reconstruct(x: Tensor, params: ParamStore, cfg: ModelConfig, train: bool = False) -> Tensor:
    d = cfg.cb_depth
    x = conv_block(x, params, "recon", d - 1, train) if d > 1 else x
    x = conv2d(x, params[f"recon.{d - 1}.conv.w"], params[f"recon.{d - 1}.conv.b"])
    return apply_activation(x, "tanh")


def fafnet_forward(ms_up, pan, params: ParamStore, cfg: ModelConfig, train: bool = False) -> ForwardRecord:
    """Fuse an upsampled MS batch (N, B, S, T) with a PAN batch (N, 1, S, T).

    Inputs are expected in [-1, 1]; the output lies strictly inside (-1, 1).
    """
    ms_up = ms_up if isinstance(ms_up, Tensor) else Tensor(ms_up)
    pan = pan if isinstance(pan, Tensor) else Tensor(pan)
    if ms_up.ndim != 4 or pan.ndim != 4:
        raise ShapeError(f"inputs must be 4D, got {ms_up.shape} and {pan.shape}")
    n, b, s, t = ms_up.shape
    if b != cfg.bands or pan.shape != (n, 1, s, t):
        raise ShapeError(f"expected MS (N, {cfg.bands}, S, T) and PAN (N, 1, S, T), got {ms_up.shape} and {pan.shape}")
    if s % 4 or t % 4:
        raise ShapeError(f"spatial size {s}x{t} must be divisible by 4 for two wavelet levels")

    fp_l1, fp_h1 = fab_forward(pan, 1, "pan", params, cfg, train)
    fm_l1, fm_h1 = fab_forward(ms_up, 1, "ms", params, cfg, train)
    _, fp_h2 = fab_forward(fp_l1, 2, "pan", params, cfg, train)
    fm_l2, fm_h2 = fab_forward(fm_l1, 2, "ms", params, cfg, train)
    f2 = ffb_forward(fp_h2, fm_h2, fm_l2, 2, params, cfg, train)
    f1 = ffb_forward(fp_h1, fm_h1, f2, 1, params, cfg, train)
    fused = reconstruct(f1, params, cfg, train)
    return ForwardRecord(fused, fp_h1, fm_h1, fp_h2, fm_h2)


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"FAFCKPT1"
_CKPT_HEADER = struct.Struct("<IIIBqdIIId")
_MAX_RANK = 8


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    max_value: float
    state: dict[str, np.ndarray] = field(default_factory=dict)


def _write_entries(fh, entries):
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write parameters, batch-norm buffers and optional trainer state.

    Layout (little-endian): magic ``FAFCKPT1``; header ``B, C, cb_depth`` (u32),
    wavelet mode (u8: 0 learnable, 1 fixed), seed (i64), max_value (f64),
    patch_size, hfs hidden, hfs dim (u32), hfs lambda (f64); then three
    sections (parameters, buffers, state), each a u32 count followed by
    entries ``(u32 name length, UTF-8 name, u32 rank, u64 dims, f32 payload)``.
    """
    cfg = ckpt.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(
            _CKPT_HEADER.pack(
                cfg.bands,
                cfg.channels,
                cfg.cb_depth,
                WAVELET_MODES.index(cfg.wavelet),
                cfg.seed,
                float(ckpt.max_value),
                cfg.patch_size,
                cfg.hfs.hidden,
                cfg.hfs.dim,
                cfg.hfs.lam,
            )
        )
        _write_entries(fh, [(k, t.data) for k, t in ckpt.params.items()])
        _write_entries(fh, list(ckpt.params.buffers.items()))
        _write_entries(fh, list(ckpt.state.items()))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"truncated payload while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def _read_entries(r: _Reader, section: str):
    (count,) = r.unpack("<I", f"{section} count")
    out = []
    for _ in range(count):
        (nlen,) = r.unpack("<I", f"{section} name length")
        if nlen > 4096:
            raise FormatError(f"{section}: implausible name length {nlen}")
        try:
            name = r.take(nlen, f"{section} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{section}: name is not valid UTF-8") from exc
        (rank,) = r.unpack("<I", f"rank of {name}")
        if rank > _MAX_RANK:
            raise DimensionOverflowError(f"{name}: rank {rank} exceeds {_MAX_RANK}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        size = 1
        for d in dims:
            size *= d
        if size * 4 > len(r.buf):
            raise DimensionOverflowError(f"{name}: dims {dims} exceed the file size")
        arr = np.frombuffer(r.take(size * 4, f"payload of {name}"), dtype="<f4").reshape(dims)
        out.append((name, arr.astype(np.float32)))
    return out


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a FAFCKPT1 checkpoint")
    r = _Reader(buf)
    r.pos = len(CKPT_MAGIC)
    b, c, depth, mode, seed, max_value, patch, hidden, dim, lam = r.unpack(_CKPT_HEADER.format, "header")
    if mode >= len(WAVELET_MODES):
        raise FormatError(f"unknown wavelet mode code {mode}")
    try:
        cfg = ModelConfig(b, c, depth, WAVELET_MODES[mode], seed, patch, HfsConfig(lam=lam, hidden=hidden, dim=dim))
        store = ParamStore(seed)
        for name, arr in _read_entries(r, "parameters"):
            store.add(name, arr)
        for name, arr in _read_entries(r, "buffers"):
            store.add_buffer(name, arr)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent checkpoint ({exc})") from exc
    state = dict(_read_entries(r, "state"))
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return Checkpoint(cfg, store, max_value, state)
