"""Reduced-resolution simulation, resampling, patching and image I/O.

Images are ``(H, W, B)`` arrays of digital numbers. Single-band PAN images
keep a trailing band axis of length 1.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import BadMagicError, DimensionOverflowError, ManifestError, ShapeError, TruncatedPayloadError

IMG_MAGIC = b"FAFIMG1"
_IMG_HEADER = struct.Struct("<IIIH")
_MAX_ELEMENTS = 1 << 32


@dataclass
class Image:
    data: np.ndarray
    bit_depth: int = 11
    sensor: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"image data must be (H, W, B) with positive dims, got {np.shape(self.data)}")
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def max_value(self) -> float:
        return float(2**self.bit_depth - 1)

    def with_data(self, data) -> "Image":
        return Image(data, self.bit_depth, self.sensor)


@dataclass
class DatasetConfig:
    ratio: int = 4
    gaussian_size: int = 5
    sigma: float = 1.0
    ms_patch: int = 16
    pan_patch: int = 64
    stride: int = 16
    splits: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1})
    bit_depth: int = 11
    seed: int = 0

    def __post_init__(self):
        if self.pan_patch != self.ratio * self.ms_patch:
            raise ValueError(f"PAN patch {self.pan_patch} must equal ratio {self.ratio} x MS patch {self.ms_patch}")


# ---------------------------------------------------------------------------
# Wald's protocol


def gaussian_kernel5(sigma: float, size: int = 5) -> np.ndarray:
    """Sampled isotropic Gaussian on a ``size x size`` grid, normalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Filter each band of an (H, W, B) array with reflect boundary handling."""
    img = np.asarray(img, dtype=np.float64)
    out = np.empty_like(img)
    for b in range(img.shape[2]):
        out[:, :, b] = ndimage.correlate(img[:, :, b], kernel, mode="reflect")
    return out


def decimate(img: np.ndarray, ratio: int) -> np.ndarray:
    """Keep every ``ratio``-th sample, starting at the cell centre ``ratio // 2``."""
    off = ratio // 2
    return img[off::ratio, off::ratio]


def degrade(img: Image, cfg: DatasetConfig) -> Image:
    if img.shape[0] % cfg.ratio or img.shape[1] % cfg.ratio:
        raise ShapeError(f"image {img.shape[:2]} is not divisible by ratio {cfg.ratio}")
    k = gaussian_kernel5(cfg.sigma, cfg.gaussian_size)
    return img.with_data(decimate(blur(img.data, k), cfg.ratio))


def degrade_wald(ms: Image, pan: Image, cfg: DatasetConfig) -> tuple[Image, Image, Image]:
    """Return ``(lr_ms, lr_pan, reference)``; the reference is ``ms`` itself."""
    r = cfg.ratio
    if pan.shape[0] != r * ms.shape[0] or pan.shape[1] != r * ms.shape[1]:
        raise ShapeError(f"PAN {pan.shape[:2]} must be {r}x the MS size {ms.shape[:2]}")
    return degrade(ms, cfg), degrade(pan, cfg), ms


# ---------------------------------------------------------------------------
# Catmull-Rom upsampling


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Kernel weights for the four taps at offsets -1, 0, 1, 2 from floor(u)."""
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    w = np.where(
        d <= 1,
        (a + 2) * d**3 - (a + 3) * d**2 + 1,
        a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a,
    )
    return w


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    # output sample x sits at input coordinate (x - factor // 2) / factor, the
    # same phase used by decimate(), so degrade followed by upsample stays registered
    x = np.arange(n_in * factor)
    u = (x - factor // 2) / factor
    base = np.floor(u).astype(int)
    w = _cubic_weights(u - base)
    m = np.zeros((n_in * factor, n_in))
    last = n_in - 1
    for tap in range(4):
        idx = base - 1 + tap
        inside = (idx >= 0) & (idx <= last)
        np.add.at(m, (x[inside], idx[inside]), w[inside, tap])
        # beyond an edge e use the point reflection 2 f(e) - f(2e - idx): exact for ramps
        for edge, mask in ((0, idx < 0), (last, idx > last)):
            if not mask.any():
                continue
            mirror = np.clip(2 * edge - idx[mask], 0, last)
            np.add.at(m, (x[mask], np.full(mask.sum(), edge)), 2 * w[mask, tap])
            np.add.at(m, (x[mask], mirror), -w[mask, tap])
    return m


def bicubic_up(img: Image, factor: int) -> Image:
    """Separable Catmull-Rom (a = -0.5) upsampling by an integer factor.

    Samples beyond the border are point-reflected, so constants and linear
    ramps are reproduced exactly up to the edges.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return img.with_data(img.data.copy())
    h, w, _ = img.shape
    mr, mc = _interp_matrix(h, factor), _interp_matrix(w, factor)
    data = np.einsum("ih,hwb,jw->ijb", mr, np.asarray(img.data, dtype=np.float64), mc, optimize=True)
    return img.with_data(data)


# ---------------------------------------------------------------------------
# normalization


def normalize(img: Image) -> np.ndarray:
    """Digital numbers -> [-1, 1] as a (1, B, H, W) float32 feature map."""
    y = 2.0 * np.asarray(img.data, dtype=np.float64) / img.max_value - 1.0
    return y.transpose(2, 0, 1)[None].astype(np.float32)


def denormalize(fmap: np.ndarray, bit_depth: int) -> np.ndarray:
    """Inverse of :func:`normalize` for a (B, H, W) or (1, B, H, W) map, clamped to range."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim == 4:
        fmap = fmap[0]
    top = 2**bit_depth - 1
    return np.clip((fmap + 1.0) * 0.5 * top, 0.0, top).transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# patches


@dataclass
class PatchRecord:
    pair: str
    row: int  # top-left corner on the low-resolution MS grid
    col: int
    ms: np.ndarray
    pan: np.ndarray
    ref: np.ndarray
    ratio: int = 4

    @property
    def pan_origin(self) -> tuple[int, int]:
        return self.ratio * self.row, self.ratio * self.col


def extract_patches(lr_ms: Image, lr_pan: Image, ref: Image, cfg: DatasetConfig, pair: str = "") -> list[PatchRecord]:
    """Aligned (MS, PAN, reference) triplets on a regular grid, row-major order."""
    r, p, s = cfg.ratio, cfg.ms_patch, cfg.stride
    h, w, _ = lr_ms.shape
    if lr_pan.shape[:2] != (r * h, r * w) or ref.shape[:2] != (r * h, r * w):
        raise ShapeError(f"PAN {lr_pan.shape[:2]} / reference {ref.shape[:2]} must be {r}x MS {lr_ms.shape[:2]}")
    if h < p or w < p:
        raise ShapeError(f"image {h}x{w} is smaller than the {p}x{p} patch")
    out = []
    for i in range(0, h - p + 1, s):
        for j in range(0, w - p + 1, s):
            out.append(
                PatchRecord(
                    pair,
                    i,
                    j,
                    lr_ms.data[i : i + p, j : j + p].copy(),
                    lr_pan.data[r * i : r * (i + p), r * j : r * (j + p)].copy(),
                    ref.data[r * i : r * (i + p), r * j : r * (j + p)].copy(),
                    r,
                )
            )
    return out


def shuffled(records: list, seed: int) -> list:
    order = np.random.default_rng(seed).permutation(len(records))
    return [records[k] for k in order]


def patch_batch(patches: list[PatchRecord], bit_depth: int, ratio: int = 4):
    """Stack patches into normalized network inputs ``(ms_up, pan, ref)``."""
    ms_up, pan, ref = [], [], []
    for rec in patches:
        ms_up.append(normalize(bicubic_up(Image(rec.ms, bit_depth), ratio))[0])
        pan.append(normalize(Image(rec.pan, bit_depth))[0])
        ref.append(normalize(Image(rec.ref, bit_depth))[0])
    return np.stack(ms_up), np.stack(pan), np.stack(ref)


# ---------------------------------------------------------------------------
# FAFIMG1 container


def write_image(path, img: Image) -> None:
    """Magic ``FAFIMG1``, u32 H, W, B, u16 bit depth, band-sequential float32 rows."""
    h, w, b = img.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(_IMG_HEADER.pack(h, w, b, img.bit_depth))
        fh.write(np.ascontiguousarray(img.data.transpose(2, 0, 1), dtype="<f4").tobytes())


def read_image(path) -> Image:
    buf = Path(path).read_bytes()
    if buf[: len(IMG_MAGIC)] != IMG_MAGIC:
        raise BadMagicError(f"{path}: not a FAFIMG1 image")
    start = len(IMG_MAGIC)
    if len(buf) < start + _IMG_HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    h, w, b, depth = _IMG_HEADER.unpack_from(buf, start)
    count = h * w * b
    if count == 0 or count > _MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: unsupported dimensions {h}x{w}x{b}")
    body = start + _IMG_HEADER.size
    need = count * 4
    if len(buf) - body < need:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(buf) - body} of {need} bytes)")
    if len(buf) - body > need:
        raise DimensionOverflowError(f"{path}: {len(buf) - body - need} bytes beyond the declared dimensions")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=body).reshape(b, h, w).transpose(1, 2, 0)
    return Image(data.astype(np.float32), depth)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# manifest

_ROLES = ("ms", "pan", "lr_ms", "lr_pan", "reference")


@dataclass
class DatasetManifest:
    root: Path
    pairs: list[dict]
    config: DatasetConfig
    hashes: dict[str, str]

    def split(self, name: str) -> list[dict]:
        return [p for p in self.pairs if p["split"] == name]

    def path(self, pair: dict, role: str) -> Path:
        return self.root / pair[role]

    def load(self, pair: dict, role: str) -> Image:
        return read_image(self.path(pair, role))

    def patches(self, split: str) -> list[PatchRecord]:
        out = []
        for pair in self.split(split):
            lr_ms, lr_pan, ref = (self.load(pair, k) for k in ("lr_ms", "lr_pan", "reference"))
            out.extend(extract_patches(lr_ms, lr_pan, ref, self.config, pair["id"]))
        return out

    def verify(self) -> None:
        for rel, digest in self.hashes.items():
            p = self.root / rel
            if not p.exists():
                raise ManifestError(f"manifest entry {rel} is missing")
            if file_hash(p) != digest:
                raise ManifestError(f"hash mismatch for {rel}")

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        doc = {
            "pairs": self.pairs,
            "splits": {s: [p["id"] for p in self.split(s)] for s in ("train", "val", "test")},
            "config": asdict(self.config),
            "hashes": self.hashes,
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
        return path


def load_manifest(path, verify: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        m = DatasetManifest(path.parent, doc["pairs"], DatasetConfig(**doc["config"]), doc["hashes"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if verify:
        m.verify()
    return m


def assign_splits(ids: list[str], fractions: dict, seed: int) -> dict[str, str]:
    """Deterministic split labels; validation and test each get at least one pair when possible."""
    order = [ids[k] for k in np.random.default_rng(seed).permutation(len(ids))]
    n = len(order)
    n_val = int(round(fractions.get("val", 0) * n))
    n_test = int(round(fractions.get("test", 0) * n))
    if n >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    labels = {}
    for k, pid in enumerate(order):
        labels[pid] = "test" if k < n_test else "val" if k < n_test + n_val else "train"
    return labels


def prepare_dataset(pairs: dict[str, tuple[Image, Image]], out_dir, cfg: DatasetConfig, splits=None) -> DatasetManifest:
    """Degrade each ``id -> (ms, pan)`` pair and write images plus ``manifest.json``.

    ``splits`` optionally maps ids to split labels; otherwise fractions from
    ``cfg.splits`` are applied with ``cfg.seed``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = splits or assign_splits(sorted(pairs), cfg.splits, cfg.seed)
    records, hashes = [], {}
    for pid in sorted(pairs):
        ms, pan = pairs[pid]
        lr_ms, lr_pan, ref = degrade_wald(ms, pan, cfg)
        rec = {"id": pid, "split": labels[pid]}
        for role, img in zip(_ROLES, (ms, pan, lr_ms, lr_pan, ref)):
            rel = f"{pid}_{role}.fafimg"
            write_image(out_dir / rel, img)
            rec[role] = rel
            hashes[rel] = file_hash(out_dir / rel)
        records.append(rec)
    manifest = DatasetManifest(out_dir, records, cfg, hashes)
    manifest.save()
    return manifest


def discover_pairs(input_dir, bit_depth: int) -> dict[str, tuple[Image, Image]]:
    """Find ``<id>_ms.fafimg`` / ``<id>_pan.fafimg`` pairs in a directory."""
    input_dir = Path(input_dir)
    pairs = {}
    for ms_path in sorted(input_dir.glob("*_ms.fafimg")):
        pid = ms_path.name[: -len("_ms.fafimg")]
        pan_path = input_dir / f"{pid}_pan.fafimg"
        if not pan_path.exists():
            raise ManifestError(f"{ms_path.name} has no matching {pan_path.name}")
        ms, pan = read_image(ms_path), read_image(pan_path)
        ms.bit_depth = pan.bit_depth = bit_depth
        pairs[pid] = (ms, pan)
    if not pairs:
        raise ManifestError(f"no *_ms.fafimg files in {input_dir}")
    return pairs


# ---------------------------------------------------------------------------
# procedural scenes


def material_library(bands: int, rng: np.random.Generator, count: int = 6) -> np.ndarray:
    """``count`` random reflectance spectra in (0.15, 0.85), one row per material."""
    return rng.uniform(0.15, 0.85, size=(count, bands))


def synthetic_scene(
    pan_size: int,
    bands: int,
    rng: np.random.Generator,
    bit_depth: int = 11,
    ratio: int = 4,
    materials: np.ndarray | None = None,
):
    """A random multi-band scene returned as an original-resolution ``(ms, pan)`` pair.

    The scene is built at PAN resolution from Voronoi regions whose spectra
    are jittered copies of ``materials`` (a fresh library when omitted), a
    smooth illumination field and fine band-correlated texture. PAN is a
    fixed positive combination of the bands; MS is the scene blurred and
    decimated by ``ratio``.
    """
    n_cells = int(rng.integers(12, 30))
    seeds = rng.uniform(0, pan_size, size=(n_cells, 2))
    yy, xx = np.mgrid[0:pan_size, 0:pan_size]
    _, label = cKDTree(seeds).query(np.stack([yy.ravel(), xx.ravel()], axis=1))
    label = label.reshape(pan_size, pan_size)
    if materials is None:
        materials = material_library(bands, rng)
    elif materials.shape[1] != bands:
        raise ShapeError(f"material library has {materials.shape[1]} bands, scene needs {bands}")
    spectra = materials[rng.integers(0, len(materials), size=n_cells)]
    spectra = np.clip(spectra + rng.normal(0, 0.04, size=spectra.shape), 0.05, 0.95)
    scene = spectra[label]
    illum = ndimage.gaussian_filter(rng.normal(0, 1, (pan_size, pan_size)), pan_size / 8)
    illum = 1 + 0.25 * illum / (np.abs(illum).max() + 1e-12)
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (pan_size, pan_size)), 1.2)
    texture = 0.08 * texture / (texture.std() + 1e-12)
    scene = scene * illum[:, :, None] + texture[:, :, None] * spectra[label]
    scene = np.clip(scene, 0.01, 0.99)
    weights = np.linspace(1.0, 2.0, bands)
    weights /= weights.sum()
    top = 2**bit_depth - 1
    pan = (scene @ weights)[:, :, None] * top
    cfg = DatasetConfig(ratio=ratio, ms_patch=1, pan_patch=ratio)
    ms = degrade(Image(scene * top, bit_depth), cfg)
    return ms.with_data(ms.data.astype(np.float32)), Image(pan.astype(np.float32), bit_depth)


def synthetic_pairs(count: int, pan_size: int, bands: int, seed: int, bit_depth: int = 11) -> dict:
    """``count`` scenes drawing on one shared material library, keyed ``scene000``, ``scene001``..."""
    rng = np.random.default_rng(seed)
    lib = material_library(bands, rng)
    return {f"scene{k:03d}": synthetic_scene(pan_size, bands, rng, bit_depth, materials=lib) for k in range(count)}
