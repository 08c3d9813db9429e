"""Adam training loop, checkpointing, evaluation and inference."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DatasetConfig, DatasetManifest, Image, PatchRecord, bicubic_up, degrade, denormalize, normalize, patch_batch
from .errors import ShapeError, TrainingDiverged
from .losses import HfsConfig, total_loss
from .metrics import MetricsReport, full_report, reduced_report
from .model import Checkpoint, ModelConfig, fafnet_forward, init_fafnet, load_checkpoint, save_checkpoint
from .tensor import ParamStore, backward, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "fixed_haar", "no_hfs")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 2000
    beta: float = 10.0
    lam: float = 5e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 50
    variant: str = "baseline"
    augment: bool = False
    protocol: str = "full"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.batch < 2 and self.effective_beta != 0:
            raise ValueError("the similarity loss needs batch >= 2; use variant no_hfs or beta=0 for batch 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults (200 epochs, batch 8), distinct from the full protocol."""
        base = dict(epochs=200, batch=8, protocol="desk-scale")
        base.update(overrides)
        return cls(**base)

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.variant == "no_hfs" else self.beta

    def model_config(self, model_cfg: ModelConfig) -> ModelConfig:
        """Apply the variant's architecture toggle and the loss settings to ``model_cfg``."""
        wavelet = "fixed_haar" if self.variant == "fixed_haar" else model_cfg.wavelet
        hfs = HfsConfig(lam=self.lam, hidden=model_cfg.hfs.hidden, dim=model_cfg.hfs.dim)
        return model_cfg.with_(wavelet=wavelet, hfs=hfs)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamStore) -> "AdamState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.items()},
            {k: np.zeros_like(t.data) for k, t in params.items()},
        )

    def to_entries(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array(self.step, np.float32)}
        out.update({f"adam.m.{k}": a for k, a in self.m.items()})
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "AdamState":
        m = {k[len("adam.m.") :]: a.copy() for k, a in entries.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v.") :]: a.copy() for k, a in entries.items() if k.startswith("adam.v.")}
        return cls(m, v, int(entries["adam.step"]))


def adam_step(params: ParamStore, state: AdamState, lr: float, b1=0.9, b2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update of every parameter, in place.

    Raises
    ------
    TrainingDiverged
        If any gradient is non-finite; no parameter is modified in that case.
    """
    for name, t in params.items():
        if not np.all(np.isfinite(t.grad)):
            raise TrainingDiverged(f"non-finite gradient in {name}")
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = t.grad
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.data.dtype)


# ---------------------------------------------------------------------------
# training


@dataclass
class PatchSet:
    ms_up: np.ndarray
    pan: np.ndarray
    ref: np.ndarray

    @classmethod
    def from_patches(cls, patches: list[PatchRecord], bit_depth: int, ratio: int = 4) -> "PatchSet":
        if not patches:
            raise ValueError("no patches")
        return cls(*patch_batch(patches, bit_depth, ratio))

    def __len__(self):
        return len(self.ms_up)

    def take(self, idx):
        return self.ms_up[idx], self.pan[idx], self.ref[idx]


@dataclass
class TrainResult:
    params: ParamStore
    model_config: ModelConfig
    adam: AdamState
    history: list[dict] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    best_epoch: int | None = None


def batch_order(n: int, batch: int, seed: int, epoch: int, drop_singletons: bool) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[k : k + batch] for k in range(0, n, batch)]
    if drop_singletons and batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def dihedral(batch: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Apply one of the 8 square symmetries per sample: ``code % 4`` quarter turns, transposed if ``code >= 4``."""
    out = np.empty_like(batch)
    for i, code in enumerate(codes):
        x = batch[i]
        if code >= 4:
            x = x.transpose(0, 2, 1)
        out[i] = np.rot90(x, int(code) % 4, axes=(1, 2))
    return out


def evaluate_mae(params: ParamStore, cfg: ModelConfig, data: PatchSet, batch: int = 16) -> float:
    total, count = 0.0, 0
    with no_grad():
        for k in range(0, len(data), batch):
            ms, pan, ref = data.take(slice(k, k + batch))
            fused = fafnet_forward(ms, pan, params, cfg, train=False).fused.data
            total += float(np.abs(fused.astype(np.float64) - ref).sum())
            count += fused.size
    return total / count


def _write_log(fh, record: dict):
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def train(
    cfg: TrainConfig,
    train_data: PatchSet,
    model_cfg: ModelConfig,
    val_data: PatchSet | None = None,
    out_dir=None,
    max_value: float = 2047.0,
    resume: Checkpoint | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Optimize the network on ``train_data``.

    With ``out_dir`` set, checkpoints are written every ``checkpoint_every``
    epochs and at the end (``last.ckpt``), and one JSON line per step is
    appended to ``train_log.jsonl``. With ``val_data`` as well, the weights
    of the epoch with the lowest validation MAE in this call go to
    ``best.ckpt``. ``stop_after_epoch`` ends the run early (used to test
    resumption).
    """
    mcfg = cfg.model_config(model_cfg)
    beta = cfg.effective_beta
    if resume is not None:
        params, adam = resume.params, AdamState.from_entries(resume.state)
        start_epoch = int(resume.state["trainer.epoch"])
        step = int(resume.state["trainer.step"])
        mcfg = resume.config
    else:
        params, adam = init_fafnet(mcfg), None
        start_epoch, step = 0, 0
    adam = adam or AdamState.zeros(params)
    result = TrainResult(params, mcfg, adam)

    out_dir = Path(out_dir) if out_dir is not None else None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "train_log.jsonl", "a", encoding="utf-8")
    _write_log(fh, {"event": "start", "protocol": cfg.protocol, "config": asdict(cfg), "epoch": start_epoch})
    if cfg.protocol != "full":
        log.info("training with %s settings: epochs=%d batch=%d", cfg.protocol, cfg.epochs, cfg.batch)

    def save(name):
        state = adam.to_entries()
        state["trainer.epoch"] = np.array(epoch + 1, np.float32)
        state["trainer.step"] = np.array(step, np.float32)
        path = out_dir / name
        save_checkpoint(path, Checkpoint(mcfg, params, max_value, state))
        result.checkpoint = path

    best = None  # (val, epoch, step, params snapshot)

    t0 = time.perf_counter()
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    try:
        for epoch in range(start_epoch, last_epoch):
            for idx in batch_order(len(train_data), cfg.batch, cfg.seed, epoch, beta != 0):
                ms, pan, ref = train_data.take(np.sort(idx))
                if cfg.augment:
                    codes = np.random.default_rng([cfg.seed, epoch, step]).integers(0, 8, len(idx))
                    ms, pan, ref = (dihedral(a, codes) for a in (ms, pan, ref))
                rec = fafnet_forward(ms, pan, params, mcfg, train=True)
                losses = total_loss(rec, ref, mcfg.hfs, beta, params)
                if not np.isfinite(losses.total.item()):
                    raise TrainingDiverged(f"loss became {losses.total.item()} at step {step}")
                params.zero_grad()
                backward(losses.total)
                adam_step(params, adam, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
                step += 1
                entry = {"step": step, "epoch": epoch, **losses.as_dict(), "wall": time.perf_counter() - t0}
                result.history.append(entry)
                _write_log(fh, entry)
            if val_data is not None:
                val = evaluate_mae(params, mcfg, val_data)
                result.val_history.append(val)
                _write_log(fh, {"event": "val", "epoch": epoch, "val_mae": val})
                if best is None or val < best[0]:
                    best = (val, epoch, step, params.copy())
            if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save(f"epoch{epoch + 1:05d}.ckpt")
        if out_dir is not None and last_epoch > start_epoch:
            epoch = last_epoch - 1
            save("last.ckpt")
            if best is not None:
                val, ep, st, snap = best
                state = {"trainer.epoch": np.array(ep + 1, np.float32), "trainer.step": np.array(st, np.float32),
                         "trainer.val_mae": np.array(val, np.float32)}
                result.best_checkpoint = out_dir / "best.ckpt"
                result.best_epoch = ep
                save_checkpoint(result.best_checkpoint, Checkpoint(mcfg, snap, max_value, state))
    finally:
        if fh is not None:
            fh.close()
    return result


def train_manifest(cfg: TrainConfig, manifest: DatasetManifest, model_cfg: ModelConfig, out_dir, **kw) -> TrainResult:
    bit_depth = manifest.config.bit_depth
    train_set = PatchSet.from_patches(manifest.patches("train"), bit_depth, manifest.config.ratio)
    val_patches = manifest.patches("val")
    val_set = PatchSet.from_patches(val_patches, bit_depth, manifest.config.ratio) if val_patches else None
    return train(cfg, train_set, model_cfg, val_set, out_dir, max_value=2.0**bit_depth - 1, **kw)


# ---------------------------------------------------------------------------
# inference and evaluation


def fuse_with(params: ParamStore, cfg: ModelConfig, ms: Image, pan: Image, ratio: int = 4) -> Image:
    """Bicubic-upsample ``ms``, run the network and return digital numbers."""
    if pan.shape[:2] != (ratio * ms.shape[0], ratio * ms.shape[1]):
        raise ShapeError(f"PAN {pan.shape[:2]} must be {ratio}x MS {ms.shape[:2]}")
    s, t = pan.shape[:2]
    if s % 4 or t % 4:
        raise ShapeError(f"PAN size {s}x{t} is not divisible by 4; pad the inputs to a multiple of 4")
    if ms.shape[2] != cfg.bands:
        raise ShapeError(f"checkpoint expects {cfg.bands} bands, image has {ms.shape[2]}")
    ms_up = normalize(bicubic_up(ms, ratio))
    pan_n = normalize(Image(pan.data, ms.bit_depth))
    dtype = next(iter(params.items()))[1].dtype
    with no_grad():
        out = fafnet_forward(ms_up.astype(dtype), pan_n.astype(dtype), params, cfg, train=False).fused.data
    return Image(denormalize(out, ms.bit_depth), ms.bit_depth, ms.sensor)


def fuse(checkpoint, ms: Image, pan: Image, ratio: int = 4) -> Image:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    return fuse_with(ckpt.params, ckpt.config, ms, pan, ratio)


def bicubic_fuser(ms: Image, pan: Image, ratio: int = 4) -> Image:
    return bicubic_up(ms, ratio)


Fuser = Callable[[Image, Image], Image]


def evaluate(
    checkpoint, manifest: DatasetManifest, mode: str = "reduced", split: str = "test", fuser: Fuser | None = None
) -> list[MetricsReport]:
    """Score every pair of ``split``; ``fuser`` overrides the checkpoint (e.g. a bicubic baseline)."""
    if mode not in ("reduced", "full"):
        raise ValueError("mode must be 'reduced' or 'full'")
    pairs = manifest.split(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    dcfg: DatasetConfig = manifest.config
    if fuser is None:
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)

        def fuser(ms, pan):
            return fuse_with(ckpt.params, ckpt.config, ms, pan, dcfg.ratio)

    reports = []
    for pair in pairs:
        if mode == "reduced":
            ms, pan, ref = (manifest.load(pair, k) for k in ("lr_ms", "lr_pan", "reference"))
            fused = fuser(ms, pan)
            reports.append(reduced_report(ref, fused, dcfg.ratio, name=pair["id"]))
        else:
            ms, pan = manifest.load(pair, "ms"), manifest.load(pair, "pan")
            fused = fuser(ms, pan)
            lr_pan = degrade(pan, dcfg)
            reports.append(full_report(fused, ms, pan, lr_pan, name=pair["id"]))
    return reports
