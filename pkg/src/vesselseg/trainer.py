"""Siamese training loop, Adam, and sliding-window inference."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .deformation import DeformationParams, sample_field, warp
from .losses import (ConsistencyCriterion, FocalTverskyParams, MssWeights, consistency_loss,
                     mss_loss, supervised_loss, total_loss)
from .metrics import dice
from .patches import PatchSpec, extract_grid, prefetch, reassemble, sample_epoch
from .seeding import stream_seed
from .unet import NetworkConfig, Parameters, build, forward, load_checkpoint, save_checkpoint
from .volume import Volume3D

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    def to_dict(self) -> dict:
        moments = {f"m/{k}": a for k, a in self.m.items()}
        moments.update({f"v/{k}": a for k, a in self.v.items()})
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step, "skipped": self.skipped, "moments": moments}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        moments = d.get("moments", {})
        return cls(
            lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"], step=d["step"],
            m={k[2:]: a.copy() for k, a in moments.items() if k.startswith("m/")},
            v={k[2:]: a.copy() for k, a in moments.items() if k.startswith("v/")},
            skipped=d.get("skipped", 0),
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> bool:
    """Bias-corrected Adam, in place on ``params``.

    A non-finite gradient anywhere skips the whole step (returns False) so
    parameters and moments stay untouched.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            log.warning("non-finite gradient in %s; skipping step %d", name, state.step + 1)
            state.skipped += 1
            return False
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 50
    batch_size: int = 4
    patches_per_epoch: int = 8000
    seed: int = 0
    consistency: bool = True
    branch2: bool = True             # supervise the deformed branch as well
    mss_weights: tuple[float, ...] | None = None
    deformation: DeformationParams = DeformationParams()
    focal_tversky: FocalTverskyParams = FocalTverskyParams()
    criterion: ConsistencyCriterion = ConsistencyCriterion()
    patch: PatchSpec = PatchSpec()
    val_stride: tuple[int, int, int] | None = None
    lr: float = 1e-4
    dtype: str = "float32"
    checkpoint_every: int = 1
    threshold: float = 0.5
    prefetch: int = 2

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.patches_per_epoch < 1:
            raise TrainingError("epochs, batch size and patches per epoch must be positive")
        self.deformation.validate()
        self.focal_tversky.validate()

    @property
    def mode(self) -> str:
        parts = ["sup2" if self.branch2 else "sup1"]
        if self.consistency:
            parts.append(f"cons-{self.criterion.kind}")
        return "+".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        d["deformation"] = DeformationParams(**{k: tuple(v) if isinstance(v, list) else v
                                                 for k, v in d["deformation"].items()})
        d["focal_tversky"] = FocalTverskyParams(**d["focal_tversky"])
        d["criterion"] = ConsistencyCriterion(**d["criterion"])
        d["patch"] = PatchSpec(tuple(d["patch"]["patch_size"]), tuple(d["patch"]["stride"]))
        for k in ("mss_weights", "val_stride"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TrainingData:
    train_images: list[np.ndarray]
    train_labels: list[np.ndarray]
    val_images: list[np.ndarray] = field(default_factory=list)
    val_labels: list[np.ndarray] = field(default_factory=list)


@dataclass
class TrainResult:
    params: Parameters
    best_params: Parameters
    best_val_dice: float
    records: list[dict]
    out_dir: Path | None


# ---------------------------------------------------------------------------
# one Siamese step

@dataclass
class SiameseBatch:
    x: np.ndarray
    y: np.ndarray
    field: object
    tx: np.ndarray
    ty: np.ndarray


def make_batch(x: np.ndarray, y: np.ndarray, field_) -> SiameseBatch:
    return SiameseBatch(x, y, field_, warp(x, field_), warp(y, field_))


def siamese_losses(params: Parameters, batch: SiameseBatch, cfg: TrainRunConfig):
    """Forward both branches and assemble (supervised, consistency, total)."""
    m = params.config.supervision_scales
    weights = MssWeights(tuple(cfg.mss_weights)) if cfg.mss_weights else MssWeights.default(m)
    out1 = forward(params, batch.x, training=True)
    b1 = mss_loss(out1, batch.y, weights, cfg.focal_tversky)
    need_branch2 = cfg.branch2 or cfg.consistency
    b2 = out2 = None
    if need_branch2:
        out2 = forward(params, batch.tx, training=True)
        if cfg.branch2:
            b2 = mss_loss(out2, batch.ty, weights, cfg.focal_tversky)
    sup = supervised_loss(b1, b2)
    if cfg.consistency:
        cons = consistency_loss(out1.finest, out2.finest, batch.field, cfg.criterion)
        total = total_loss(sup, cons, cfg.criterion)
    else:
        cons = None
        total = sup
    return sup, cons, total


def _stack(patches: Sequence[np.ndarray], dtype) -> np.ndarray:
    return np.stack(patches)[:, None].astype(dtype)


def _batches(stream, batch_size: int):
    buf_x, buf_y = [], []
    for px, py in stream:
        buf_x.append(px)
        buf_y.append(py)
        if len(buf_x) == batch_size:
            yield buf_x, buf_y
            buf_x, buf_y = [], []
    if buf_x:
        yield buf_x, buf_y


# ---------------------------------------------------------------------------
# training

def _rng_state(cfg: TrainRunConfig, next_epoch: int) -> dict:
    # every stream is re-derived from (seed, name, epoch[, batch]), so the
    # position in the run is the whole generator state
    return {"seed": cfg.seed, "next_epoch": next_epoch, "streams": ["patches", "deform"]}


def train(data: TrainingData, cfg: TrainRunConfig, netcfg: NetworkConfig, out_dir=None,
          resume=None, init_params: Parameters | None = None) -> TrainResult:
    """Run the Siamese loop; writes ``metrics.jsonl``, ``last.ckpt``, ``best.ckpt``
    into ``out_dir`` when given. ``resume`` is a checkpoint path."""
    cfg.validate()
    netcfg.validate()
    cfg.patch.check_divisible(netcfg.divisor)
    if not data.train_images:
        raise TrainingError("no training volumes")
    dtype = np.dtype(cfg.dtype)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    best_val = -1.0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.params.config != netcfg:
            raise TrainingError("checkpoint network config differs from the requested one")
        params = ckpt.params.astype(dtype)
        opt = AdamState.from_dict(ckpt.optimizer)
        start_epoch = ckpt.rng_state["next_epoch"]
        best_val = ckpt.extra.get("best_val_dice", -1.0)
        best_params = load_checkpoint(out_dir / "best.ckpt").params if out_dir and (out_dir / "best.ckpt").exists() else params
    else:
        params = (init_params or build(netcfg, stream_seed(cfg.seed, "init"))).astype(dtype)
        opt = AdamState(lr=cfg.lr)
        start_epoch = 0
        best_params = params

    images = [np.asarray(v, dtype=dtype) for v in data.train_images]
    labels = [np.asarray(v, dtype=dtype) for v in data.train_labels]
    log_path = out_dir / "metrics.jsonl" if out_dir is not None else None
    records: list[dict] = []
    t0 = time.perf_counter()

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    for epoch in range(start_epoch, cfg.epochs):
        stream = sample_epoch(images, labels, cfg.patch, cfg.patches_per_epoch,
                              stream_seed(cfg.seed, "patches", epoch))
        sums = {"l_sup": 0.0, "l_cons": 0.0, "total": 0.0}
        n_batches = 0
        for b, (xs, ys) in enumerate(prefetch(_batches(stream, cfg.batch_size), cfg.prefetch)):
            field_ = sample_field(cfg.patch.patch_size, cfg.deformation, stream_seed(cfg.seed, "deform", epoch, b))
            batch = make_batch(_stack(xs, dtype), _stack(ys, dtype), field_)
            sup, cons, total = siamese_losses(params, batch, cfg)
            grads = ad.backward(total)
            named = {name: grads[t] for name, t in params.tensors.items() if t in grads}
            adam_step(params.arrays(), named, opt)
            rec = {
                "mode": cfg.mode, "epoch": epoch, "batch": b,
                "l_sup": float(sup.data), "l_cons": float(cons.data) if cons is not None else None,
                "total": float(total.data), "val_dice": None,
                "wall_time": round(time.perf_counter() - t0, 3),
            }
            for k in sums:
                sums[k] += rec[k] or 0.0
            n_batches += 1
            emit(rec)

        val_dice = None
        if data.val_images:
            scores = []
            val_spec = PatchSpec(cfg.patch.patch_size, cfg.val_stride or cfg.patch.stride)
            for img, lab in zip(data.val_images, data.val_labels):
                _, mask = predict_volume(params, Volume3D(img), val_spec, cfg.threshold)
                scores.append(dice(mask.data, lab))
            val_dice = float(np.mean(scores))
        means = {k: v / max(n_batches, 1) for k, v in sums.items()}
        if not cfg.consistency:
            means["l_cons"] = None
        emit({
            "mode": cfg.mode, "epoch": epoch, "batch": None, **means,
            "val_dice": val_dice, "wall_time": round(time.perf_counter() - t0, 3),
        })

        score = val_dice if val_dice is not None else -sums["total"] / max(n_batches, 1)
        improved = score > best_val
        if improved:
            best_val = score
            best_params = params.astype(dtype)
        if out_dir is not None:
            state = _rng_state(cfg, epoch + 1)
            extra = {"best_val_dice": best_val, "train_config": cfg.to_dict()}
            if improved:
                save_checkpoint(out_dir / "best.ckpt", best_params, None, epoch, state, extra)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                save_checkpoint(out_dir / "last.ckpt", params, opt.to_dict(), epoch, state, extra)
        log.info("epoch %d: total %.4f val dice %s", epoch, sums["total"] / max(n_batches, 1), val_dice)

    return TrainResult(params, best_params, best_val, records, out_dir)


# ---------------------------------------------------------------------------
# inference

def predict_volume(params: Parameters, v, spec: PatchSpec = PatchSpec(), threshold: float = 0.5,
                   batch_size: int = 4):
    """Sliding-window finest-scale prediction, mean-blended, then ``>= threshold``."""
    vol = v if isinstance(v, Volume3D) else Volume3D(v)
    grid = extract_grid(vol.dims, spec)
    dtype = next(iter(params.tensors.values())).dtype
    data = vol.data.astype(dtype)
    windows = grid.windows
    preds = []
    with ad.no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start:start + batch_size]
            x = np.stack([grid.crop(data, o) for o in chunk])[:, None]
            out = forward(params, x, training=False).finest.data
            preds.extend(out[i, 0] for i in range(len(chunk)))
    prob = reassemble(preds, grid, vol.spacing, "probability")
    mask = (prob.data >= threshold).astype(np.uint8)
    return prob, Volume3D(mask, vol.spacing, "binary-mask")
