"""Two-stage training: contrastive backbone pretraining, then head fine-tuning."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import RunConfig
from .losses import focal_ce, multiview_loss
from .model import (
    Checkpoint,
    CheckpointError,
    HeadUninitializedError,
    LocalizationNet,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    retained_frac: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if rec.epoch != len(self.records):
            raise ValueError("epochs must be contiguous from 0")
        self.records.append(rec)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def best_epoch(self) -> int:
        return int(np.argmin(self.losses))

    def to_csv(self, timing: bool = False) -> str:
        """Deterministic columns only; ``timing`` adds wall-clock seconds."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "retained_frac"] + (["seconds"] if timing else []))
        for r in self.records:
            row = [r.epoch, repr(r.loss), repr(r.lr), repr(r.retained_frac)]
            w.writerow(row + ([f"{r.seconds:.3f}"] if timing else []))
        return buf.getvalue()

    def write(self, path: str | Path, timing: bool = False) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(timing), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        out = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out.append(EpochRecord(int(row["epoch"]), float(row["loss"]), float(row["lr"]),
                                       float(row["retained_frac"]), float(row.get("seconds") or 0.0)))
        return out

    def loss_digest(self) -> str:
        return hashlib.sha256(",".join(repr(x) for x in self.losses).encode()).hexdigest()


@dataclass
class TrainResult:
    checkpoint: Path | None
    log: TrainLog
    model: LocalizationNet
    best_epoch: int = 0


def cosine_lr(step: int, total_steps: int, lr_init: float, min_lr: float) -> float:
    """Learning rate for ``step`` in ``[0, total_steps)``: lr_init at 0, min_lr at the last step."""
    span = max(total_steps - 1, 1)
    t = min(step, span)
    return min_lr + (lr_init - min_lr) * (1.0 + math.cos(math.pi * t / span)) / 2.0


def _manifest_samples(manifest, size: int) -> list[D.ImageSample]:
    if isinstance(manifest, (str, Path)):
        manifest = D.load_manifest(manifest)
    if len(manifest) == 0:
        raise TrainingError("manifest is empty")
    return [D.load_sample(e, size) for e in manifest]


def _batch_tensor(samples) -> torch.Tensor:
    x = np.stack([s.image for s in samples]).astype(np.float32)
    return torch.from_numpy(x).permute(0, 3, 1, 2).contiguous()


def _adam(params, cfg: RunConfig):
    return torch.optim.Adam(
        params, lr=cfg.lr_init, betas=(cfg.adam_beta1, cfg.adam_beta2), weight_decay=cfg.weight_decay
    )


def _sample_view(sample: D.ImageSample, seed: int, augment: bool) -> D.ImageSample:
    return D.augment(sample, D.derive_seed(seed, 10)) if augment else sample


def stage1_pretrain(
    manifest,
    cfg: RunConfig,
    model: LocalizationNet | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Contrastive pretraining of backbone and projections; the head is never touched.

    LR follows reduce-on-plateau on the epoch-mean training loss. With ``out_dir``
    a checkpoint is written every epoch (``stage1_last.ckpt``) and whenever the
    loss improves (``stage1_best.ckpt``). The returned model holds the best weights.
    """
    ccfg, scfg = cfg.contrast(), cfg.sampler()
    ccfg.validate_for_training()
    if ccfg.cross_modality and cfg.dropout_rate == 0:
        raise TrainingError("cross-modality loss needs dropout_rate > 0")
    samples = _manifest_samples(manifest, cfg.input_size)
    if model is None:
        model = build_model(cfg.backbone(), cfg.global_seed)
    model.set_trainable("backbone", True)
    model.set_trainable("projections", True)
    model.set_trainable("head", False)
    params = list(model.backbone.parameters()) + list(model.projections.parameters())
    opt = _adam(params, cfg)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience, min_lr=cfg.min_lr
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    head_sum = model.checksums()["head"]
    train_log = TrainLog()
    best_loss, best_state, best_path = math.inf, None, None
    for epoch in range(cfg.stage1_epochs):
        t0 = time.perf_counter()
        lr = opt.param_groups[0]["lr"]
        order = np.random.default_rng(D.derive_seed(cfg.global_seed, epoch)).permutation(len(samples))
        losses, retained, sampled = [], 0, 0
        for b, chunk in enumerate(D.batches(order, cfg.batch_size)):
            seeds = [D.derive_seed(cfg.global_seed, epoch, int(i)) for i in chunk]
            views = [_sample_view(samples[i], s, cfg.augment_stage1) for i, s in zip(chunk, seeds)]
            x = _batch_tensor(views)
            pass_seed = D.derive_seed(cfg.global_seed, epoch, 1_000_000 + b)
            if ccfg.cross_modality:
                p1, p2 = model.forward_dual(x, pass_seed)
                z2 = model.project_for_contrast(p2)
                duals = [[g[k] for g in z2] for k in range(len(views))]
            else:
                p1 = model.forward_backbone(x, "train", D.derive_seed(pass_seed, 0))
                duals = None
            z1 = model.project_for_contrast(p1)
            pyrs = [[g[k] for g in z1] for k in range(len(views))]
            res = multiview_loss(pyrs, duals, [v.mask for v in views], ccfg, scfg, seeds)
            retained += res.retained
            sampled += res.sampled
            if res.retained == 0:
                continue
            opt.zero_grad(set_to_none=True)
            res.total.backward()
            opt.step()
            losses.append(float(res.total.detach()))
        if not losses:
            raise TrainingError(
                f"epoch {epoch}: no image yielded a usable anchor; every mask is single-class "
                "at stride 4 (check that the manifest holds tampered images)"
            )
        epoch_loss = float(np.mean(losses))
        sched.step(epoch_loss)
        rec = EpochRecord(epoch, epoch_loss, lr, retained / max(sampled, 1), time.perf_counter() - t0)
        train_log.append(rec)
        log.info("stage1 epoch %d loss %.5f lr %.2e retained %.3f", epoch, epoch_loss, lr, rec.retained_frac)
        improved = epoch_loss < best_loss
        if improved:
            best_loss = epoch_loss
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if out is not None:
            meta = _meta(cfg, 1, train_log)
            save_checkpoint(out / "stage1_last.ckpt", model, 1, meta)
            if improved:
                best_path = save_checkpoint(out / "stage1_best.ckpt", model, 1, meta)
    model.load_state_dict(best_state)
    if model.checksums()["head"] != head_sum:
        raise TrainingError("head weights changed during stage 1")
    if out is not None:
        train_log.write(out / "stage1_log.csv")
        train_log.write(out / "stage1_timing.csv", timing=True)
    return TrainResult(best_path, train_log, model, train_log.best_epoch())


def _meta(cfg: RunConfig, stage: int, train_log: TrainLog) -> dict:
    return {
        "config": cfg.dumps(),
        "stage": stage,
        "seed": cfg.global_seed,
        "input_size": cfg.input_size,
        "epochs_done": len(train_log.records),
        "loss_digest": train_log.loss_digest(),
    }


def reset_head(model: LocalizationNet, seed: int) -> None:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(D.derive_seed(seed, 2))
        for m in model.head.modules():
            if hasattr(m, "reset_parameters") and m is not model.head:
                m.reset_parameters()
    model.head_ready = True


def stage2_finetune(
    checkpoint,
    manifest,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Fit the localization head with focal CE on frozen, dropout-free features.

    ``checkpoint`` is a stage-1 checkpoint path or :class:`Checkpoint`. The LR
    follows a cosine from ``lr_init`` at the first step to ``min_lr`` at the last.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.stage != 1:
        raise CheckpointError(f"stage mismatch: expected a stage-1 checkpoint, got stage {ckpt.stage}")
    model = ckpt.model
    reset_head(model, cfg.global_seed)
    model.set_trainable("backbone", False)
    model.set_trainable("projections", False)
    model.set_trainable("head", True)
    frozen_before = {k: v for k, v in model.checksums().items() if k != "head"}
    samples = _manifest_samples(manifest, cfg.input_size)
    fcfg = cfg.focal()
    opt = _adam(model.head.parameters(), cfg)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total = steps_per_epoch * cfg.stage2_epochs
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda t: cosine_lr(t, total, cfg.lr_init, cfg.min_lr) / cfg.lr_init
    )
    cache: dict[int, list[torch.Tensor]] = {}

    def features(idx: int, view: D.ImageSample, augmented: bool):
        if not augmented and idx in cache:
            return cache[idx]
        with torch.no_grad():
            pyr = model.forward_backbone(view.image, "eval")
        if not augmented:
            cache[idx] = pyr
        return pyr

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_log = TrainLog()
    path = None
    for epoch in range(cfg.stage2_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(D.derive_seed(cfg.global_seed, 2, epoch)).permutation(len(samples))
        losses = []
        for chunk in D.batches(order, cfg.batch_size):
            seeds = [D.derive_seed(cfg.global_seed, 2, epoch, int(i)) for i in chunk]
            views = [_sample_view(samples[i], s, cfg.augment_stage2) for i, s in zip(chunk, seeds)]
            pyrs = [features(int(i), v, cfg.augment_stage2) for i, v in zip(chunk, views)]
            pyr = [torch.cat([p[k] for p in pyrs]) for k in range(4)]
            probs = model.forward_head(pyr, out_size=(cfg.input_size, cfg.input_size))
            target = torch.from_numpy(np.stack([v.mask for v in views]))
            loss = focal_ce(probs, target, fcfg)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(float(loss.detach()))
        lr = cosine_lr(min((epoch + 1) * steps_per_epoch - 1, total - 1), total, cfg.lr_init, cfg.min_lr)
        rec = EpochRecord(epoch, float(np.mean(losses)), lr, 1.0, time.perf_counter() - t0)
        train_log.append(rec)
        log.info("stage2 epoch %d loss %.5f lr %.2e", epoch, rec.loss, lr)
        if out is not None:
            path = save_checkpoint(out / "stage2_last.ckpt", model, 2, _meta(cfg, 2, train_log))
    frozen_after = {k: v for k, v in model.checksums().items() if k != "head"}
    if frozen_after != frozen_before:
        raise TrainingError("frozen backbone/projection weights changed during stage 2")
    model.eval()
    if out is not None:
        train_log.write(out / "stage2_log.csv")
        train_log.write(out / "stage2_timing.csv", timing=True)
    return TrainResult(path, train_log, model, train_log.best_epoch())


def _ready_model(checkpoint) -> tuple[LocalizationNet, int]:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.stage != 2 or not ckpt.model.head_ready:
        raise HeadUninitializedError("head uninitialized: a stage-2 checkpoint is required")
    size = int(ckpt.meta.get("input_size", 512))
    return ckpt.model, size


def predict_with(model: LocalizationNet, image: np.ndarray, input_size: int) -> np.ndarray:
    """Score map at the image's native resolution."""
    h, w = image.shape[:2]
    resized = D.resize_image(image.astype(np.float32), input_size, input_size)
    with torch.no_grad():
        pyr = model.forward_backbone(resized, "eval")
        probs = model.forward_head(pyr, out_size=(input_size, input_size))[0].numpy()
    if (h, w) != (input_size, input_size):
        probs = D.resize_image(probs, h, w)
    return np.clip(probs, 0.0, 1.0)


def predict(checkpoint, image: np.ndarray) -> np.ndarray:
    model, size = _ready_model(checkpoint)
    return predict_with(model, image, size)
