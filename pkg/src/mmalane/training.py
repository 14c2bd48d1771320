"""Loss, two-stage training loop and clip inference."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import VideoClip, hflip_clip, select_memory_frames, shuffle_video_index
from .errors import ConfigError, PreconditionError, ShapeError, TrainingDivergedError, ValidationError
from .network import MMANet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGE1_MEMORY_FRAMES = 2


@dataclass
class LossConfig:
    ce_weight: float = 1.0
    iou_weight: float = 1.0
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.ce_weight < 0 or self.iou_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.ce_weight == 0 and self.iou_weight == 0:
            raise ConfigError("ce_weight and iou_weight cannot both be zero")


@dataclass
class StageConfig:
    """Optimizer and budget for one training stage.

    ``iterations`` (query frames seen) bounds the run when set; otherwise
    ``epochs`` full passes over every frame of every clip are made.
    """

    stage: int = 1
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 100
    iterations: int | None = 200
    batch_size: int = 1
    memory_frames: int | None = None
    seed: int = 0
    augment_flip: bool = False
    eval_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")
        if self.stage == 1 and self.memory_frames not in (None, STAGE1_MEMORY_FRAMES):
            raise ConfigError("stage 1 always uses the two previous frames as memory")

    @classmethod
    def full_scale(cls, stage: int, **overrides) -> "StageConfig":
        """Optimizer settings and epoch counts reported for full-scale training."""
        if stage == 1:
            base = dict(stage=1, optimizer="adam", lr=1e-5, momentum=0.9, weight_decay=5e-4,
                        epochs=100, iterations=None)
        else:
            base = dict(stage=2, optimizer="sgd", lr=1e-3, momentum=0.9, weight_decay=1e-6,
                        epochs=50, iterations=None, batch_size=1)
        return cls(**{**base, **overrides})

    @classmethod
    def desk(cls, stage: int, **overrides) -> "StageConfig":
        """Short from-scratch budgets for synthetic data on a CPU."""
        if stage == 1:
            base = dict(stage=1, optimizer="adam", lr=1e-3, momentum=0.9, weight_decay=5e-4,
                        iterations=200)
        else:
            base = dict(stage=2, optimizer="sgd", lr=1e-2, momentum=0.9, weight_decay=1e-6,
                        iterations=150, batch_size=1)
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainReport:
    stage: int
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    iteration_losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None

    def records(self) -> list[dict]:
        evals = {e["epoch"]: e for e in self.evals}
        return [{"stage": self.stage, "epoch": i, "loss": loss, "seed": self.seed,
                 "eval": evals.get(i)} for i, loss in enumerate(self.epoch_losses)]

    def write_jsonl(self, path) -> None:
        with open(path, "a") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    def summary(self) -> str:
        first = self.epoch_losses[0] if self.epoch_losses else float("nan")
        last = self.epoch_losses[-1] if self.epoch_losses else float("nan")
        return (f"stage {self.stage}: {len(self.iteration_losses)} iterations, "
                f"{len(self.epoch_losses)} epochs, loss {first:.4f} -> {last:.4f}, "
                f"{self.wall_time:.1f}s")


# -- loss ------------------------------------------------------------------

def soft_jaccard(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample mean soft IoU over the classes present in ``target``.

    probs: (B, K, H, W) probabilities, target: (B, H, W) int labels.
    """
    onehot = F.one_hot(target, probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(2, 3))
    union = probs.sum(dim=(2, 3)) + onehot.sum(dim=(2, 3)) - inter
    present = onehot.sum(dim=(2, 3)) > 0
    jac = torch.where(present, inter / union.clamp_min(1e-12), torch.zeros_like(inter))
    return jac.sum(dim=1) / present.sum(dim=1)


def segmentation_loss(logits: torch.Tensor, target, cfg: LossConfig | None = None) -> torch.Tensor:
    """``ce_weight * CE + iou_weight * (1 - soft Jaccard)``, averaged over the batch.

    Accepts (K, H, W) / (H, W) or batched (B, K, H, W) / (B, H, W) inputs.
    """
    cfg = cfg or LossConfig()
    target = torch.as_tensor(target, dtype=torch.long, device=logits.device)
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    if logits.shape[-2:] != target.shape[-2:] or logits.shape[0] != target.shape[0]:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    k = logits.shape[1]
    if target.min() < 0 or target.max() >= k:
        raise ValidationError(f"target labels must lie in 0..{k - 1}")
    weight = None
    if cfg.class_weights is not None:
        weight = torch.as_tensor(cfg.class_weights, dtype=logits.dtype, device=logits.device)
    loss = logits.new_zeros(())
    if cfg.ce_weight:
        loss = loss + cfg.ce_weight * F.cross_entropy(logits, target, weight=weight)
    if cfg.iou_weight:
        jac = soft_jaccard(torch.softmax(logits, dim=1), target)
        loss = loss + cfg.iou_weight * (1.0 - jac).mean()
    return loss


# -- training --------------------------------------------------------------

def clip_tensor(clip: VideoClip) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(clip.frames)).permute(0, 3, 1, 2).float()


def _make_optimizer(model: MMANet, cfg: StageConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.momentum, 0.999),
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _run_stage(model: MMANet, clips: Sequence[VideoClip], cfg: StageConfig,
               loss_cfg: LossConfig, eval_clips: Sequence[VideoClip] | None) -> TrainReport:
    if not clips:
        raise ValidationError("no training clips")
    if cfg.augment_flip:
        clips = list(clips) + [hflip_clip(c) for c in clips]
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tensors = [clip_tensor(c) for c in clips]
    targets = [torch.from_numpy(c.masks.astype(np.int64)) for c in clips]
    samples = [(ci, t) for ci, c in enumerate(clips) for t in range(len(c))]
    n_memory = STAGE1_MEMORY_FRAMES if cfg.stage == 1 else (
        cfg.memory_frames or model.cfg.memory_size)
    if cfg.stage == 2 and n_memory != model.cfg.memory_size:
        raise ConfigError(f"stage 2 memory_frames={n_memory} but the model was built for "
                          f"{model.cfg.memory_size}")
    total = cfg.iterations if cfg.iterations is not None else cfg.epochs * len(samples)
    optimizer = _make_optimizer(model, cfg)
    report = TrainReport(cfg.stage, cfg.seed)
    model.train()
    start = time.perf_counter()
    step = 0
    epoch = 0
    while step < total:
        # one fresh shuffle per clip per epoch
        perms = [shuffle_video_index(len(c), int(rng.integers(2**31))) for c in clips]
        order = rng.permutation(len(samples))
        epoch_losses = []
        for pos in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            batch = order[pos:pos + cfg.batch_size]
            optimizer.zero_grad()
            batch_loss = 0.0
            for si in batch:
                ci, t = samples[si]
                sel = select_memory_frames(len(clips[ci]), t, perms[ci], n_memory)
                logits = model.forward_detect(tensors[ci], sel, stage=cfg.stage)
                loss = segmentation_loss(logits, targets[ci][t], loss_cfg) / len(batch)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at stage {cfg.stage}, iteration {step}, epoch {epoch}, "
                        f"clip {clips[ci].name} frame {t}; lr={cfg.lr}, last losses "
                        f"{report.iteration_losses[-5:]}")
                loss.backward()
                batch_loss += loss.item()
            optimizer.step()
            report.iteration_losses.append(batch_loss)
            epoch_losses.append(batch_loss)
            step += 1
        report.epoch_losses.append(float(np.mean(epoch_losses)))
        if cfg.eval_every and eval_clips and (epoch + 1) % cfg.eval_every == 0:
            from .metrics import evaluate_clips
            rep = evaluate_clips(model, eval_clips, stage=cfg.stage)
            report.evals.append({"epoch": epoch, **rep.aggregate()})
            model.train()
        log.info("stage %d epoch %d loss %.4f", cfg.stage, epoch, report.epoch_losses[-1])
        epoch += 1
    report.wall_time = time.perf_counter() - start
    model.eval()
    return report


def train_stage1(model: MMANet, clips: Sequence[VideoClip], cfg: StageConfig | None = None,
                 loss_cfg: LossConfig | None = None, checkpoint_path=None,
                 eval_clips=None) -> TrainReport:
    """Train encoder, projections, memory read and decoder with a two-frame local memory."""
    cfg = cfg or StageConfig.desk(1)
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 StageConfig")
    report = _run_stage(model, clips, cfg, loss_cfg or LossConfig(), eval_clips)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, {"stage": 1, "train": cfg.to_dict()})
        report.checkpoint = str(checkpoint_path)
    return report


def load_stage1_weights(model: MMANet, checkpoint) -> None:
    """Copy every stage-1 tensor whose name and shape exist in ``model``."""
    if checkpoint is None:
        raise PreconditionError("stage 2 needs a stage-1 checkpoint")
    if isinstance(checkpoint, (str, Path)):
        if not Path(checkpoint).exists():
            raise PreconditionError(f"stage-1 checkpoint {checkpoint} does not exist")
        source, extra = load_checkpoint(checkpoint)
        if extra.get("stage") != 1:
            raise PreconditionError(f"{checkpoint} is not a stage-1 checkpoint")
        state = source.state_dict()
    else:
        state = checkpoint.state_dict() if isinstance(checkpoint, MMANet) else dict(checkpoint)
    own = model.state_dict()
    compatible = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(compatible, strict=False)


def train_stage2(model: MMANet, checkpoint, clips: Sequence[VideoClip],
                 cfg: StageConfig | None = None, loss_cfg: LossConfig | None = None,
                 checkpoint_path=None, eval_clips=None) -> TrainReport:
    """Optimize the whole network with local and (if enabled) shuffled global memory."""
    cfg = cfg or StageConfig.desk(2)
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 StageConfig")
    model.cfg.variant  # rejects flag sets outside the ablation table
    load_stage1_weights(model, checkpoint)
    report = _run_stage(model, clips, cfg, loss_cfg or LossConfig(), eval_clips)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, {"stage": 2, "train": cfg.to_dict()})
        report.checkpoint = str(checkpoint_path)
    return report


# -- inference -------------------------------------------------------------

@torch.no_grad()
def predict_clip(model: MMANet, clip: VideoClip, seed: int = 0, stage: int = 2,
                 resize: bool = False) -> np.ndarray:
    """Argmax instance masks (T, H, W) for every frame of ``clip``.

    Memory frames follow the training rules; the shuffle is drawn from
    ``seed``. Frames whose size is not a multiple of 16 raise ShapeError
    unless ``resize`` is set, in which case they are resized for the forward
    pass and the masks are resized back with nearest-neighbour sampling.
    """
    model.eval()
    frames = clip_tensor(clip)
    h, w = frames.shape[-2:]
    if h % 16 or w % 16:
        if not resize:
            raise ShapeError(f"{clip.name}: frame size {w}x{h} is not divisible by 16")
        nh, nw = max(16, round(h / 16) * 16), max(16, round(w / 16) * 16)
        warnings.warn(f"{clip.name}: resizing {w}x{h} frames to {nw}x{nh}")
        frames = F.interpolate(frames, size=(nh, nw), mode="bilinear", align_corners=False)
    T = len(clip)
    n = STAGE1_MEMORY_FRAMES if stage == 1 else model.cfg.memory_size
    perm = shuffle_video_index(T, seed)
    out = np.zeros((T, h, w), dtype=np.uint8)
    for t in range(T):
        sel = select_memory_frames(T, t, perm, n)
        logits = model.forward_detect(frames, sel, stage=stage)
        if logits.shape[-2:] != (h, w):
            logits = F.interpolate(logits[None], size=(h, w), mode="nearest")[0]
        out[t] = logits.argmax(dim=0).numpy().astype(np.uint8)
    return out

