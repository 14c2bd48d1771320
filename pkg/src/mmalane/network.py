"""Multi-level memory aggregation network for video instance lane detection.

Data flow for one query frame ``t``::

    frames --encoder--> (f1, f2, L, H)            strides 2, 4, 8, 16
    L, H of memory frames --key/value convs--> local / global banks
    banks --LGMA (attention blocks)--> one aggregated key/value pair per level
    query key/value + aggregated pair --memory read--> read_low, read_high
    read_low, read_high, f1, f2 --decoder--> K-class logits at full resolution

All tensors are NCHW. Memory stacks are (B, N, C, H, W).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

CHECKPOINT_FORMAT = "mmalane-checkpoint"
CHECKPOINT_VERSION = 1

# (use_local_attention, use_global_memory, multi_level)
VARIANTS = {
    "basic": (False, False, False),
    "lm": (True, False, False),
    "gm": (False, True, False),
    "lgm": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class ModelConfig:
    encoder_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    value_channels: tuple[int, int] = (64, 128)
    attention_hidden: int = 32
    decoder_channels: int = 256
    memory_size: int = 5
    use_local_attention: bool = True
    use_global_memory: bool = True
    multi_level: bool = True
    num_classes: int = 9
    share_query_projection: bool = True

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.value_channels = tuple(self.value_channels)
        if len(self.encoder_channels) != 4 or len(self.value_channels) != 2:
            raise ConfigError("encoder_channels needs 4 widths, value_channels 2")
        if any(c % 4 for c in self.value_channels):
            raise ConfigError("value_channels must be divisible by 4 (keys use C_v / 4)")
        if self.memory_size < 1:
            raise ConfigError("memory_size must be >= 1")
        self.variant  # raises on combinations outside the ablation set

    @property
    def key_channels(self) -> tuple[int, int]:
        return tuple(c // 4 for c in self.value_channels)

    @property
    def variant(self) -> str:
        flags = (self.use_local_attention, self.use_global_memory, self.multi_level)
        for name, v in VARIANTS.items():
            if v == flags:
                return name
        raise ConfigError(
            f"flag combination use_local_attention={flags[0]}, use_global_memory={flags[1]}, "
            f"multi_level={flags[2]} is not an ablation variant; valid: {sorted(VARIANTS)}")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; valid: {sorted(VARIANTS)}")
        la, gm, ml = VARIANTS[variant]
        return cls(use_local_attention=la, use_global_memory=gm, multi_level=ml, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    low: torch.Tensor
    high: torch.Tensor


class KeyValuePair(NamedTuple):
    key: torch.Tensor
    value: torch.Tensor


@dataclass
class MemoryBank:
    """Key/value maps of the local and global memory frames at one level.

    ``local`` and ``global_`` are KeyValuePairs of (B, N, C, H, W) stacks.
    """

    level: str
    local: KeyValuePair
    global_: KeyValuePair | None = None


# -- building blocks -------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, indim: int, outdim: int | None = None, stride: int = 1):
        super().__init__()
        outdim = outdim or indim
        self.conv1 = nn.Conv2d(indim, outdim, 3, padding=1, stride=stride)
        self.conv2 = nn.Conv2d(outdim, outdim, 3, padding=1)
        self.downsample = None
        if indim != outdim or stride != 1:
            self.downsample = nn.Conv2d(indim, outdim, 3, padding=1, stride=stride)

    def forward(self, x):
        r = self.conv1(F.relu(x))
        r = self.conv2(F.relu(r))
        if self.downsample is not None:
            x = self.downsample(x)
        return x + r


class Encoder(nn.Module):
    """Four stride-2 stages; returns skips at strides 2 and 4 plus L and H."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stem = nn.Conv2d(3, c1, 3, padding=1, stride=2)
        self.stage1 = ResBlock(c1)
        self.stage2 = ResBlock(c1, c2, stride=2)
        self.stage3 = ResBlock(c2, c3, stride=2)
        self.stage4 = ResBlock(c3, c4, stride=2)

    def forward(self, x) -> FeaturePyramid:
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ShapeError(f"input size {tuple(x.shape[-2:])} is not divisible by 16")
        f1 = self.stage1(F.relu(self.stem(x - 0.5)))
        f2 = self.stage2(f1)
        low = self.stage3(f2)
        high = self.stage4(low)
        return FeaturePyramid(f1, f2, low, high)


class KeyValue(nn.Module):
    """Two 3x3 convolutions mapping a feature map to a key and a value map."""

    def __init__(self, indim: int, keydim: int, valdim: int):
        super().__init__()
        self.indim = indim
        self.key = nn.Conv2d(indim, keydim, 3, padding=1)
        self.value = nn.Conv2d(indim, valdim, 3, padding=1)

    def forward(self, x) -> KeyValuePair:
        if x.shape[-3] != self.indim:
            raise ShapeError(f"expected {self.indim} input channels, got {x.shape[-3]}")
        return KeyValuePair(self.key(x), self.value(x))


class AttentionBlock(nn.Module):
    """Learned per-location convex combination of N maps.

    concat -> 1x1 -> 3x3 -> 3x3 -> 1x1 -> softmax over the N weight channels,
    then ``Z_att = sum_i W_i * Z_i`` with W_i broadcast over feature channels.
    """

    def __init__(self, channels: int, n_inputs: int = 5, hidden: int = 32):
        super().__init__()
        self.channels = channels
        self.n_inputs = n_inputs
        self.reduce = nn.Conv2d(n_inputs * channels, hidden, 1)
        self.conv1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.weights = nn.Conv2d(hidden, n_inputs, 1)
        # start as a plain average so stage 2 begins close to the stage-1 mean memory
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)

    def forward(self, zs) -> tuple[torch.Tensor, torch.Tensor]:
        if isinstance(zs, (list, tuple)):
            shapes = {tuple(z.shape) for z in zs}
            if len(shapes) != 1:
                raise ShapeError(f"attention inputs differ in shape: {sorted(shapes)}")
            zs = torch.stack(list(zs), dim=1)
        b, n, c, h, w = zs.shape
        if n != self.n_inputs or c != self.channels:
            raise ShapeError(f"attention block expects {self.n_inputs} maps of {self.channels} "
                             f"channels, got {n} of {c}")
        x = F.relu(self.reduce(zs.reshape(b, n * c, h, w)))
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        weights = torch.softmax(self.weights(x), dim=1)
        return (weights.unsqueeze(2) * zs).sum(dim=1), weights


class LGMA(nn.Module):
    """Local-global memory aggregation at one feature level.

    Keys and values each get one attention block per memory; the local and
    global results are added. Disabled attention falls back to the plain mean
    over memory frames.
    """

    def __init__(self, keydim: int, valdim: int, n_inputs: int, hidden: int,
                 use_local_attention: bool = True, use_global_memory: bool = True):
        super().__init__()
        self.use_local_attention = use_local_attention
        self.use_global_memory = use_global_memory
        if use_local_attention:
            self.key_local = AttentionBlock(keydim, n_inputs, hidden)
            self.value_local = AttentionBlock(valdim, n_inputs, hidden)
        if use_global_memory:
            self.key_global = AttentionBlock(keydim, n_inputs, hidden)
            self.value_global = AttentionBlock(valdim, n_inputs, hidden)

    def forward(self, bank: MemoryBank) -> KeyValuePair:
        if bank.local is None:
            raise ShapeError(f"{bank.level} memory bank has no local memory")
        if self.use_local_attention:
            key = self.key_local(bank.local.key)[0]
            value = self.value_local(bank.local.value)[0]
        else:
            key = bank.local.key.mean(dim=1)
            value = bank.local.value.mean(dim=1)
        if self.use_global_memory:
            if bank.global_ is None:
                raise ShapeError(f"{bank.level} memory bank has no global memory")
            key = key + self.key_global(bank.global_.key)[0]
            value = value + self.value_global(bank.global_.value)[0]
        return KeyValuePair(key, value)


def memory_read(memory: KeyValuePair, query: KeyValuePair,
                return_affinity: bool = False):
    """Non-local read of an aggregated memory by the query key.

    ``A[p, q] = softmax_q(<k_query(p), k_mem(q)> / sqrt(C_k))`` and
    ``r(p) = sum_q A[p, q] v_mem(q)``; returns ``cat(r, v_query)``.
    """
    mk, mv = memory
    qk, qv = query
    if mk.shape != qk.shape or mv.shape[-2:] != qv.shape[-2:] or mv.shape[1] != qv.shape[1]:
        raise ShapeError(f"memory ({tuple(mk.shape)}, {tuple(mv.shape)}) and query "
                         f"({tuple(qk.shape)}, {tuple(qv.shape)}) maps do not match")
    b, ck, h, w = qk.shape
    logits = torch.einsum("bcp,bcq->bpq", qk.reshape(b, ck, h * w), mk.reshape(b, ck, h * w))
    affinity = torch.softmax(logits / math.sqrt(ck), dim=-1)
    read = torch.einsum("bpq,bcq->bcp", affinity, mv.reshape(b, mv.shape[1], h * w))
    out = torch.cat([read.reshape(b, -1, h, w), qv], dim=1)
    return (out, affinity) if return_affinity else out


class Refine(nn.Module):
    """Fuse a skip feature with the upsampled coarser decoder state (x2)."""

    def __init__(self, skipdim: int, dim: int):
        super().__init__()
        self.convFS = nn.Conv2d(skipdim, dim, 3, padding=1)
        self.resFS = ResBlock(dim)
        self.resMM = ResBlock(dim)

    def forward(self, skip, prev):
        s = self.resFS(self.convFS(skip))
        m = s + F.interpolate(prev, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.resMM(m)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2 = cfg.encoder_channels[:2]
        vl, vh = cfg.value_channels
        d = cfg.decoder_channels
        self.compress_low = nn.Sequential(nn.Conv2d(2 * vl, d, 3, padding=1), ResBlock(d))
        self.compress_high = nn.Sequential(nn.Conv2d(2 * vh, d, 3, padding=1), ResBlock(d))
        self.refine_low = Refine(d, d)    # stride 16 -> 8
        self.refine_f2 = Refine(c2, d)    # 8 -> 4
        self.refine_f1 = Refine(c1, d)    # 4 -> 2
        self.pred = nn.Conv2d(d, cfg.num_classes, 3, padding=1)

    def forward(self, read_low, read_high, f1, f2):
        if read_high.shape[-1] * 2 != read_low.shape[-1] or f2.shape[-1] != 2 * read_low.shape[-1] \
                or f1.shape[-1] != 2 * f2.shape[-1]:
            raise ShapeError("decoder inputs are not at strides 2, 4, 8, 16 of one frame")
        m = self.compress_high(read_high)
        m = self.refine_low(self.compress_low(read_low), m)
        m = self.refine_f2(f2, m)
        m = self.refine_f1(f1, m)
        logits = self.pred(F.relu(m))
        return F.interpolate(logits, scale_factor=2, mode="bilinear", align_corners=False)


# -- full model ------------------------------------------------------------

class MMANet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        _, _, cl, ch = cfg.encoder_channels
        (kl, kh), (vl, vh) = cfg.key_channels, cfg.value_channels
        self.encoder = Encoder(cfg.encoder_channels)
        self.kv_low = KeyValue(cl, kl, vl)
        self.kv_high = KeyValue(ch, kh, vh)
        if not cfg.share_query_projection:
            self.query_kv_low = KeyValue(cl, kl, vl)
            self.query_kv_high = KeyValue(ch, kh, vh)
        lgma_args = dict(n_inputs=cfg.memory_size, hidden=cfg.attention_hidden,
                         use_local_attention=cfg.use_local_attention,
                         use_global_memory=cfg.use_global_memory)
        self.lgma_high = LGMA(kh, vh, **lgma_args)
        if cfg.multi_level:
            self.lgma_low = LGMA(kl, vl, **lgma_args)
        self.decoder = Decoder(cfg)

    # individual stages
    def encode_frame(self, image: torch.Tensor) -> FeaturePyramid:
        squeeze = image.dim() == 3
        pyr = self.encoder(image.unsqueeze(0) if squeeze else image)
        return FeaturePyramid(*(p[0] for p in pyr)) if squeeze else pyr

    def project_key_value(self, feature: torch.Tensor, level: str, query: bool = False) -> KeyValuePair:
        if level not in ("low", "high"):
            raise ShapeError(f"unknown level {level!r}")
        if query and not self.cfg.share_query_projection:
            return getattr(self, f"query_kv_{level}")(feature)
        return getattr(self, f"kv_{level}")(feature)

    def lgma_aggregate(self, bank: MemoryBank) -> KeyValuePair:
        return getattr(self, f"lgma_{bank.level}")(bank)

    def decode(self, read_low, read_high, f1, f2) -> torch.Tensor:
        return self.decoder(read_low, read_high, f1, f2)

    def _bank(self, feats: torch.Tensor, level: str, b: int, local_pos, global_pos) -> MemoryBank:
        kv = self.project_key_value(feats, level)

        def gather(pos):
            k = kv.key[pos].reshape(b, len(pos) // b, *kv.key.shape[1:])
            v = kv.value[pos].reshape(b, len(pos) // b, *kv.value.shape[1:])
            return KeyValuePair(k, v)

        return MemoryBank(level, gather(local_pos), gather(global_pos) if global_pos else None)

    def forward(self, query: torch.Tensor, local_frames: torch.Tensor,
                global_frames: torch.Tensor | None = None, stage: int = 2) -> torch.Tensor:
        """Logits (B, K, H, W) for query frames (B, 3, H, W).

        ``local_frames``/``global_frames`` are (B, N, 3, H, W). With
        ``stage=1`` the local memory is mean-aggregated and no global
        memory is used, whatever the configured variant.
        """
        b, n = local_frames.shape[:2]
        stacks = [query, local_frames.flatten(0, 1)]
        use_global = stage == 2 and self.cfg.use_global_memory
        if use_global:
            if global_frames is None:
                raise ShapeError("variant needs global memory frames")
            stacks.append(global_frames.flatten(0, 1))
        return self._forward_encoded(self.encoder(torch.cat(stacks)), b, n, use_global, stage)

    def forward_detect(self, frames: torch.Tensor, selection, stage: int = 2,
                       local_indices: Sequence[int] | None = None) -> torch.Tensor:
        """Logits (K, H, W) for frame ``selection.query_index`` of a (T, 3, H, W) clip.

        Each distinct frame is encoded once even if it appears in several
        memory slots.
        """
        t = selection.query_index
        local = list(local_indices if local_indices is not None else selection.local_indices)
        use_global = stage == 2 and self.cfg.use_global_memory
        glob = list(selection.global_indices) if use_global else []
        unique = sorted({t, *local, *glob})
        where = {f: i for i, f in enumerate(unique)}
        pyr = self.encoder(frames[unique])
        order = [where[t]] + [where[i] for i in local] + [where[i] for i in glob]
        pyr = FeaturePyramid(*(p[order] for p in pyr))
        return self._forward_encoded(pyr, 1, len(local), use_global, stage)[0]

    def _forward_encoded(self, pyr: FeaturePyramid, b: int, n: int, use_global: bool,
                         stage: int) -> torch.Tensor:
        local_pos = list(range(b, b + b * n))
        global_pos = list(range(b + b * n, b + 2 * b * n)) if use_global else []
        reads = {}
        for level in ("low", "high"):
            feats = getattr(pyr, level)
            q = self.project_key_value(feats[:b], level, query=True)
            if level == "low" and not self.cfg.multi_level:
                reads[level] = torch.cat([torch.zeros_like(q.value), q.value], dim=1)
                continue
            bank = self._bank(feats, level, b, local_pos, global_pos)
            if stage == 1:
                mem = KeyValuePair(bank.local.key.mean(1), bank.local.value.mean(1))
            else:
                mem = self.lgma_aggregate(bank)
            reads[level] = memory_read(mem, q)
        return self.decode(reads["low"], reads["high"], pyr.f1[:b], pyr.f2[:b])


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: MMANet, extra: dict | None = None) -> None:
    """Write a torch archive: format tag, version, model config, weights, extras."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }, path)


def load_checkpoint(path) -> tuple[MMANet, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format")
    model = MMANet(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state_dict"])
    return model, blob["extra"]
