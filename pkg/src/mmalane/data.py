"""Video clips: synthetic generation, on-disk loading and memory-frame selection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from PIL import Image

from . import annotation as ag
from .errors import ConfigError, IntegrityError

MAX_SYNTHETIC_LANES = 6
DEFAULT_FPS = 10


@dataclass
class VideoClip:
    """T frames as a (T, H, W, 3) float32 array in [0, 1] plus (T, H, W) uint8 masks."""

    frames: np.ndarray
    masks: np.ndarray
    annotations: list = field(default_factory=list)
    fps: int = DEFAULT_FPS
    name: str = "clip"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.masks):
            raise IntegrityError(
                f"{self.name}: {len(self.frames)} frames but {len(self.masks)} masks")
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise IntegrityError(f"{self.name}: frames must be (T, H, W, 3)")
        if self.masks.shape != self.frames.shape[:3]:
            raise IntegrityError(f"{self.name}: mask shape {self.masks.shape[1:]} does not "
                                 f"match frame shape {self.frames.shape[1:3]}")

    def __len__(self):
        return len(self.frames)

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[1]


@dataclass
class MemorySelection:
    query_index: int
    local_indices: list[int]
    global_indices: list[int]
    shuffle_permutation: np.ndarray
    memory_size: int = 5


@dataclass
class SyntheticSceneConfig:
    seed: int = 0
    n_lanes: int = 2
    curvature: tuple[float, float] = (-0.12, 0.12)
    lane_spacing: float | None = None
    noise: float = 0.02
    occluders: int = 0
    frame_size: tuple[int, int] = (128, 64)
    length: int = 20
    horizon: float = 0.3
    brightness: float = 1.0
    haze: float = 0.0
    line_types: tuple[int, ...] | None = None
    ego_sway: float = 0.15

    def validate(self) -> None:
        if not 1 <= self.n_lanes <= MAX_SYNTHETIC_LANES:
            raise ConfigError(f"n_lanes must be in 1..{MAX_SYNTHETIC_LANES}, got {self.n_lanes}")
        w, h = self.frame_size
        if w < 16 or h < 16:
            raise ConfigError(f"frame_size too small: {self.frame_size}")
        if self.length < 1:
            raise ConfigError("length must be >= 1")
        if self.occluders < 0 or self.noise < 0:
            raise ConfigError("occluders and noise must be non-negative")
        if not 0.05 <= self.horizon <= 0.8:
            raise ConfigError("horizon must lie in [0.05, 0.8]")
        if self.line_types is not None and any(
                not 0 <= int(t) < ag.NUM_LINE_TYPES for t in self.line_types):
            raise ConfigError(f"line_types must be in 0..{ag.NUM_LINE_TYPES - 1}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("curvature", "frame_size", "line_types"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_scene_configs(path) -> list[SyntheticSceneConfig]:
    """Read a YAML file holding one config mapping or a ``clips:`` list of them."""
    obj = yaml.safe_load(Path(path).read_text()) or {}
    entries = obj.get("clips", [obj]) if isinstance(obj, dict) else obj
    return [SyntheticSceneConfig.from_dict(e) for e in entries]


# -- synthetic generator ---------------------------------------------------

def _position_offsets(n_lanes: int) -> dict[int, float]:
    """Signed lateral slot (in lane spacings) for labels 1..n_lanes."""
    offsets = {}
    for label in range(1, n_lanes + 1):
        i = (label + 1) // 2
        offsets[label] = -(i - 0.5) if label % 2 else (i - 0.5)
    return offsets


def _lane_geometry(cfg: SyntheticSceneConfig, rng: np.random.Generator):
    w, h = cfg.frame_size
    spacing = cfg.lane_spacing or w / (cfg.n_lanes + 1.0)
    c0 = rng.uniform(*cfg.curvature)
    return {
        "spacing": spacing,
        "c0": c0,
        "c_amp": rng.uniform(0.3, 1.0) * max(abs(cfg.curvature[0]), abs(cfg.curvature[1])) * 0.5,
        "c_period": rng.uniform(15, 40),
        "c_phase": rng.uniform(0, 2 * np.pi),
        "cubic": rng.uniform(-0.03, 0.03),
        "sway_period": rng.uniform(10, 30),
        "sway_phase": rng.uniform(0, 2 * np.pi),
        "vp_shift": rng.uniform(-0.05, 0.05) * w,
        "dash_speed": rng.uniform(0.2, 0.5),
    }


def _frame_lanes(cfg: SyntheticSceneConfig, geo: dict, t: int,
                 line_types: dict[int, int]) -> list[ag.ControlPointSet]:
    w, h = cfg.frame_size
    y_h = cfg.horizon * h
    y_bot = h - 1.0
    # lanes stop short of the vanishing point, where they would merge
    y_top = y_h + 0.15 * (y_bot - y_h)
    curv = geo["c0"] + geo["c_amp"] * np.sin(2 * np.pi * t / geo["c_period"] + geo["c_phase"])
    sway = cfg.ego_sway * geo["spacing"] * np.sin(
        2 * np.pi * t / geo["sway_period"] + geo["sway_phase"])
    vp_x = w / 2.0 + geo["vp_shift"]
    ys = np.linspace(y_top, y_bot, 8)
    u = (ys - y_h) / (y_bot - y_h)   # 0 at horizon, 1 at bottom
    bend = w * (curv * (1 - u) ** 2 + geo["cubic"] * (1 - u) ** 3)
    lanes = []
    for label, slot in _position_offsets(cfg.n_lanes).items():
        x_bottom = w / 2.0 + slot * geo["spacing"] - sway
        xs = vp_x + (x_bottom - vp_x) * u + bend
        keep = (xs >= 0) & (xs <= w - 1)
        if keep.sum() < 4:
            continue
        pts = np.stack([xs[keep], ys[keep]], axis=1)
        lanes.append(ag.ControlPointSet(pts, label, line_types[label]))
    return lanes


def _render_background(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    w, h = cfg.frame_size
    hy = int(cfg.horizon * h)
    img = np.empty((h, w, 3), dtype=np.float32)
    sky = np.linspace(0.75, 0.55, max(hy, 1))[:, None, None] * np.array([0.8, 0.9, 1.0])
    img[:hy] = sky[:hy]
    road = np.linspace(0.30, 0.42, h - hy)[:, None, None] * np.ones(3)
    img[hy:] = road
    img[hy:] += rng.normal(0, 0.02, size=(h - hy, w, 1)).astype(np.float32)
    return img


def _paint_mask(cps: ag.ControlPointSet, frame_size, t: int, geo: dict,
                horizon_y: float) -> np.ndarray:
    band = ag.rasterize_lane(ag.fit_lane_polynomial(cps), cps.lane_id, frame_size) > 0
    if cps.line_type.is_dotted:
        h = frame_size[1]
        rows = np.arange(h, dtype=np.float64)
        depth = 1.0 / np.maximum((rows - horizon_y) / (h - 1 - horizon_y), 0.05)
        on = np.sin(2 * np.pi * (depth * 0.8 + geo["dash_speed"] * t)) > -0.2
        band &= on[:, None]
    return band


def generate_synthetic_clip(cfg: SyntheticSceneConfig) -> VideoClip:
    """Render a deterministic lane video from ``cfg``.

    Lanes are cubics in x(y) whose curvature, vanishing point and ego sway
    drift smoothly over time. Masks are rasterized from the stored control
    points, so occluders hide paint but never change the masks.
    ``meta["visible_paint"]`` holds the paint pixel count left visible after
    occlusion, per frame and lane label.
    """
    cfg.validate()
    w, h = cfg.frame_size
    geo_seq, tex_seq, occ_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_geo = np.random.default_rng(geo_seq)
    rng_occ = np.random.default_rng(occ_seq)
    rng_noise = np.random.default_rng(noise_seq)

    geo = _lane_geometry(cfg, rng_geo)
    pool = cfg.line_types or (0, 2, 4, 5)
    line_types = {label: int(rng_geo.choice(pool)) for label in range(1, cfg.n_lanes + 1)}
    background = _render_background(cfg, np.random.default_rng(tex_seq))

    occluders = []
    for _ in range(cfg.occluders):
        ow = rng_occ.uniform(0.2, 0.35) * w
        oh = rng_occ.uniform(0.25, 0.4) * h
        x0 = rng_occ.uniform(0.1, 0.9) * w - ow / 2
        y0 = rng_occ.uniform(cfg.horizon + 0.15, 0.95) * h - oh / 2
        vx = rng_occ.uniform(-1.5, 1.5) * w / max(cfg.length, 1)
        shade = rng_occ.uniform(0.05, 0.25, size=3)
        occluders.append((x0, y0, ow, oh, vx, shade))

    frames = np.empty((cfg.length, h, w, 3), dtype=np.float32)
    annotations = []
    visible = np.zeros((cfg.length, cfg.n_lanes), dtype=np.int64)
    horizon_y = cfg.horizon * h
    for t in range(cfg.length):
        lanes = _frame_lanes(cfg, geo, t, line_types)
        annotations.append((t, lanes))
        img = background.copy()
        paints = []
        for cps in lanes:
            paint = _paint_mask(cps, cfg.frame_size, t, geo, horizon_y)
            color = (0.95, 0.82, 0.2) if cps.line_type.is_yellow else (0.95, 0.95, 0.95)
            img[paint] = color
            paints.append((cps.lane_id, paint))
        occluded = np.zeros((h, w), dtype=bool)
        for x0, y0, ow, oh, vx, shade in occluders:
            xa = int(round(x0 + vx * t))
            ya = int(round(y0))
            xa0, xa1 = max(0, xa), min(w, xa + int(ow))
            ya0, ya1 = max(0, ya), min(h, ya + int(oh))
            if xa0 < xa1 and ya0 < ya1:
                img[ya0:ya1, xa0:xa1] = shade
                occluded[ya0:ya1, xa0:xa1] = True
        for label, paint in paints:
            visible[t, label - 1] = int((paint & ~occluded).sum())
        img = img * cfg.brightness
        if cfg.haze:
            img = (1 - cfg.haze) * img + cfg.haze * 0.8
        if cfg.noise:
            img = img + rng_noise.normal(0, cfg.noise, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)

    masks = np.stack(ag.frames_to_instance_masks(annotations, cfg.frame_size, cfg.length))
    return VideoClip(frames, masks, annotations, DEFAULT_FPS, f"synth_{cfg.seed:05d}",
                     {"visible_paint": visible, "config": cfg.to_dict()})


def hflip_clip(clip: VideoClip) -> VideoClip:
    """Mirror a clip left-right; left/right position labels swap (1<->2, 3<->4, ...)."""
    swap = np.arange(ag.MAX_LABEL + 1, dtype=np.uint8)
    swap[1::2] += 1
    swap[2::2] -= 1
    w = clip.frames.shape[2]
    annotations = []
    for i, lanes in clip.annotations:
        flipped = []
        for c in lanes:
            pts = c.points.copy()
            pts[:, 0] = (w - 1) - pts[:, 0]
            flipped.append(ag.ControlPointSet(pts, int(swap[c.lane_id]), c.line_type))
        annotations.append((i, flipped))
    return VideoClip(clip.frames[:, :, ::-1].copy(), swap[clip.masks[:, :, ::-1]],
                     annotations, clip.fps, clip.name + "_flip", dict(clip.meta))


# -- memory selection ------------------------------------------------------

def shuffle_video_index(T: int, seed: int) -> np.ndarray:
    """Uniform random permutation of 0..T-1, reproducible from ``seed``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return np.random.default_rng(seed).permutation(T)


def select_memory_frames(T: int, t: int, permutation: Sequence[int] | None = None,
                         N: int = 5) -> MemorySelection:
    """Local memory: the N frames before t. Global: the N entries before t in the shuffle.

    Missing predecessors are filled with the earliest available index, which
    is t itself when t has none.
    """
    if not 0 <= t < T:
        raise ValueError(f"query index {t} outside [0, {T})")
    perm = np.arange(T) if permutation is None else np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(T)):
        raise ValueError("permutation is not a permutation of 0..T-1")
    local = [max(i, 0) for i in range(t - N, t)]
    pos = int(np.flatnonzero(perm == t)[0])
    glob = [int(perm[max(j, 0)]) for j in range(pos - N, pos)]
    return MemorySelection(t, local, glob, perm, N)


# -- on-disk datasets ------------------------------------------------------

def _index_files(folder: Path, suffixes: tuple[str, ...]) -> dict[int, Path]:
    out = {}
    if folder.is_dir():
        for p in folder.iterdir():
            if p.suffix.lower() in suffixes and p.stem.isdigit():
                out[int(p.stem)] = p
    return out


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def read_frame_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_frame_png(path, frame: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_clip(clip: VideoClip, root, video_id: str | None = None, write_masks: bool = True) -> Path:
    """Write ``root/<video>/{frames,anno,masks}/%05d.*``."""
    video = Path(root) / (video_id or clip.name)
    for sub in ("frames", "anno", "masks"):
        (video / sub).mkdir(parents=True, exist_ok=True)
    lanes_by_frame = dict(clip.annotations)
    for t in range(len(clip)):
        write_frame_png(video / "frames" / f"{t:05d}.png", clip.frames[t])
        ag.write_annotation_file(video / "anno" / f"{t:05d}.json", t, lanes_by_frame.get(t, []))
        if write_masks:
            write_mask_png(video / "masks" / f"{t:05d}.png", clip.masks[t])
    return video


def load_vil100_clip(root, video_id: str, use_cache: bool = True) -> VideoClip:
    """Load one clip stored as ``root/<video>/frames`` + ``anno`` (+ optional ``masks``)."""
    video = Path(root) / video_id
    if not video.is_dir():
        raise FileNotFoundError(f"video directory {video} does not exist")
    frame_files = _index_files(video / "frames", (".png", ".jpg", ".jpeg"))
    anno_files = _index_files(video / "anno", (".json",))
    if not frame_files:
        raise IntegrityError(f"{video_id}: no frames found")
    for i in sorted(frame_files):
        if i not in anno_files:
            raise IntegrityError(f"{video_id}: missing annotation for frame {i}")
    for i in sorted(anno_files):
        if i not in frame_files:
            raise IntegrityError(f"{video_id}: annotation for frame {i} has no image")
    order = sorted(frame_files)
    if order != list(range(len(order))):
        raise IntegrityError(f"{video_id}: frame indices are not contiguous from 0")
    frames = np.stack([read_frame_png(frame_files[i]) for i in order])
    h, w = frames.shape[1:3]
    annotations = []
    for i in order:
        for idx, lanes in ag.parse_annotation_file(anno_files[i]):
            annotations.append((i, lanes))
    mask_files = _index_files(video / "masks", (".png",)) if use_cache else {}
    if mask_files and all(i in mask_files for i in order):
        masks = np.stack([read_mask_png(mask_files[i]) for i in order])
    else:
        masks = np.stack(ag.frames_to_instance_masks(annotations, (w, h), len(order)))
    return VideoClip(frames, masks, annotations, DEFAULT_FPS, video_id)


def read_split(root, split: str) -> list[str]:
    """Video ids listed in ``root/<split>.txt``."""
    path = Path(root) / f"{split}.txt"
    if not path.exists():
        raise FileNotFoundError(f"split list {path} does not exist")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def write_split(root, split: str, ids: Sequence[str]) -> None:
    Path(root, f"{split}.txt").write_text("".join(f"{i}\n" for i in ids))
