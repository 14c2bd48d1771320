"""Command line entry point: ``mmalane <subcommand> ...``.

Every invocation writes all of its outputs under one run directory and
starts by recording a ``manifest.json`` (argv, resolved config, seed, input
hashes) so ``mmalane replay <manifest>`` can reproduce it.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 validation
error, 5 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import annotation as ag
from .data import (SyntheticSceneConfig, VideoClip, generate_synthetic_clip, load_scene_configs,
                   load_vil100_clip, read_frame_png, read_mask_png, read_split, save_clip,
                   write_frame_png, write_mask_png, write_split)
from .errors import ConfigError, MMALaneError, TrainingDivergedError, ValidationError
from .metrics import (MetricReport, boundary_f_measure, evaluate_sequences, format_table,
                      frame_jaccard, match_instances)
from .network import VARIANTS, MMANet, ModelConfig, load_checkpoint

log = logging.getLogger("mmalane")

DATA_ROOT_ENV = "MMALANE_DATA_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGED = 0, 2, 3, 4, 5

# label 1..8 -> RGB in [0, 1]; odd (left) labels warm, even (right) labels cool
PALETTE = np.array([
    [0.00, 0.00, 0.00],
    [0.90, 0.10, 0.10],
    [0.10, 0.45, 0.95],
    [1.00, 0.60, 0.00],
    [0.00, 0.80, 0.80],
    [0.95, 0.90, 0.10],
    [0.55, 0.20, 0.90],
    [0.60, 0.30, 0.10],
    [0.10, 0.75, 0.20],
])
OVERLAY_ALPHA = 0.6


# -- run manifest ----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root) -> str:
    """Digest of every file under ``root`` (relative paths plus contents)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(sha256_file(p).encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    hashes: dict[str, str] = field(default_factory=dict)
    status: str = "started"
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))

    def write(self, run_dir: Path) -> None:
        (run_dir / "manifest.json").write_text(
            json.dumps(dataclasses.asdict(self), indent=2, default=str))

    def record_inputs(self) -> None:
        for name, path in self.inputs.items():
            p = Path(path)
            if p.is_file():
                self.hashes[f"input:{name}"] = sha256_file(p)
            elif p.is_dir():
                self.hashes[f"input:{name}"] = hash_tree(p)

    def finish(self, run_dir: Path) -> None:
        for name, path in self.outputs.items():
            p = Path(path)
            if p.is_file():
                self.hashes[f"output:{name}"] = sha256_file(p)
            elif p.is_dir():
                self.hashes[f"output:{name}"] = hash_tree(p)
        self.status = "finished"
        self.write(run_dir)

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# -- config helpers --------------------------------------------------------

def load_yaml(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        obj = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return obj


def data_root(arg) -> Path:
    root = arg or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset given: pass --data or set {DATA_ROOT_ENV}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    return root


def _build(cls, section: dict, what: str, **base):
    try:
        return cls(**{**base, **section})
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def resolve_train_config(args) -> dict:
    """Merge the YAML training config with command-line overrides."""
    cfg = load_yaml(args.config)
    unknown = set(cfg) - {"model", "stage1", "stage2", "loss", "seed", "data", "augment_flip"}
    if unknown:
        raise ConfigError(f"unknown training config sections: {sorted(unknown)}")
    model = dict(cfg.get("model") or {})
    variant = args.variant or model.pop("variant", None)
    if variant:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; valid: {sorted(VARIANTS)}")
        la, gm, ml = VARIANTS[variant]
        model.update(use_local_attention=la, use_global_memory=gm, multi_level=ml)
    if args.memory_frames:
        model["memory_size"] = args.memory_frames
    stage1 = dict(cfg.get("stage1") or {})
    stage2 = dict(cfg.get("stage2") or {})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    for section, it in ((stage1, args.stage1_iterations), (stage2, args.stage2_iterations)):
        section["seed"] = seed
        if "augment_flip" in cfg:
            section.setdefault("augment_flip", bool(cfg["augment_flip"]))
        if it is not None:
            section["iterations"] = it
    stage2["memory_frames"] = model.get("memory_size", ModelConfig.memory_size)
    ModelConfig.from_dict(model)          # validate early, before the manifest
    return {"model": model, "stage1": stage1, "stage2": stage2,
            "loss": dict(cfg.get("loss") or {}), "seed": seed,
            "data": str(args.data or cfg.get("data") or os.environ.get(DATA_ROOT_ENV) or "")}


def load_split_clips(root: Path, split: str) -> list[VideoClip]:
    ids = read_split(root, split)
    if not ids:
        raise ValidationError(f"split {split!r} of {root} lists no videos")
    return [load_vil100_clip(root, vid) for vid in ids]


def _load_frames_only(video: Path) -> VideoClip:
    files = sorted(p for p in (video / "frames").glob("*") if p.stem.isdigit())
    if not files:
        raise FileNotFoundError(f"no frames under {video / 'frames'}")
    frames = np.stack([read_frame_png(p) for p in files])
    return VideoClip(frames, np.zeros(frames.shape[:3], np.uint8), name=video.name)


def write_prediction_masks(out: Path, name: str, masks: np.ndarray) -> Path:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(masks):
        write_mask_png(d / f"{t:05d}.png", m)
    return d


def read_prediction_masks(folder: Path) -> np.ndarray:
    files = sorted(p for p in Path(folder).glob("*.png") if p.stem.isdigit())
    if not files:
        raise FileNotFoundError(f"no prediction masks under {folder}")
    if [int(p.stem) for p in files] != list(range(len(files))):
        raise ValidationError(f"{folder}: prediction frame ids are not contiguous from 0")
    return np.stack([read_mask_png(p) for p in files])


# -- subcommands -----------------------------------------------------------

def cmd_generate(args, run_dir: Path, manifest: RunManifest) -> int:
    if args.config:
        scenes = load_scene_configs(args.config)
    else:
        scenes = [SyntheticSceneConfig(seed=i, n_lanes=2 + i % 3) for i in range(args.n_clips)]
    overrides = {k: v for k, v in (("length", args.length), ("occluders", args.occluders),
                                   ("frame_size", tuple(args.frame_size) if args.frame_size else None))
                 if v is not None}
    scenes = [SyntheticSceneConfig.from_dict({**s.to_dict(), **overrides,
                                              **({"seed": args.seed + i} if args.seed is not None else {})})
              for i, s in enumerate(scenes)]
    if not 0 <= args.test_clips <= len(scenes):
        raise ConfigError(f"--test-clips must lie in 0..{len(scenes)}")
    out = Path(args.out) if args.out else run_dir / "dataset"
    manifest.config = {"clips": [s.to_dict() for s in scenes], "test_clips": args.test_clips}
    manifest.outputs["dataset"] = str(out)
    manifest.write(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, scene in enumerate(scenes):
        vid = f"synth_{i:03d}"
        save_clip(generate_synthetic_clip(scene), out, vid)
        ids.append(vid)
    n_test = args.test_clips
    write_split(out, "train", ids[:len(ids) - n_test] if n_test else ids)
    write_split(out, "test", ids[len(ids) - n_test:] if n_test else [])
    log.info("wrote %d clips to %s", len(ids), out)
    return EXIT_OK


def cmd_train(args, run_dir: Path, manifest: RunManifest) -> int:
    from .training import LossConfig, StageConfig, train_stage1, train_stage2

    cfg = resolve_train_config(args)
    root = data_root(cfg["data"] or None)
    model_cfg = ModelConfig.from_dict(cfg["model"])
    s1 = _build(StageConfig.desk, cfg["stage1"], "stage1", stage=1)
    s2 = _build(StageConfig.desk, cfg["stage2"], "stage2", stage=2)
    loss = _build(LossConfig, cfg["loss"], "loss")
    manifest.config = {**cfg, "model": model_cfg.to_dict(), "stage1": s1.to_dict(),
                       "stage2": s2.to_dict(), "loss": dataclasses.asdict(loss)}
    manifest.seed = cfg["seed"]
    manifest.inputs["data"] = str(root)
    paths = {"stage1": run_dir / "stage1.pt", "stage2": run_dir / "stage2.pt",
             "log": run_dir / "train_log.jsonl"}
    manifest.outputs.update({k: str(v) for k, v in paths.items()})
    manifest.record_inputs()
    manifest.write(run_dir)

    clips = load_split_clips(root, args.split)
    import torch
    torch.manual_seed(cfg["seed"])
    model = MMANet(model_cfg)
    r1 = train_stage1(model, clips, s1, loss, checkpoint_path=paths["stage1"])
    r1.write_jsonl(paths["log"])
    print(r1.summary())
    r2 = train_stage2(model, paths["stage1"], clips, s2, loss, checkpoint_path=paths["stage2"])
    r2.write_jsonl(paths["log"])
    print(r2.summary())
    return EXIT_OK


def _baseline_rows(paths) -> list[dict]:
    rows = []
    for p in paths or []:
        rec = MetricReport.read_aggregate(p)
        rec.setdefault("name", Path(p).stem)
        rows.append(rec)
    return rows


def cmd_eval(args, run_dir: Path, manifest: RunManifest) -> int:
    root = data_root(args.data)
    manifest.seed = args.seed
    manifest.config = {"split": args.split, "oracle": args.oracle, "resize": args.resize,
                       "stage": args.stage, "baselines": [str(b) for b in args.baseline or []]}
    manifest.inputs["data"] = str(root)
    if not args.oracle:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --oracle is given")
        manifest.inputs["checkpoint"] = str(args.checkpoint)
    pred_dir = run_dir / "predictions"
    manifest.outputs.update(predictions=str(pred_dir), report=str(run_dir / "report.jsonl"),
                            table=str(run_dir / "table.txt"))
    manifest.record_inputs()
    manifest.write(run_dir)

    clips = load_split_clips(root, args.split)
    if args.oracle:
        preds, name = [c.masks.copy() for c in clips], "oracle"
    else:
        from .training import predict_clip
        model, _ = load_checkpoint(args.checkpoint)
        preds = [predict_clip(model, c, seed=args.seed, stage=args.stage, resize=args.resize)
                 for c in clips]
        name = args.name or model.cfg.variant
    for c, p in zip(clips, preds):
        write_prediction_masks(pred_dir, c.name, p)
    report = evaluate_sequences(preds, [c.masks for c in clips], [c.name for c in clips],
                                row_stride=args.row_stride, tolerance=args.tolerance, name=name)
    report.write_jsonl(run_dir / "report.jsonl")
    table = format_table([{**report.aggregate(), "name": name}] + _baseline_rows(args.baseline))
    (run_dir / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_infer(args, run_dir: Path, manifest: RunManifest) -> int:
    from .training import predict_clip

    root = data_root(args.data)
    videos = args.video or read_split(root, args.split)
    if not videos:
        raise ValidationError("no videos to run inference on")
    manifest.seed = args.seed
    manifest.config = {"videos": list(videos), "stage": args.stage, "resize": args.resize}
    manifest.inputs.update(data=str(root), checkpoint=str(args.checkpoint))
    manifest.outputs["predictions"] = str(run_dir / "predictions")
    manifest.record_inputs()
    manifest.write(run_dir)
    model, _ = load_checkpoint(args.checkpoint)
    for vid in videos:
        clip = _load_frames_only(root / vid)
        masks = predict_clip(model, clip, seed=args.seed, stage=args.stage, resize=args.resize)
        write_prediction_masks(run_dir / "predictions", vid, masks)
    return EXIT_OK


def cmd_stats(args, run_dir: Path, manifest: RunManifest) -> int:
    root = data_root(args.data)
    manifest.inputs["data"] = str(root)
    manifest.outputs["stats"] = str(run_dir / "stats.json")
    manifest.write(run_dir)
    stats = ag.compute_dataset_stats(root)
    (run_dir / "stats.json").write_text(json.dumps(stats.to_json(), indent=2))
    print(json.dumps(stats.to_json(), indent=2))
    return EXIT_OK


def overlay(frame: np.ndarray, mask: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend palette colors into ``frame`` on labelled pixels; background is untouched."""
    out = np.array(frame, dtype=np.float32, copy=True)
    lab = mask > 0
    out[lab] = (1 - alpha) * out[lab] + alpha * PALETTE[mask[lab]]
    return out


def per_frame_scores(pred: np.ndarray, gt: np.ndarray) -> dict[str, list[float]]:
    js, fs = [], []
    for p, g in zip(pred, gt):
        m = match_instances(p, g)
        js.append(frame_jaccard(m))
        fs.append(boundary_f_measure(p, g, matching=m))
    return {"J": js, "F": fs}


def cmd_visualize(args, run_dir: Path, manifest: RunManifest) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = data_root(args.data)
    pred_dir = Path(args.predictions) / args.video
    manifest.config = {"video": args.video}
    manifest.inputs.update(data=str(root / args.video), predictions=str(pred_dir))
    out = run_dir / "overlays"
    manifest.outputs.update(overlays=str(out), plot=str(run_dir / "scores.png"))
    manifest.record_inputs()
    manifest.write(run_dir)

    clip = load_vil100_clip(root, args.video)
    preds = read_prediction_masks(pred_dir)
    if preds.shape != clip.masks.shape:
        raise ValidationError(f"{args.video}: predictions {preds.shape} do not match the clip's "
                              f"frames {clip.masks.shape}")
    if preds.max() >= len(PALETTE):
        raise ValidationError(f"{args.video}: prediction labels exceed {len(PALETTE) - 1}")
    out.mkdir(parents=True, exist_ok=True)
    for t in range(len(clip)):
        write_frame_png(out / f"{t:05d}.png", overlay(clip.frames[t], preds[t]))
    scores = per_frame_scores(preds, clip.masks)
    fig, ax = plt.subplots(figsize=(6, 3))
    for k, v in scores.items():
        ax.plot(range(len(v)), v, marker="o", label=k)
    ax.set_xlabel("frame")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(args.video)
    ax.legend()
    fig.tight_layout()
    fig.savefig(run_dir / "scores.png")
    plt.close(fig)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmalane", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--run-dir", type=Path, default=None,
                        help="directory for every output of this run (default runs/<cmd>-<time>)")
        sp.add_argument("--seed", type=int, default=None)
        return sp

    g = common(sub.add_parser("generate", help="write a synthetic dataset"))
    g.add_argument("--config", type=Path, help="YAML scene config (mapping or clips: list)")
    g.add_argument("--out", type=Path, help="dataset directory (default <run-dir>/dataset)")
    g.add_argument("--n-clips", type=int, default=2)
    g.add_argument("--test-clips", type=int, default=0,
                   help="how many of the last clips go to the test split instead of train")
    g.add_argument("--length", type=int)
    g.add_argument("--occluders", type=int)
    g.add_argument("--frame-size", type=int, nargs=2, metavar=("W", "H"))

    t = common(sub.add_parser("train", help="stage 1 then stage 2 training"))
    t.add_argument("--config", type=Path, help="YAML with model/stage1/stage2/loss sections")
    t.add_argument("--data", type=Path, help=f"dataset root (default ${DATA_ROOT_ENV})")
    t.add_argument("--split", default="train")
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--memory-frames", type=int, choices=(3, 5, 7))
    t.add_argument("--stage1-iterations", type=int)
    t.add_argument("--stage2-iterations", type=int)

    e = common(sub.add_parser("eval", help="predict a split and score it"))
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--data", type=Path)
    e.add_argument("--split", default="test")
    e.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    e.add_argument("--baseline", type=Path, action="append",
                   help="stored report.jsonl to add as a comparison row (repeatable)")
    e.add_argument("--name", help="row name in the table (default: model variant)")
    e.add_argument("--stage", type=int, choices=(1, 2), default=2)
    e.add_argument("--resize", action="store_true",
                   help="resize frames not divisible by 16 instead of failing")
    e.add_argument("--row-stride", type=int, default=10)
    e.add_argument("--tolerance", type=float, default=0.008)

    i = common(sub.add_parser("infer", help="write predicted masks for videos"))
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path)
    i.add_argument("--video", action="append", help="video id (repeatable; default: --split)")
    i.add_argument("--split", default="test")
    i.add_argument("--stage", type=int, choices=(1, 2), default=2)
    i.add_argument("--resize", action="store_true")

    s = common(sub.add_parser("stats", help="dataset statistics"))
    s.add_argument("--data", type=Path)

    v = common(sub.add_parser("visualize", help="overlay predictions and plot per-frame scores"))
    v.add_argument("--predictions", type=Path, required=True,
                   help="directory holding <video>/%%05d.png prediction masks")
    v.add_argument("--data", type=Path)
    v.add_argument("--video", required=True)

    r = sub.add_parser("replay", help="rerun a recorded manifest")
    r.add_argument("manifest", type=Path)
    r.add_argument("--run-dir", type=Path, default=None)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "stats": cmd_stats, "visualize": cmd_visualize}


def _replay_argv(manifest_path: Path, run_dir: Path | None) -> list[str]:
    argv = list(RunManifest.read(manifest_path).argv)
    if "--run-dir" in argv:
        k = argv.index("--run-dir")
        del argv[k:k + 2]
    new_dir = run_dir or Path("runs") / f"replay-{time.strftime('%Y%m%d-%H%M%S')}"
    return argv + ["--run-dir", str(new_dir)]


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        return run(_replay_argv(args.manifest, args.run_dir))
    run_dir = args.run_dir or Path("runs") / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, list(argv), {}, args.seed)
    manifest.write(run_dir)
    code = COMMANDS[args.command](args, run_dir, manifest)
    manifest.finish(run_dir)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MMALaneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
