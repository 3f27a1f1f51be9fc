"""``avatar-router`` command line: gen-data, train, sample, eval, inspect-mask.

Exit codes: 0 success, 2 usage or validation error, 1 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import Config, ConfigError, load_config
from .evaluate import aggregate, clip_report
from .mask_algebra import DetectionError
from .model import AvatarModel, CheckpointError, load_checkpoint
from .sampler import SampleInputError, SampleRequest, sample, write_result
from .synthgen import ClipDims, gen_dataset, load_clip, load_manifest, load_split
from .tensor_store import TensorFormatError, read_tensor
from .trainer import run_stage

# character 1, character 2, background; extra characters cycle the first two
MASK_PALETTE = np.array([[230, 60, 50], [60, 200, 80], [20, 20, 40]], dtype=np.uint8)
CELL_PX = 8


class UsageError(ValueError):
    pass


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    count = args.count if args.count is not None else cfg.data.count
    mix = args.mix if args.mix is not None else cfg.data.mix
    seed = args.seed if args.seed is not None else cfg.data.seed
    frac = args.test_fraction if args.test_fraction is not None else cfg.data.test_fraction
    if count < 1:
        raise UsageError("--count must be positive")
    if not 0.0 <= frac <= 1.0:
        raise UsageError("--test-fraction must be in [0, 1]")
    gen_dataset(count, mix, args.out, seed, ClipDims(), frac)
    path = Path(args.out) / "manifest.json"
    print(path)
    return 0


def _training_data(cfg: Config, data_flag):
    root = Path(data_flag or cfg.data.root)
    if not (root / "manifest.json").is_file():
        raise UsageError(f"no dataset manifest under {root}")
    return load_manifest(root)


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.lr is not None:
        cfg.train.lr = args.lr
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if args.steps is not None:
        setattr(cfg.train, f"steps_stage{args.stage}", args.steps)
    seed = args.seed if args.seed is not None else cfg.train.seed
    if args.stage > 1 and not args.resume:
        raise UsageError(f"stage {args.stage} needs --resume with a stage-{args.stage - 1} checkpoint")
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        if meta["stage"] != args.stage - 1 and not (args.stage == 1 and meta["stage"] == 1):
            raise UsageError(f"--resume checkpoint is from stage {meta['stage']}, stage {args.stage} needs stage {args.stage - 1}")
    else:
        torch.manual_seed(seed)
        model = AvatarModel(cfg.model)
    manifest = _training_data(cfg, args.data)
    clips = load_split(manifest, "train")
    if not clips:
        raise UsageError("training split is empty")
    report = run_stage(cfg.stage_plan(args.stage), clips, model, seed=seed, out_dir=args.out)
    print(report["checkpoint"])
    return 0


def _load_conditions(directory) -> SampleRequest:
    d = Path(directory)
    meta_file = d / "conditions.json"
    if not meta_file.is_file():
        raise UsageError(f"{d} has no conditions.json")
    meta = json.loads(meta_file.read_text())
    inpaint = read_tensor(d / "inpaint.byat") if (d / "inpaint.byat").is_file() else None
    a_ac = np.asarray(meta["a_ac"], dtype=np.uint8) if "a_ac" in meta else None
    return SampleRequest(
        refs=read_tensor(d / "refs.byat"),
        audio=read_tensor(d / "audio.byat"),
        prompt_id=int(meta["prompt_id"]),
        inpaint=inpaint,
        face_boxes=meta.get("face_boxes"),
        a_ac=a_ac,
    )


def cmd_sample(args) -> int:
    cfg = _config(args)
    model, meta = load_checkpoint(args.ckpt)
    mode = args.mode or cfg.sampler.mode
    if mode == "intra" and meta["stage"] < 3:
        raise UsageError("intra-denoise routing needs a stage-3 checkpoint with a trained router")
    opts = {
        "mode": mode,
        "steps": args.steps if args.steps is not None else cfg.sampler.steps,
        "cfg_scale": args.cfg if args.cfg is not None else cfg.sampler.cfg_scale,
        "seed": args.seed if args.seed is not None else cfg.sampler.seed,
        "theta": cfg.router.theta,
        "max_iters": cfg.router.max_iters,
    }
    if args.clip:
        clip = load_clip(args.clip)
        req = SampleRequest.from_clip(clip, **opts)
        if args.no_inpaint:
            req.inpaint = None
    else:
        base = _load_conditions(args.conditions)
        req = SampleRequest(**{**vars(base), **opts})
    if req.mode == "pre" and req.inpaint is None:
        raise UsageError("pre mode needs an inpainting frame")
    result = sample(req, model)
    write_result(result, args.out)
    print(f"nfe {result.nfe}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, meta = load_checkpoint(args.ckpt)
    mode = args.mode or cfg.sampler.mode
    if mode == "intra" and meta["stage"] < 3:
        raise UsageError("intra-denoise routing needs a stage-3 checkpoint with a trained router")
    manifest = _training_data(cfg, args.data)
    clips = load_split(manifest, args.split)
    if args.limit:
        clips = clips[: args.limit]
    if not clips:
        raise UsageError(f"split {args.split!r} is empty")
    steps = args.steps if args.steps is not None else cfg.sampler.steps
    scale = args.cfg if args.cfg is not None else cfg.sampler.cfg_scale
    seed = args.seed if args.seed is not None else cfg.sampler.seed
    per_clip = [clip_report(model, c, mode, steps, scale, seed) for c in clips]
    report = {"mode": mode, "split": args.split, "aggregate": aggregate(per_clip), "clips": per_clip}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(json.dumps(report["aggregate"], sort_keys=True))
    return 0


def mask_image(mask_layer: np.ndarray, cell: int = CELL_PX) -> np.ndarray:
    """``(n+1) x T x h x w`` mask to an RGB grid ``h*cell x T*w*cell x 3``, one panel per frame."""
    labels = np.asarray(mask_layer).argmax(axis=0)  # T x h x w
    n_cls = mask_layer.shape[0]
    palette = np.concatenate([np.resize(MASK_PALETTE[:2], (n_cls - 1, 3)), MASK_PALETTE[2:]], axis=0)
    rgb = palette[labels]  # T x h x w x 3
    rgb = rgb.repeat(cell, axis=1).repeat(cell, axis=2)
    return np.concatenate(list(rgb), axis=1)


def cmd_inspect_mask(args) -> int:
    from PIL import Image

    d = Path(args.sample_dir)
    files = sorted(d.glob("masks_step*.byat"), key=lambda p: int(p.stem.replace("masks_step", "")))
    if not files:
        raise UsageError(f"no mask files in {d}")
    step = args.step if args.step is not None else len(files) - 1
    if not 0 <= step < len(files):
        raise UsageError(f"step {step} out of range [0, {len(files)})")
    mask = read_tensor(d / f"masks_step{step}.byat")
    if not 0 <= args.layer < mask.shape[0]:
        raise UsageError(f"layer {args.layer} out of range [0, {mask.shape[0]})")
    grid = mask_image(mask[args.layer])
    out = Path(args.out) if args.out else d
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "png-grid":
        path = out / f"mask_layer{args.layer}_step{step}.png"
        Image.fromarray(grid).save(path, optimize=False)
    else:
        T = mask.shape[2]
        frames = [Image.fromarray(p) for p in np.split(grid, T, axis=1)]
        path = out / f"mask_layer{args.layer}_step{step}.gif"
        frames[0].save(path, save_all=True, append_images=frames[1:], duration=250, loop=0)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatar-router", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--count", type=int)
    g.add_argument("--mix", type=float, help="fraction of single-character clips")
    g.add_argument("--seed", type=int)
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint of the previous stage")
    t.add_argument("--data", help="dataset directory (overrides data.root)")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate one clip")
    s.add_argument("--mode", choices=("pre", "post", "intra"))
    s.add_argument("--ckpt", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--clip", help="dataset clip directory")
    src.add_argument("--conditions", help="directory with refs/audio(/inpaint).byat and conditions.json")
    s.add_argument("--no-inpaint", action="store_true", help="ignore the clip's inpainting frame")
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="proxy metrics on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=("pre", "post", "intra"))
    e.add_argument("--steps", type=int)
    e.add_argument("--cfg", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--limit", type=int, help="evaluate only the first N clips")
    e.add_argument("--config")
    e.add_argument("--out", help="write the full JSON report here")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-mask", help="export routing masks as images")
    m.add_argument("--sample-dir", required=True)
    m.add_argument("--layer", type=int, default=0)
    m.add_argument("--step", type=int)
    m.add_argument("--format", choices=("png-grid", "gif"), default="png-grid")
    m.add_argument("--out")
    m.set_defaults(func=cmd_inspect_mask)
    return p


VALIDATION_ERRORS = (
    UsageError,
    ConfigError,
    CheckpointError,
    SampleInputError,
    DetectionError,
    TensorFormatError,
    FileNotFoundError,
    ValueError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
