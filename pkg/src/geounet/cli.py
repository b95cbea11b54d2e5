"""Command-line entry point: generate, train, eval, infer, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

logger = logging.getLogger("geounet")

DATA_ENV = "GEOUNET_DATA_DIR"


def _fraction(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {v}")
    return v


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _write_run_manifest(out, command, args, **extra):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                 if k != "func"},
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }
    (out / "run_manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))


def _data_dir(args):
    data = args.data or os.environ.get(DATA_ENV)
    if not data:
        raise FileNotFoundError(f"no dataset given (use --data or set {DATA_ENV})")
    path = Path(data)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no manifest.json under {path}")
    return path


def cmd_generate(args):
    from .phantom import make_dataset

    manifest = make_dataset(args.n_train, args.n_val, args.n_test, args.n2_fraction, args.seed,
                            args.out, H=args.size)
    counts = {s: sum(e["split"] == s for e in manifest["samples"]) for s in ("train", "val", "test")}
    print(json.dumps({"out": str(args.out), **counts}))
    return 0


def _train_config(args):
    from .model import ModelConfig
    from .training import TrainConfig

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = TrainConfig.from_json(base)
    model_over = {k: getattr(args, k) for k in ("depth", "base_channels") if getattr(args, k) is not None}
    if args.size is not None:
        model_over["R"] = args.size
    if args.seed is not None:
        cfg.seed = args.seed
        model_over["seed"] = args.seed
    m = cfg.model
    params = {"R": m.R, "depth": m.depth, "base_channels": m.base_channels, "seed": m.seed, **model_over}
    cfg.model = ModelConfig.variant(args.variant, **params)
    for flag, attr in (("iters", "total_iters"), ("batch_size", "batch_size"),
                       ("grad_accum", "grad_accum_steps"), ("val_every", "val_every")):
        if getattr(args, flag) is not None:
            setattr(cfg, attr, getattr(args, flag))
    if args.no_augment:
        cfg.augment.enabled = False
    cfg.__post_init__()
    return cfg


def cmd_train(args):
    from .training import train

    cfg = _train_config(args)
    data = _data_dir(args)
    result = train(cfg, data, out_dir=args.out,
                   progress=lambda r: logger.info("iter %d loss %.4g val %.4g", r["iter"], r["loss"],
                                                  r["val_metric"]))
    _write_run_manifest(args.out, "train", args, checkpoint=str(result.checkpoint),
                        best_val_metric=result.best_metric, best_iter=result.best_iter,
                        model_config=cfg.model.to_json())
    print(json.dumps({"checkpoint": str(result.checkpoint), "best_val_metric": result.best_metric}))
    return 0


def _overlay(frame, pred, truth):
    """RGB overlay with predicted boundary in green and reference boundary in blue."""
    from scipy import ndimage

    g = np.clip(frame, 0, 1)
    rgb = np.stack([g, g, g], axis=-1)
    for mask, color in ((truth, (0.0, 0.3, 1.0)), (pred, (0.0, 1.0, 0.0))):
        m = np.asarray(mask) > 0
        edge = m & ~ndimage.binary_erosion(m)
        rgb[edge] = color
    return (rgb * 255).astype(np.uint8)


def cmd_eval(args):
    from PIL import Image

    from .inference import evaluate_model, infer
    from .model import load_checkpoint
    from .phantom import load_manifest, load_split
    from .metrics import table_from_frames

    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(_data_dir(args))
    samples = load_split(manifest, args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} is empty")
    if model.cfg.representation == "cartesian" and samples[0].frame.size != model.cfg.R:
        raise ValueError("checkpoint expects a different frame size than the dataset provides")
    frames = evaluate_model(model, samples, mode=args.mode)
    table = table_from_frames(frames)
    out = Path(args.out)
    table.write(out)
    if args.render:
        (out / "overlays").mkdir(parents=True, exist_ok=True)
        for s in samples:
            pred = infer(model, s.frame, mode=args.mode).mask.pixels
            Image.fromarray(_overlay(s.frame.pixels, pred, s.mask.pixels)).save(
                out / "overlays" / f"{s.id}.png")
    _write_run_manifest(out, "eval", args, model_config=model.cfg.to_json(),
                        dice_space=table.dice_space)
    print(table.to_csv(), end="")
    return 0


def cmd_infer(args):
    from .geometry import CartesianFrame, load_frame, save_frame
    from .inference import infer
    from .model import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    frame = load_frame(args.image)
    if not isinstance(frame, CartesianFrame):
        raise ValueError("infer expects a Cartesian frame image")
    res = infer(model, frame, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    save_frame(res.mask, out / f"{stem}_mask.png")
    payload = {"discontinuity_score": res.discontinuity, "n_components": res.n_components,
               "contour": None if res.contour is None else [float(v) for v in res.contour.depth]}
    (out / f"{stem}_contour.json").write_text(json.dumps(payload))
    _write_run_manifest(out, "infer", args)
    print(json.dumps({"mask": str(out / f"{stem}_mask.png"), "discontinuity_score": res.discontinuity}))
    return 0


def cmd_ablate(args):
    from .training import run_ablation_suite

    args.variant = "geounet"
    cfg = _train_config(args)
    report = run_ablation_suite(cfg, _data_dir(args), variants=args.variants, out_dir=args.out,
                                mode=args.mode)
    _write_run_manifest(args.out, "ablate", args)
    print(report.to_csv(), end="")
    return 0


def _add_train_flags(p):
    p.add_argument("--data", type=Path, help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--config", type=Path, help="JSON TrainConfig; flags override it")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--grad-accum", type=_positive_int)
    p.add_argument("--val-every", type=_positive_int)
    p.add_argument("--size", type=_positive_int, help="polar grid size R")
    p.add_argument("--depth", type=_positive_int)
    p.add_argument("--base-channels", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augment", action="store_true")


def build_parser():
    from .model import VARIANTS

    parser = argparse.ArgumentParser(prog="geounet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--n-train", type=_positive_int, default=200)
    g.add_argument("--n-val", type=_positive_int, default=20)
    g.add_argument("--n-test", type=_positive_int, default=50)
    g.add_argument("--n2-fraction", type=_fraction, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=_positive_int, default=256, help="frame side in pixels")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--variant", choices=sorted(VARIANTS), default="geounet")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--mode", default="plain", choices=("plain", "plusplus"))
    e.add_argument("--render", action="store_true", help="write prediction/truth overlay PNGs")
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment a single frame PNG")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--image", type=Path, required=True)
    i.add_argument("--mode", default="plain", choices=("plain", "plusplus"))
    i.add_argument("--out", type=Path, required=True)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train and compare all variants")
    a.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=list(VARIANTS))
    a.add_argument("--mode", default="plain", choices=("plain", "plusplus"))
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError, OSError) as e:
        print(f"geounet {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
