"""Command-line entry point: ``resar <command> [--config FILE] [--seed N] [--out DIR] ...``.

Exit codes: 0 success, 1 user error (bad config, missing files), 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .codec import CodecPretrainer, load_codec, save_codec
from .config import ConfigError, NumericalError, RunConfig, load_config
from .data import SceneDataset
from .geometry import BevGridSpec
from .synthetic import generate_dataset, read_index, read_sample

log = logging.getLogger("resar")


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} must look like key=value")
    import yaml
    return key, yaml.safe_load(value)


def _config(args) -> RunConfig:
    overrides = dict(_parse_override(o) for o in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, **overrides)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    index = generate_dataset(_out(args), args.count, cfg.seed, cfg.scene, cfg.grid, args.val_count)
    freq = dict(zip(index["class_names"], index["class_frequency"]))
    print(json.dumps({"samples": len(index["samples"]), "class_frequency": freq}, indent=1))


def _all_masks(data_root: Path, split: str = "train") -> torch.Tensor:
    index = read_index(data_root)
    masks = [read_sample(data_root / e["path"]).gt for e in index["samples"] if e["split"] == split]
    if not masks:
        raise ConfigError(f"no {split} samples under {data_root}")
    return torch.as_tensor(np.stack(masks), dtype=torch.float32)


def cmd_pretrain_codec(args) -> None:
    cfg = _config(args)
    out = _out(args)
    trainer = CodecPretrainer(_all_masks(Path(args.data)), cfg.codec, cfg.seed)
    state_path = out / "codec_state.pt"
    if args.resume and state_path.exists():
        trainer.load_state_dict(torch.load(state_path))
    remaining = max(cfg.codec.steps - trainer.step, 0)
    with open(out / "codec_loss.jsonl", "a") as fh:
        trainer.run(remaining, lambda step, loss: fh.write(json.dumps({"step": step, "loss_dice": loss}) + "\n"))
    save_codec(out / "codec.npz", trainer.codec, {"seed": cfg.seed, "steps": trainer.step})
    torch.save(trainer.state_dict(), state_path)
    print(json.dumps({"steps": trainer.step, "final_loss": trainer.losses[-1] if trainer.losses else None,
                      "eval_loss": trainer.evaluate()}))


def _load_split(data_root: Path, split: str, cfg: RunConfig, limit=None) -> SceneDataset:
    return SceneDataset(data_root, split, BevGridSpec.from_config(cfg.grid), cfg.seed, limit)


def cmd_train(args) -> None:
    from .training import Trainer, target_mode

    cfg = _config(args)
    out = _out(args)
    data = Path(args.data)
    codec = None
    if target_mode(cfg) == "residual":
        if not args.codec:
            raise ConfigError(f"variant {cfg.variant!r} trains against codec targets: pass --codec")
        codec = load_codec(args.codec)
    train = _load_split(data, "train", cfg, args.limit)
    val = _load_split(data, "val", cfg)
    trainer = Trainer(cfg, train.items, val.items, codec, train.class_frequency, out)
    if args.resume and (out / "resume.pt").exists():
        trainer.load_resume_state(torch.load(out / "resume.pt"))
    trainer.run(max(cfg.train.steps - trainer.step, 0))
    trainer.save(out)
    print(json.dumps(trainer.history[-1] if trainer.history else {}))


def cmd_eval(args) -> None:
    from .training import evaluate, load_checkpoint, stage_maps

    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.threshold is not None:
        cfg = cfg.replace(eval_threshold=args.threshold)
    out = _out(args)
    ds = _load_split(Path(args.data), args.split, cfg)
    report, _ = evaluate(model, ds.items, cfg)
    report.write(out / f"report_{args.split}.json")
    codec = load_codec(args.codec) if args.codec else None
    n = min(args.panels, len(ds.items))
    if n:
        stages, probs, gt = stage_maps(model, ds.items[:n], cfg, codec)
        np.savez(out / "stage_maps.npz", stages=stages, probs=probs, gt=gt)
    print(json.dumps(report.to_dict(), indent=1))


def cmd_dump_attn(args) -> None:
    from .training import dump_attention, load_checkpoint

    model, cfg, _ = load_checkpoint(args.checkpoint)
    ds = _load_split(Path(args.data), args.split, cfg, limit=args.index + 1)
    if args.index >= len(ds):
        raise ConfigError(f"split {args.split!r} has only {len(ds)} samples")
    cells = [tuple(int(v) for v in c.split(",")) for c in args.cells]
    dump_attention(model, ds[args.index], cells, cfg, _out(args) / "attention.npz")
    print(json.dumps({"written": str(Path(args.out) / "attention.npz"), "cells": cells}))


def cmd_plot(args) -> None:
    from .plotting import plot_attention, plot_curves, plot_stage_panels

    run = Path(args.run)
    out = _out(args)
    written = []
    wanted = args.what or ["curves", "stages", "attention"]
    if "curves" in wanted:
        plot_curves(run / "metrics.jsonl", out / "miou_curves.png")
        written.append(str(out / "miou_curves.png"))
    if "stages" in wanted:
        written += [str(p) for p in plot_stage_panels(run / "stage_maps.npz", out)]
    if "attention" in wanted:
        written += [str(p) for p in plot_attention(run / "attention.npz", out)]
    print(json.dumps({"written": written}, indent=1))


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. train.steps=100")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="resar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--val-count", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("pretrain-codec", parents=[common], help="fit the ground-truth codec")
    c.add_argument("--data", required=True)
    c.add_argument("--resume", action="store_true")
    c.set_defaults(func=cmd_pretrain_codec)

    t = sub.add_parser("train", parents=[common], help="joint training")
    t.add_argument("--data", required=True)
    t.add_argument("--codec")
    t.add_argument("--limit", type=int, help="use only the first N training samples")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--codec", help="codec checkpoint for gated stage maps")
    e.add_argument("--threshold", type=float)
    e.add_argument("--panels", type=int, default=4, help="samples to dump stage maps for")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-attn", parents=[common], help="record cross-attention sampling for some BEV cells")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="val")
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--cells", nargs="+", default=["40,32"], help="full-resolution z,x cell indices")
    d.set_defaults(func=cmd_dump_attn)

    pl = sub.add_parser("plot", parents=[common], help="render figures from a run directory")
    pl.add_argument("--run", required=True)
    pl.add_argument("--what", nargs="+", choices=["curves", "stages", "attention"])
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
