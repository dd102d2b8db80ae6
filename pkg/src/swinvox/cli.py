"""``swinvox`` command line.

Reports go to stdout; progress logging goes to stderr. Exit status is 0 on
success, 1 on a contract violation or failed check, 3 on an I/O error and 2
on bad usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, RunConfig, apply_env, load_config, parse_config
from .errors import SwinvoxError

log = logging.getLogger("swinvox")

EXIT_OK, EXIT_CONTRACT, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _run_config(args) -> RunConfig:
    if args.config is not None:
        run = load_config(args.config)
    else:
        preset = getattr(args, "preset", None) or "desk"
        text = "".join(f"[{s}]\npreset = {preset}\n" for s in ("encoder", "decoder", "train"))
        run = parse_config(text, source=f"<preset {preset}>")
        run = apply_env(run)
    attention = getattr(args, "attention", None)
    if attention:
        run = dataclasses.replace(run, encoder=dataclasses.replace(run.encoder, attention=attention))
    dataset = getattr(args, "dataset", None)
    if dataset:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, dataset=dataset))
    return run.validate()


def _dtype(args):
    return np.float64 if getattr(args, "f64", False) else np.float32


# ------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    from .data import make_dataset, read_manifest

    ratios = tuple(float(r) for r in args.split.split(","))
    root = make_dataset(args.out, args.n, seed=args.seed, ratios=ratios, image_size=args.image_size,
                        workers=args.workers)
    rows = read_manifest(root)
    counts = {s: sum(1 for r in rows if r["split"] == s) for s in ("train", "val", "test")}
    print(f"{root}\tn={len(rows)}\ttrain={counts['train']}\tval={counts['val']}\ttest={counts['test']}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    run = _run_config(args)
    if args.max_steps is not None:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, max_steps=args.max_steps))

    def progress(step, loss):
        if step % args.log_every == 0:
            log.info("step %d loss %.6f", step, loss)

    result = train(run, args.out, resume=args.resume, on_step=progress, dtype=_dtype(args))
    last = result.losses[-1][1] if result.losses else float("nan")
    print(f"{result.checkpoint}\tstep={result.trainer.step}\tloss={last:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    run = load_config(args.config) if args.config else None
    report = evaluate(args.checkpoint, split=args.split, dataset=args.dataset, run=run,
                      t=args.threshold, d=args.distance)
    sys.stdout.write(report.to_jsonl() if args.jsonl else report.to_table())
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .train import reconstruct

    written = reconstruct(args.checkpoint, args.image, args.out, t=args.threshold, obj_path=args.obj)
    for kind, path in written.items():
        print(f"{kind}\t{path}")
    return EXIT_OK


def cmd_export_obj(args) -> int:
    from .data import load_voxels
    from .export import write_obj

    v = load_voxels(args.voxels)
    path = write_obj(args.out, v, dedup=args.dedup)
    print(f"{path}\toccupied={int(v.sum())}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    from .model import param_count

    run = _run_config(args)
    counts = param_count(run.encoder, run.decoder)
    if args.json:
        print(json.dumps(counts, indent=2))
        return EXIT_OK
    width = max(len(k) for k in counts["groups"])
    for name, n in counts["groups"].items():
        print(f"{name:<{width}}  {n:>12,d}")
    for key in ("encoder", "decoder", "total"):
        print(f"{key:<{width}}  {counts[key]:>12,d}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import gradcheck, tiny_configs

    if args.preset == "tiny":
        enc, dec = tiny_configs(args.attention or "v2-cosine")
    else:
        run = _run_config(args)
        enc, dec = run.encoder, run.decoder
    report = gradcheck(enc, dec, seed=args.seed, n_entries=args.entries, h=args.h, tolerance=args.tolerance)
    sys.stdout.write(report.to_text())
    return EXIT_OK if report.passed else EXIT_CONTRACT


def cmd_plot_loss(args) -> int:
    from .export import loss_curve_svg, read_loss_curve

    records = read_loss_curve(args.loss)
    Path(args.out).write_text(loss_curve_svg(records, title=args.title))
    print(f"{args.out}\trecords={len(records)}")
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swinvox", description="Single-image voxel reconstruction with a shifted-window encoder.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp, preset_choices=PRESETS):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--preset", choices=preset_choices, help="base preset when no config file is given")
        sp.add_argument("--attention", choices=("v1-bias-table", "v2-cosine"))

    g = sub.add_parser("gen-data", help="write a synthetic image/voxel dataset")
    g.add_argument("out")
    g.add_argument("-n", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test ratios")
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write checkpoints plus loss.txt")
    config_args(t)
    t.add_argument("--dataset")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--f64", action="store_true", help="train in 64-bit floats")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="IoU / F-score report on a split")
    e.add_argument("checkpoint")
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    e.add_argument("--dataset")
    e.add_argument("--config", help="refuse the checkpoint unless its fingerprint matches this config")
    e.add_argument("--threshold", "-t", type=float)
    e.add_argument("--distance", "-d", type=float)
    e.add_argument("--jsonl", action="store_true", help="one JSON record per sample")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reconstruct", help="predict a voxel grid for one image")
    r.add_argument("checkpoint")
    r.add_argument("image")
    r.add_argument("out")
    r.add_argument("--threshold", "-t", type=float)
    r.add_argument("--obj", help="also write an OBJ mesh here")
    r.set_defaults(func=cmd_reconstruct)

    o = sub.add_parser("export-obj", help="convert a binary voxel file to OBJ")
    o.add_argument("voxels")
    o.add_argument("out")
    o.add_argument("--dedup", action="store_true", help="share lattice vertices between cubes")
    o.set_defaults(func=cmd_export_obj)

    c = sub.add_parser("param-count", help="exact parameter counts per group")
    config_args(c)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_param_count)

    k = sub.add_parser("gradcheck", help="full-model gradient check in 64-bit mode")
    config_args(k, preset_choices=PRESETS + ("tiny",))
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--entries", type=int, default=50)
    k.add_argument("--h", type=float, default=1e-4)
    k.add_argument("--tolerance", type=float, default=1e-3)
    k.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot-loss", help="render loss.txt as an SVG curve")
    pl.add_argument("loss")
    pl.add_argument("out")
    pl.add_argument("--title", default="training loss")
    pl.set_defaults(func=cmd_plot_loss)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers = [handler]
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    try:
        return args.func(args)
    except SwinvoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
