"""Command-line entry point: ``dapnet synth|train|predict|eval|gradcheck``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
error (bad flags, missing input files).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import config as runconfig
from . import gradsuite, synth
from .evaluate import ConfusionMatrix, format_report, metrics_csv
from .model import DAPNet
from .pipeline import (
    LabelScatter,
    block_partition,
    cover_samples,
    normalize_block,
    read_pts,
    read_table,
    write_pts,
)
from .train import train_loop

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
PREDICT_BATCH = 8


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _add_run_options(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value file; flags below take precedence")
    for f in fields(runconfig.RunConfig):
        kind = {"int": int, "float": float, "str": str}[f.type]
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                       help=f"(default {f.default})")


def _run_config(args) -> runconfig.RunConfig:
    if args.config is not None:
        _existing(args.config)
    overrides = {f.name: getattr(args, f.name) for f in fields(runconfig.RunConfig)}
    return runconfig.load(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dapnet", description="Point cloud segmentation with point and group attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a labelled synthetic scene")
    p.add_argument("output")
    p.add_argument("--extent", type=float, default=synth.SceneSpec.extent)
    p.add_argument("--density", type=float, default=synth.SceneSpec.density)
    p.add_argument("--noise", type=float, default=synth.SceneSpec.noise)
    p.add_argument("--classes", default=",".join(synth.SceneSpec.classes))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a labelled point file")
    p.add_argument("data")
    p.add_argument("--run-dir", help=f"output directory (default ${runconfig.RUNS_ENV}/<name>)")
    p.add_argument("--name", default="train", help="run name under the runs root")
    p.add_argument("--quiet", action="store_true")
    _add_run_options(p)

    p = sub.add_parser("predict", help="label every point of a file with a trained model")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("output")
    p.add_argument("--classes", help="expected class names; must match the checkpoint")
    p.add_argument("--seed", type=int, default=None, help="sampling seed (default: the training seed)")

    p = sub.add_parser("eval", help="score predictions against reference labels")
    p.add_argument("reference", help="labelled point file")
    p.add_argument("prediction", help="point file whose last column is the predicted label")
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--error-map", help="write the reference points with prediction and 0/1 mismatch")
    p.add_argument("--csv", help="write per-class metrics as CSV")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the network loss")
    p.add_argument("--tolerance", type=float, default=gradsuite.TOLERANCE)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="skip the desk-scale network case")
    return parser


def cmd_synth(args) -> int:
    spec = synth.SceneSpec(args.extent, tuple(c.strip() for c in args.classes.split(",") if c.strip()),
                           args.density, args.noise, args.seed)
    cloud = synth.generate(spec)
    write_pts(args.output, cloud)
    counts = np.bincount(cloud.labels, minlength=len(spec.classes))
    print(f"wrote {len(cloud)} points to {args.output}: "
          + ", ".join(f"{c}={n}" for c, n in zip(spec.classes, counts)))
    return EXIT_OK


def cmd_train(args) -> int:
    data = _existing(args.data)
    cfg = _run_config(args)
    cloud = read_pts(data, labelled=True)
    model_cfg = cfg.model_config()
    blocks = block_partition(cloud, cfg.block_size, cfg.stride, cfg.min_points, drop_sparse=True)
    if not blocks:
        raise RuntimeError(f"no block of {cfg.block_size} m holds {cfg.min_points} points; "
                           "lower --min-points or raise --block-size")
    blocks = [normalize_block(cloud, b) for b in blocks]
    run = Path(args.run_dir) if args.run_dir else runconfig.runs_root() / args.name
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(cfg.to_text())
    echo = None if args.quiet else (
        lambda r: print(f"epoch {r['epoch']:4d}  lr {r['lr']:.3e}  loss {r['loss']:.4f}  "
                        f"train OA {100 * r['train_oa']:.2f}%"))
    header = {"run": cfg.to_text(), "classes": cfg.class_names}
    result = train_loop(blocks, model_cfg, cfg.epochs, cfg.batch_size, cfg.seed, cfg.sample_size,
                        cfg.lr_initial, cfg.lr_final, cfg.weight_decay, run_dir=run,
                        header=header, progress=echo)
    last = result.log[-1] if result.log else None
    summary = f"{len(blocks)} blocks, {cfg.epochs} epochs"
    if last:
        summary += f", final loss {last['loss']:.4f}, train OA {100 * last['train_oa']:.2f}%"
    print(f"{summary}; outputs in {run}")
    return EXIT_OK


def predict_cloud(model: DAPNet, run: runconfig.RunConfig, cloud, seed: int) -> np.ndarray:
    """One label per point of ``cloud``, in input order."""
    rng = np.random.default_rng(seed)
    scatter = LabelScatter(len(cloud))
    blocks = block_partition(cloud, run.block_size, run.block_size, 0, drop_sparse=False)
    jobs = []
    for block in blocks:
        block = normalize_block(cloud, block)
        jobs.extend((block, s) for s in cover_samples(block, run.sample_size, rng))
    for start in range(0, len(jobs), PREDICT_BATCH):
        chunk = jobs[start:start + PREDICT_BATCH]
        pred = model.predict(np.stack([s.features for _, s in chunk]))
        for (block, sample), labels in zip(chunk, pred):
            scatter.add(block, sample, labels)
    return scatter.result()


def cmd_predict(args) -> int:
    ckpt, data = _existing(args.checkpoint), _existing(args.data)
    model, header = DAPNet.load(ckpt)
    run = runconfig.RunConfig()
    if "run" in header:
        run = runconfig.RunConfig().with_overrides(runconfig.parse_text(header["run"], str(ckpt)))
    n_cls = model.cfg.num_classes
    if args.classes is not None:
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
        if len(names) != n_cls:
            raise RuntimeError(f"config mismatch: {len(names)} classes requested but the checkpoint "
                               f"was trained with {n_cls} ({', '.join(header.get('classes', []))})")
    cloud = read_pts(data)
    if cloud.labels is not None and cloud.labels.max() >= n_cls:
        raise RuntimeError(f"config mismatch: input has label {cloud.labels.max()} but the "
                           f"checkpoint knows only {n_cls} classes")
    seed = args.seed if args.seed is not None else run.seed
    labels = predict_cloud(model, run, cloud, seed)
    write_pts(args.output, cloud, predictions=labels)
    print(f"labelled {len(labels)} points -> {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ref_path, pred_path = _existing(args.reference), _existing(args.prediction)
    ref = read_pts(ref_path, labelled=True)
    table = read_table(pred_path)
    if len(table) != len(ref):
        raise RuntimeError(f"{len(ref)} reference points but {len(table)} predictions")
    if table.shape[1] >= 3 and not np.array_equal(table[:, :3], ref.xyz):
        raise RuntimeError("prediction file coordinates do not match the reference point order")
    pred = table[:, -1].astype(np.int64)
    names = [c.strip() for c in args.classes.split(",")] if args.classes else None
    n_cls = len(names) if names else int(max(ref.labels.max(), pred.max())) + 1
    cm = ConfusionMatrix(n_cls, names).accumulate(ref.labels, pred)
    print(format_report(cm), end="")
    if args.csv:
        Path(args.csv).write_text(metrics_csv(cm))
    if args.error_map:
        write_pts(args.error_map, ref, predictions=pred, mismatch=True)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradsuite.run(args.tolerance, args.step, args.seed, full=not args.quick, echo=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    return EXIT_FAILURE if failed else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage or help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, runconfig.ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dapnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError, FloatingPointError, json.JSONDecodeError) as exc:
        print(f"dapnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
