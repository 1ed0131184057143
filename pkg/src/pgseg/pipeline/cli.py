"""Command-line entry point: ``pgseg {gen-data,train,eval,infer,metrics}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from pgseg.pipeline.config import ABLATION_FLAGS, RunConfig

log = logging.getLogger("pgseg")


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    train_over = {}
    if args.seed is not None:
        train_over["seed"] = args.seed
    if args.deterministic:
        train_over["deterministic"] = True
    for name in ("epochs", "max_steps", "batch_size", "lr"):
        value = getattr(args, name, None)
        if value is not None:
            train_over[name] = value
    if train_over:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, **train_over))
    if args.ablate:
        run = run.with_ablation(args.ablate)
    return run


def _load_image(path: Path) -> tuple[np.ndarray, str]:
    from pgseg.pipeline.data import load_sample

    if path.suffix == ".json":
        s = load_sample(path)
        return s.image, s.case_id
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32), path.stem
    raise SystemExit(f"unsupported image file {path} (use a sample .json or a .npy array)")


def cmd_gen_data(args) -> int:
    from pgseg.pipeline.data import gen_synthetic

    organs = args.organs.split(",") if args.organs else None
    kw = {"organs": organs} if organs else {}
    samples = gen_synthetic(args.out, args.seed if args.seed is not None else 7, args.n_cases, size=args.size, presence=args.presence, **kw)
    print(f"wrote {len(samples)} slices to {args.out}")
    return 0


def cmd_train(args) -> int:
    from pgseg.pipeline import plotting
    from pgseg.pipeline.data import load_dataset
    from pgseg.pipeline.train import train

    run = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")
    samples = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None

    def report(rec):
        msg = f"epoch {rec['epoch']:4d}  step {rec['step']:6d}  loss {rec['loss']:.4f}"
        if "val_mdice" in rec:
            msg += f"  val_mDice {rec['val_mdice']:.4f}"
        print(msg, flush=True)

    result = train(run, samples, out, val_samples=val, resume=args.resume, on_epoch=report)
    if result.history:
        plotting.plot_history(result.history, out / "training_curve.png")
    print(f"checkpoint: {out}  ({result.steps} steps, config {run.config_hash()})")
    return 0


def _print_table(summary: dict, stream=None) -> None:
    keys = list(summary)
    w = csv.writer(stream or sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(keys)
    w.writerow(["" if summary[k] is None else (f"{summary[k]:.4f}" if isinstance(summary[k], float) else summary[k]) for k in keys])


def cmd_eval(args) -> int:
    from pgseg.pipeline.data import load_dataset
    from pgseg.pipeline.evaluate import evaluate

    samples = load_dataset(args.data)
    result = evaluate(args.checkpoint, samples, out_dir=args.out)
    _print_table(result.summary)
    return 0


def cmd_infer(args) -> int:
    from pgseg.pipeline import plotting
    from pgseg.pipeline.evaluate import infer, save_png

    image, name = _load_image(Path(args.image))
    labels, heat = infer(args.checkpoint, image, emit_heatmap=args.heatmap, organ=args.organ)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / f"{name}.labels.npy", labels)
    if heat is not None:
        save_png(heat, out / f"{name}.heatmap.png")
    plotting.plot_inference(image, labels, heat, out / f"{name}.overlay.png")
    counts = np.bincount(labels.ravel(), minlength=1)
    print(f"{name}: classes present {np.flatnonzero(counts).tolist()} -> {out}")
    return 0


def cmd_metrics(args) -> int:
    from pgseg.metrics import evaluate_case, summarize, write_csv, write_summary

    pred, target = np.load(args.pred), np.load(args.target)
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    reports = [evaluate_case(p, t, f"case{i:04d}") for i, (p, t) in enumerate(zip(pred, target))]
    summary = summarize(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(reports, out / "metrics.csv")
        write_summary(summary, out / "summary.json")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["case_id", "organ", "dice", "hd95"])
    for r in reports:
        for organ, d in r.per_class_dice.items():
            h = r.per_class_hd95[organ]
            w.writerow([r.case_id, organ, f"{d:.6f}", "" if np.isnan(h) else f"{h:.6f}"])
    _print_table(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--ablate", action="append", choices=ABLATION_FLAGS, default=[], help="disable a component (repeatable)")
        sp.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")

    g = sub.add_parser("gen-data", help="write synthetic phantom slices")
    g.add_argument("--out", required=True)
    g.add_argument("--n-cases", type=int, default=8)
    g.add_argument("--organs", help="comma-separated subset of the vocabulary")
    g.add_argument("--size", type=int, default=224)
    g.add_argument("--presence", type=float, default=1.0, help="probability each organ appears")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int, dest="max_steps")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, help="sample .json container or .npy array")
    i.add_argument("--out", required=True)
    i.add_argument("--heatmap", action="store_true")
    i.add_argument("--organ", help="focus the text prior on one organ")
    i.set_defaults(func=cmd_infer)

    m = sub.add_parser("metrics", help="Dice/HD95 for label-map .npy files")
    m.add_argument("--pred", required=True)
    m.add_argument("--target", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
