"""Command line entry point: ``ceph3d {synth,train,infer,eval,report}``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import landmarks as lm
from . import pipeline as P
from . import synth
from .volume_ops import load_volume


def _config(args) -> P.PipelineConfig:
    cfg = P.load_config(args.config, base=args.base)
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed))
    return cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    model = synth.default_model(cfg.seed)
    ds = synth.make_paired_and_anonymized(model, cfg.n_paired, cfg.n_anonymized, cfg.n_test, seed=cfg.seed)
    manifest = synth.write_dataset(ds, args.out, model, cfg.seed)
    print(f"wrote {sum(manifest['counts'].values())} subjects to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    _, data = synth.load_dataset(args.data)
    bundle = P.train(cfg, data["paired"], data["anonymized"], log=lambda m: print(m, flush=True))
    bundle.save(args.out)
    print(f"saved bundle to {args.out}")
    return 0


def _subject_volumes(args):
    if args.volume:
        for v in args.volume:
            yield Path(v).stem, load_volume(v)
        return
    manifest = json.loads((Path(args.data) / "manifest.json").read_text())
    for i in range(manifest["counts"][args.split]):
        stem = f"{args.split}_{i:03d}"
        yield stem, load_volume(Path(args.data) / args.split / f"{stem}.cfvol")


def cmd_infer(args) -> int:
    bundle = P.Bundle.load(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flags = {}
    for stem, vol in _subject_volumes(args):
        res = P.infer(bundle, vol)
        lm.write_landmark_csv(out / f"{stem}_coarse.csv", res.coarse)
        lm.write_landmark_csv(out / f"{stem}_final.csv", res.final)
        flags[stem] = res.flags
        print(f"{stem}: done", flush=True)
    (out / "flags.json").write_text(json.dumps(flags, indent=1, sort_keys=True) + "\n")
    return 0


def load_predictions(pred_dir: str | Path, truth_dir: str | Path):
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    preds: dict[str, dict] = {"coarse": {}, "final": {}}
    truths = {}
    for f in sorted(pred_dir.glob("*_final.csv")):
        stem = f.name[: -len("_final.csv")]
        truth = truth_dir / f"{stem}.csv"
        if not truth.exists():
            raise FileNotFoundError(f"no ground truth for subject {stem} in {truth_dir}")
        truths[stem] = lm.read_landmark_csv(truth)
        preds["final"][stem] = lm.read_landmark_csv(f)
        preds["coarse"][stem] = lm.read_landmark_csv(pred_dir / f"{stem}_coarse.csv")
    if not truths:
        raise FileNotFoundError(f"no predictions in {pred_dir}")
    return preds, truths


def cmd_eval(args) -> int:
    truth_dir = Path(args.data) / args.split if args.data else Path(args.truth)
    preds, truths = load_predictions(args.pred, truth_dir)
    report = P.make_report(preds, truths)
    P.write_report(report, args.out)
    print(P.format_report(report))
    return 0


def cmd_report(args) -> int:
    root = Path(args.eval)
    for name in ("summary", "histogram", "per_subject"):
        path = root / f"{name}.csv"
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        print(f"== {name}")
        for r in rows:
            print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        print()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ceph3d", description="3D cephalometric landmarking on synthetic skulls")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON file with config overrides")
        p.add_argument("--base", choices=("desk", "paper"), default="desk", help="default settings to start from")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train all five stages")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="detect landmarks with a trained bundle")
    common(p)
    p.add_argument("--bundle", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help="dataset directory")
    g.add_argument("--volume", nargs="+", help="volume files")
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="compare predictions to ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help="dataset directory")
    g.add_argument("--truth", help="directory of ground-truth CSVs named like the predictions")
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="print the tables written by eval")
    p.add_argument("--eval", required=True)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except P.StageError as exc:
        print(f"ceph3d {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"ceph3d {args.command}: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
