"""Command-line entry point: ``scentvc <subcommand> ...``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .augment import corpus_stats
from .evaluation import attn_diagnostics, f0_rmse, mcd
from .features import CorpusConfig, generate_pairs, make_corpus, read_manifest, read_track, write_manifest, write_track
from .training import MODES, TrainConfig, load_model, parse_config, strip_classifiers, train

log = logging.getLogger("scentvc")


def _load_config(path):
    if not path:
        return TrainConfig()
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def _corpus_config(args) -> CorpusConfig:
    return CorpusConfig(seed=args.corpus_seed)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_synthetic(args):
    corpus = make_corpus(_corpus_config(args))
    os.makedirs(args.out, exist_ok=True)
    splits = (("train", args.count, 1), ("valid", args.valid, 2), ("test", args.test, 3))
    for name, count, offset in splits:
        if count <= 0:
            continue
        pairs = generate_pairs(corpus, count, seed=args.seed * 10 + offset, prefix=f"{name}_")
        path = write_manifest(pairs, corpus.inventory, args.out, name)
        print(f"{name}: {count} pairs -> {path}")
        if name == "train":
            print(json.dumps(corpus_stats(pairs).as_dict(), sort_keys=True))
    return 0


def cmd_augment(args):
    pairs, _ = read_manifest(args.manifest)
    stats = corpus_stats(pairs).as_dict()
    if args.stats:
        print(json.dumps(stats, indent=1, sort_keys=True))
    else:
        print(f"{stats['num_pairs']} pairs, mean alignment points {stats['mean_points']:.2f}, "
              f"{stats['total_fragments']} fragments")
    return 0


def cmd_train(args):
    config = _load_config(args.config).with_mode(args.mode)
    if args.seed is not None:
        config = TrainConfig(**{**config.to_dict(), "seed": args.seed})
    pairs, inventory = read_manifest(args.manifest)
    valid = []
    if args.valid_manifest:
        valid, inventory = read_manifest(args.valid_manifest, inventory)
    trainer = train(pairs, config, args.out, valid, num_phonemes=len(inventory),
                    num_tones=pairs[0].src_lab.tone_count, resume=args.resume, max_epochs=args.max_epochs)
    print(f"trained {trainer.epoch} epochs ({trainer.step} steps) -> {os.path.join(args.out, 'model.ckpt')}")
    return 0


def cmd_convert(args):
    model, _, _ = load_model(args.checkpoint)
    pairs, _ = read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    from .model import convert

    for pair in pairs:
        track, trace = convert(model, pair.src, pair.src_bn)
        write_track(os.path.join(args.out, f"{pair.id}.trk"), track)
        np.save(os.path.join(args.out, f"{pair.id}.attn.npy"), trace)
    print(f"converted {len(pairs)} utterances -> {args.out}")
    return 0


def _reference_tracks(reference):
    """Map utterance id to reference track path, from a manifest or a directory."""
    if os.path.isfile(reference):
        root = os.path.dirname(os.path.abspath(reference))
        out = {}
        with open(reference, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    parts = line.rstrip("\n").split("\t")
                    out[parts[0]] = os.path.join(root, parts[2])
        return out
    out = {}
    for path in sorted(glob.glob(os.path.join(reference, "*.trk"))):
        name = os.path.basename(path)[: -len(".trk")]
        if name.endswith(".tgt"):
            name = name[: -len(".tgt")]
        elif name.endswith(".src"):
            continue
        out[name] = path
    return out


def evaluate_dir(converted_dir, reference) -> dict:
    refs = _reference_tracks(reference)
    rows = []
    for path in sorted(glob.glob(os.path.join(converted_dir, "*.trk"))):
        uid = os.path.basename(path)[: -len(".trk")]
        if uid not in refs:
            raise FileNotFoundError(f"no reference track for {uid!r}")
        conv, ref = read_track(path), read_track(refs[uid])
        row = {"id": uid, "mcd": mcd(conv, ref), "f0_rmse": f0_rmse(conv, ref),
               "length_ratio": conv.num_frames / ref.num_frames}
        attn = os.path.join(converted_dir, f"{uid}.attn.npy")
        if os.path.exists(attn):
            row.update(attn_diagnostics(np.load(attn)).as_dict())
        rows.append(row)
    if not rows:
        raise FileNotFoundError(f"no converted tracks in {converted_dir}")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "id"}
    return {"utterances": rows, "mean": mean}


def cmd_evaluate(args):
    from .experiment import grid, write_grid_csv

    cell_dirs = sorted(d for d in glob.glob(os.path.join(args.converted, "*_n*_s*")) if os.path.isdir(d))
    if cell_dirs:
        # an experiment "cells" directory: one sub-directory per (mode, size, seed)
        results = []
        for d in cell_dirs:
            mode, size, seed = os.path.basename(d).rsplit("_", 2)
            res = evaluate_dir(os.path.join(d, "converted"), args.reference)
            results.append({"cell": {"mode": mode, "size": int(size[1:]), "seed": int(seed[1:])}, **res["mean"]})
        report = {"cells": results, "grid": grid(results)}
        if args.csv:
            write_grid_csv(report["grid"], args.csv)
    else:
        report = evaluate_dir(args.converted, args.reference)
        if args.csv:
            import csv

            with open(args.csv, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=list(report["utterances"][0]))
                writer.writeheader()
                writer.writerows(report["utterances"])
        print(json.dumps(report["mean"], sort_keys=True))
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    return 0


def cmd_experiment(args):
    from .experiment import DESK_SIZES, ExperimentPlan, desk_train_config, run_experiment

    sizes = [DESK_SIZES.get(s, s) if args.reference_sizes else s for s in args.sizes]
    train_config = parse_config(open(args.config, encoding="utf-8").read(), desk_train_config()) \
        if args.config else desk_train_config()
    plan = ExperimentPlan.grid(args.out, sizes, args.modes, args.seeds,
                               corpus=_corpus_config(args), train=train_config)
    report = run_experiment(plan, train_missing=not args.no_train, jobs=args.jobs)
    for size, row in report["grid"].items():
        print(size, " ".join(f"{m}: mcd {v['mcd']:.3f} f0 {v['f0_rmse']:.2f}" for m, v in row.items()))
    if args.csv:
        from .experiment import write_grid_csv

        write_grid_csv(report["grid"], args.csv)
    return 0


def cmd_strip_classifiers(args):
    removed = strip_classifiers(args.checkpoint, args.out)
    print(f"removed {removed} classifier tensors -> {args.out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scentvc", description="Text-supervised seq2seq voice conversion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic parallel corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--valid", type=int, default=6)
    g.add_argument("--test", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corpus-seed", type=int, default=CorpusConfig.seed)
    g.set_defaults(func=cmd_gen_synthetic)

    a = sub.add_parser("augment", help="alignment-point and fragment statistics")
    a.add_argument("--manifest", required=True)
    a.add_argument("--stats", action="store_true", help="print the full statistics as JSON")
    a.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--valid-manifest")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--mode", choices=sorted(MODES), default="baseline")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("convert", help="convert every source utterance of a manifest")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)

    e = sub.add_parser("evaluate", help="MCD / F0 RMSE against reference tracks")
    e.add_argument("--converted", required=True, help="converted track directory (or an experiment cells directory)")
    e.add_argument("--reference", required=True, help="reference track directory or manifest")
    e.add_argument("--report", required=True)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="run the size x mode grid")
    x.add_argument("--out", required=True)
    x.add_argument("--sizes", type=int, nargs="+", default=[10, 25, 50, 100, 200])
    x.add_argument("--reference-sizes", action="store_true", help="read --sizes as reference-corpus sizes 50/100/200/400/1000 and map them to desk sizes")
    x.add_argument("--modes", nargs="+", choices=sorted(MODES), default=list(MODES))
    x.add_argument("--seeds", type=int, nargs="+", default=[0])
    x.add_argument("--config")
    x.add_argument("--corpus-seed", type=int, default=CorpusConfig.seed)
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--no-train", action="store_true", help="fail instead of training missing cells")
    x.add_argument("--csv")
    x.set_defaults(func=cmd_experiment)

    s = sub.add_parser("strip-classifiers", help="drop training-only classifier tensors from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_strip_classifiers)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"scentvc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
