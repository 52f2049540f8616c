"""Size x method experiment grid: corpus -> train -> convert -> evaluate -> trend report."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .augment import corpus_stats
from .evaluation import attn_diagnostics, f0_rmse, mcd
from .features import (
    SILENCE_ID,
    CorpusConfig,
    UtterancePair,
    frame_labels,
    generate_pairs,
    make_corpus,
    read_manifest,
    write_manifest,
    write_track,
)
from .model import convert
from .training import MODES, TrainConfig, load_model, train

log = logging.getLogger(__name__)

# Reference-corpus training-set sizes mapped to desk-scale synthetic pair counts.
DESK_SIZES = {50: 10, 100: 25, 200: 50, 400: 100, 1000: 200}

# Network width used for the desk-scale grid (keeps the full grid within about an hour on one CPU).
DESK_MODEL = dict(encoder_dim=64, attention_rnn_dim=64, decoder_rnn_dim=64, attention_dim=32,
                  prenet_dims=(32, 32), postnet_channels=32)


def desk_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"model": dict(DESK_MODEL), **overrides})


@dataclass(frozen=True)
class Cell:
    mode: str
    size: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.mode}_n{self.size}_s{self.seed}"


@dataclass
class ExperimentPlan:
    cells: list
    out_dir: str
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=desk_train_config)
    pool_size: int = 200
    valid_size: int = 6
    test_size: int = 10

    def __post_init__(self):
        self.cells = [c if isinstance(c, Cell) else Cell(*c) for c in self.cells]
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("experiment cells must be unique")
        for cell in self.cells:
            if cell.mode not in MODES:
                raise ValueError(f"unknown mode {cell.mode!r}")
            if not 1 <= cell.size <= self.pool_size:
                raise ValueError(f"cell size {cell.size} outside 1..{self.pool_size}")

    @classmethod
    def grid(cls, out_dir, sizes: Sequence[int], modes: Sequence[str] = tuple(MODES),
             seeds: Sequence[int] = (0,), **kwargs) -> "ExperimentPlan":
        cells = [Cell(m, n, s) for n in sizes for m in modes for s in seeds]
        return cls(cells, out_dir, **kwargs)

    def to_dict(self):
        return {
            "cells": [asdict(c) for c in self.cells],
            "corpus": asdict(self.corpus),
            "train": self.train.to_dict(),
            "pool_size": self.pool_size,
            "valid_size": self.valid_size,
            "test_size": self.test_size,
        }


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------


def build_corpus(plan: ExperimentPlan):
    """Generate (or reload) the train pool, validation and test manifests."""
    root = os.path.join(plan.out_dir, "corpus")
    names = {"pool": plan.pool_size, "valid": plan.valid_size, "test": plan.test_size}
    manifests = {n: os.path.join(root, f"{n}.tsv") for n in names}
    stamp = os.path.join(root, "corpus.json")
    wanted = {"corpus": asdict(plan.corpus), "sizes": names}
    if not (os.path.exists(stamp) and json.load(open(stamp)) == wanted):
        corpus = make_corpus(plan.corpus)
        os.makedirs(root, exist_ok=True)
        base = plan.corpus.seed
        for offset, (name, count) in enumerate(names.items(), start=1):
            pairs = generate_pairs(corpus, count, seed=base * 10 + offset, prefix=f"{name}_")
            write_manifest(pairs, corpus.inventory, root, name)
        with open(stamp, "w") as f:
            json.dump(wanted, f, sort_keys=True)
    inventory = make_corpus(plan.corpus).inventory
    data = {}
    for name, path in manifests.items():
        data[name], _ = read_manifest(path, inventory)
    return data, inventory


# --------------------------------------------------------------------------
# evaluation of one trained model
# --------------------------------------------------------------------------


def speech_mask(pair: UtterancePair) -> np.ndarray:
    return frame_labels(pair.src_lab, pair.src.hop_ms, pair.src.num_frames)[:, 0] != SILENCE_ID


def evaluate_model(model, test_pairs: Sequence[UtterancePair], out_dir: Optional[str] = None) -> dict:
    """Convert every test pair and score it against the target track."""
    rows = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for pair in test_pairs:
        converted, trace = convert(model, pair.src, pair.src_bn)
        ratio = pair.tgt.num_frames / pair.src.num_frames
        diag = attn_diagnostics(trace, speech_mask(pair), expected_ratio=ratio)
        rows.append({
            "id": pair.id,
            "mcd": mcd(converted, pair.tgt),
            "f0_rmse": f0_rmse(converted, pair.tgt),
            "frames": converted.num_frames,
            "ref_frames": pair.tgt.num_frames,
            "length_ratio": converted.num_frames / pair.tgt.num_frames,
            **diag.as_dict(),
        })
        if out_dir:
            write_track(os.path.join(out_dir, f"{pair.id}.trk"), converted)
            np.save(os.path.join(out_dir, f"{pair.id}.attn.npy"), trace)
    return {"utterances": rows, "mean": summarise(rows)}


def summarise(rows: Sequence[dict]) -> dict:
    keys = ("mcd", "f0_rmse", "monotonicity_violation", "coverage_deficit", "repeat_score", "length_ratio")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


# --------------------------------------------------------------------------
# running cells
# --------------------------------------------------------------------------


def _run_cell(plan_dict: dict, out_dir: str, cell: Cell, train_missing: bool) -> dict:
    torch.set_num_threads(1)
    plan = ExperimentPlan(
        cells=[cell],
        out_dir=out_dir,
        corpus=CorpusConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in plan_dict["corpus"].items()}),
        train=TrainConfig(**plan_dict["train"]),
        pool_size=plan_dict["pool_size"],
        valid_size=plan_dict["valid_size"],
        test_size=plan_dict["test_size"],
    )
    data, inventory = build_corpus(plan)
    cell_dir = os.path.join(out_dir, "cells", cell.name)
    ckpt = os.path.join(cell_dir, "model.ckpt")
    config = TrainConfig(**{**plan.train.to_dict(), "seed": cell.seed}).with_mode(cell.mode)
    done = os.path.join(cell_dir, "done.json")
    if not os.path.exists(done):
        if not train_missing:
            raise FileNotFoundError(f"missing checkpoint for cell {cell.name}")
        log.info("training %s", cell.name)
        trainer = train(data["pool"][: cell.size], config, cell_dir, data["valid"],
                        num_phonemes=len(inventory), num_tones=plan.corpus.tone_count)
        with open(done, "w") as f:
            json.dump({"epochs": trainer.epoch, "steps": trainer.step}, f)
    model, _, _ = load_model(ckpt)
    result = evaluate_model(model, data["test"], os.path.join(cell_dir, "converted"))
    with open(os.path.join(cell_dir, "eval.json"), "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
    return {"cell": asdict(cell), **result["mean"]}


def run_experiment(plan: ExperimentPlan, train_missing: bool = True, jobs: int = 1) -> dict:
    """Train/evaluate every cell and assemble the size x mode report."""
    os.makedirs(plan.out_dir, exist_ok=True)
    data, _ = build_corpus(plan)
    stats = corpus_stats(data["pool"]).as_dict()
    plan_dict = plan.to_dict()
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(_run_cell, plan_dict, plan.out_dir, c, train_missing) for c in plan.cells]
            results = [f.result() for f in futures]
    else:
        results = [_run_cell(plan_dict, plan.out_dir, c, train_missing) for c in plan.cells]
    report = {
        "code_version": __version__,
        "plan": plan_dict,
        "corpus_stats": stats,
        "cells": results,
        "grid": grid(results),
    }
    report["trend"] = trend_summary(report["grid"])
    with open(os.path.join(plan.out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    write_grid_csv(report["grid"], os.path.join(plan.out_dir, "table.csv"))
    return report


def grid(results: Sequence[dict]) -> dict:
    """Seed-averaged metrics keyed ``grid[size][mode]``."""
    cells = {}
    for r in results:
        key = (r["cell"]["size"], r["cell"]["mode"])
        cells.setdefault(key, []).append(r)
    out = {}
    for (size, mode), rows in sorted(cells.items()):
        out.setdefault(str(size), {})[mode] = {
            "mcd": float(np.mean([r["mcd"] for r in rows])),
            "f0_rmse": float(np.mean([r["f0_rmse"] for r in rows])),
            "monotonicity_violation": float(np.mean([r["monotonicity_violation"] for r in rows])),
            "coverage_deficit": float(np.mean([r["coverage_deficit"] for r in rows])),
            "length_ratio": float(np.mean([r["length_ratio"] for r in rows])),
            "seeds": sorted(r["cell"]["seed"] for r in rows),
        }
    return out


def trend_summary(table: dict) -> dict:
    """Per size, the mode with the lowest MCD and the lowest F0 RMSE."""
    return {
        size: {
            "best_mcd": min(modes, key=lambda m: modes[m]["mcd"]),
            "best_f0_rmse": min(modes, key=lambda m: modes[m]["f0_rmse"]),
        }
        for size, modes in table.items()
    }


def write_grid_csv(table: dict, path) -> None:
    modes = [m for m in MODES if any(m in row for row in table.values())]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["size"] + [f"{m}_{metric}" for m in modes for metric in ("mcd_db", "f0_rmse_hz")])
        for size, row in sorted(table.items(), key=lambda kv: int(kv[0])):
            cells = []
            for m in modes:
                if m in row:
                    cells += [f"{row[m]['mcd']:.3f}", f"{row[m]['f0_rmse']:.3f}"]
                else:
                    cells += ["", ""]
            writer.writerow([size] + cells)


def per_seed(results: Sequence[dict]) -> dict:
    """``{(size, seed): {mode: result}}`` for ordering checks."""
    out = {}
    for r in results:
        c = r["cell"]
        out.setdefault((c["size"], c["seed"]), {})[c["mode"]] = r
    return out
