"""One-factor-at-a-time ablation matrix around the baseline configuration.

Axes: number of augmentations K with the encoder, the two encoder-free
baselines (single view without encoder, K views average-pooled), encoder
depth/heads, and age-bin size.  Every cell is trained once per seed and the
median held-out MAE is reported.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .train import merge, train

AUGMENTATION_COUNTS = (2, 4, 6, 10, 15)
ENCODER_SIZES = (8, 4, 2)
BIN_SIZES = (10, 5, 1)


@dataclass(frozen=True)
class Cell:
    table: str
    setting: str
    overrides: dict = field(default_factory=dict, hash=False, compare=False)

    def key(self) -> str:
        return json.dumps(self.overrides, sort_keys=True)


def _bins_for(size: float, cfg: dict) -> dict:
    if size == 1:
        return {}
    lo, hi = cfg["data"].get("min_age", 16.0), cfg["data"].get("max_age", 77.0)
    return {"bins": {"start": lo + size / 2, "stop": hi, "step": size}}


def augmentation_cells() -> list[Cell]:
    cells = [Cell("augmentations", "1 no-encoder",
                  {"model": {"aggregation": "none", "n_views": 1}})]
    for k in AUGMENTATION_COUNTS:
        cells.append(Cell("augmentations", str(k), {"model": {"n_views": k}}))
        if k == 10:
            cells.append(Cell("augmentations", "10 average-pool",
                              {"model": {"aggregation": "average-pool", "n_views": 10}}))
    return cells


def encoder_size_cells() -> list[Cell]:
    return [Cell("encoder-size", f"{n} layers / {n} heads",
                 {"model": {"num_layers": n, "num_heads": n}} if n != 4 else {"model": {"n_views": 10}})
            for n in ENCODER_SIZES]


def bin_size_cells(cfg: dict) -> list[Cell]:
    return [Cell("bin-size", str(s), _bins_for(s, cfg) or {"model": {"n_views": 10}})
            for s in BIN_SIZES]


def matrix(cfg: dict, quick: bool = False) -> list[Cell]:
    if quick:
        return augmentation_cells()
    return augmentation_cells() + encoder_size_cells() + bin_size_cells(cfg)


def trend_cells() -> list[Cell]:
    """The three cells compared by the aggregation trend check."""
    return [Cell("augmentations", "10", {"model": {"aggregation": "encoder", "n_views": 10}}),
            Cell("augmentations", "10 average-pool",
                 {"model": {"aggregation": "average-pool", "n_views": 10}}),
            Cell("augmentations", "1 no-encoder", {"model": {"aggregation": "none", "n_views": 1}})]


def run_ablation(cfg: dict, cells: list[Cell], seeds, out_dir=None, log=None) -> tuple[list, list]:
    """Train every distinct cell configuration for each seed.

    Returns ``(runs, summary)``: one row per (cell, seed) and one summary row
    per cell with the median MAE.  Cells whose overrides coincide (e.g. the
    baseline appearing on several axes) share runs.
    """
    cache: dict[tuple, float] = {}
    runs, summary = [], []
    for cell in cells:
        maes = []
        for seed in seeds:
            ck = (cell.key(), seed)
            if ck not in cache:
                run_cfg = merge(cfg, cell.overrides)
                run_cfg["seed"] = seed
                t0 = time.perf_counter()
                cache[ck] = train(run_cfg).val_mae
                if log:
                    log(f"{cell.table:>13} | {cell.setting:<18} seed {seed}: "
                        f"MAE {cache[ck]:.4f} ({time.perf_counter() - t0:.1f}s)")
            maes.append(cache[ck])
            runs.append({"table": cell.table, "setting": cell.setting, "seed": seed,
                         "mae": cache[ck]})
        m = merge(cfg, cell.overrides)["model"]
        bins = merge(cfg, cell.overrides)["bins"]
        summary.append({
            "table": cell.table, "setting": cell.setting, "aggregation": m["aggregation"],
            "n_views": m["n_views"], "num_layers": m["num_layers"], "num_heads": m["num_heads"],
            "bin_size": bins.get("step", 1), "mae": float(np.median(maes)),
            "mae_min": float(np.min(maes)), "mae_max": float(np.max(maes)), "n_seeds": len(maes),
        })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "ablation_runs.csv", runs)
        _write_rows(out / "ablation_summary.csv", summary)
    return runs, summary


def _write_rows(path, rows) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
