"""Run configuration and the end-to-end train / evaluate pipeline.

A run configuration is a JSON object with optional sections; anything left
out takes the desk default::

    {
      "seed": 0,
      "data":         {SyntheticConfig fields, plus "path": existing dataset CSV},
      "split":        {"kind": "SE" | "RS", "train_fraction": 0.8},
      "model":        {"aggregation", "n_views", "num_layers", "num_heads",
                       "model_dim", "ffn_dim", "dropout"},
      "bins":         {"start": 17, "stop": 76, "step": 1},
      "loss":         {"weights": [0.2, 0.05, 1, 1], "l2_mode": "soft"},
      "optimizer":    {OptimizerConfig fields},
      "training":     {"batch_size", "epochs", "eval_views", "eval_every"},
      "augmentation": {AugmentationSpec fields}
    }

Outputs written by :func:`train` into its output directory: ``manifest.json``,
``train_log.csv``, ``checkpoint_final.json``, ``checkpoint_best.json`` and
``predictions.csv`` (held-out split).
"""

from __future__ import annotations

import copy
import csv
import json
import platform
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (AugmentationSpec, Dataset, SplitProtocol, SyntheticConfig,
                   generate_dataset, read_dataset, split)
from .estimator import HierarchicalAgeRegressor
from .head import AgeBins
from .optim import OptimizerConfig

LOG_COLUMNS = ("epoch", "step", "lr", "ce", "lm", "lv", "l2", "total", "train_mae", "val_mae")
PREDICTION_COLUMNS = ("sample_id", "subject_id", "true_age", "predicted_age", "gender", "ethnicity")

# Desk-scale defaults: F=16, d=32, 60 one-year bins, 5000 samples, SE split.
DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "n_subjects": 250, "samples_per_subject": 20, "n_features": 16,
        "age_signal_dims": 16, "noise_sigma": 0.5, "age_span": 20.0,
        "group_shift": 0.05, "subject_sigma": 1.0, "gain_jitter": 0.3, "mirror_prob": 0.0,
        "bilateral": True,
    },
    "split": {"kind": "SE", "train_fraction": 0.8},
    "model": {"aggregation": "encoder", "n_views": 10, "num_layers": 4, "num_heads": 4,
              "model_dim": 32, "ffn_dim": None, "dropout": 0.3},
    "bins": {"start": 17, "stop": 76, "step": 1},
    "loss": {"weights": [0.2, 0.05, 1.0, 1.0], "l2_mode": "soft"},
    "optimizer": {"base_lr": 3e-3, "min_lr": 0.0, "grad_clip": 1.0},
    "training": {"batch_size": 32, "epochs": 20, "eval_views": None, "eval_every": 5},
    "augmentation": {},
}

QUICK_OVERRIDES = {
    "data": {"n_subjects": 60, "samples_per_subject": 5},
    "model": {"num_layers": 2, "num_heads": 2, "model_dim": 16},
    "training": {"epochs": 3, "eval_every": 1},
}


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    """Apply an override such as ``training.epochs=5`` (value parsed as JSON)."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    node[keys[-1]] = value


def load_config(path=None, overrides=(), quick: bool = False) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if quick:
        cfg = merge(cfg, QUICK_OVERRIDES)
    if path is not None:
        try:
            cfg = merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_path(cfg, key, value)
    validate_config(cfg)
    return cfg


_SECTIONS = {"seed", "data", "split", "model", "bins", "loss", "optimizer", "training",
             "augmentation"}


def validate_config(cfg: dict) -> None:
    unknown = set(cfg) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        synthetic_config(cfg)
        split_protocol(cfg)
        age_bins(cfg)
        augmentation_spec(cfg)
        opt = dict(cfg["optimizer"])
        OptimizerConfig(**opt)
        est = build_estimator(cfg)
        if est.aggregation not in ("encoder", "average-pool", "none"):
            raise ValueError(f"unknown aggregation {est.aggregation!r}")
        if est.model_dim % est.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if est.l2_mode not in ("soft", "hard"):
            raise ValueError(f"unknown l2_mode {est.l2_mode!r}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def synthetic_config(cfg: dict) -> SyntheticConfig:
    data = {k: v for k, v in cfg["data"].items() if k != "path"}
    sc = SyntheticConfig(**data)
    sc.seed = data.get("seed", cfg["seed"])
    sc.validate()
    return sc


def split_protocol(cfg: dict) -> SplitProtocol:
    s = cfg["split"]
    return SplitProtocol(s.get("kind", "SE"), s.get("train_fraction", 0.8),
                         s.get("seed", cfg["seed"]))


def age_bins(cfg: dict) -> AgeBins:
    b = cfg["bins"]
    if "values" in b:
        return AgeBins(np.asarray(b["values"], dtype=np.float64))
    return AgeBins.arange(b["start"], b["stop"], b.get("step", 1.0))


def augmentation_spec(cfg: dict) -> AugmentationSpec:
    aug = dict(cfg.get("augmentation", {}))
    if "scale_range" in aug:
        aug["scale_range"] = tuple(aug["scale_range"])
    return AugmentationSpec(**aug)


def build_estimator(cfg: dict) -> HierarchicalAgeRegressor:
    m, o, t, loss = cfg["model"], cfg["optimizer"], cfg["training"], cfg["loss"]
    opt_names = {f.name for f in fields(OptimizerConfig)}
    unknown = set(o) - opt_names
    if unknown:
        raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
    o = {**asdict(OptimizerConfig()), **o}
    return HierarchicalAgeRegressor(
        n_views=m["n_views"], aggregation=m["aggregation"], num_layers=m["num_layers"],
        num_heads=m["num_heads"], model_dim=m["model_dim"], ffn_dim=m.get("ffn_dim"),
        dropout=m["dropout"], bins=tuple(age_bins(cfg).values),
        loss_weights=tuple(loss["weights"]), l2_mode=loss["l2_mode"],
        lr=o["base_lr"], min_lr=o["min_lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
        weight_decay=o["weight_decay"], rectify=o["rectify"], lookahead=o["lookahead"],
        lookahead_k=o["lookahead_k"], lookahead_alpha=o["lookahead_alpha"],
        grad_clip=o["grad_clip"], batch_size=t["batch_size"], epochs=t["epochs"],
        augmentation=augmentation_spec(cfg), eval_views=t.get("eval_views"),
        eval_every=t.get("eval_every", 1), random_state=cfg["seed"])


def load_or_generate(cfg: dict) -> Dataset:
    path = cfg["data"].get("path")
    return read_dataset(path) if path else generate_dataset(synthetic_config(cfg))


def manifest(cfg: dict, command: str, **extra) -> dict:
    return {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed") if isinstance(cfg, dict) else None,
        "versions": {"hierage": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        **extra,
    }


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# -- evaluation ---------------------------------------------------------------

@dataclass
class Evaluation:
    mae: float
    predicted: np.ndarray
    dataset: Dataset

    def rows(self):
        d = self.dataset
        for i in range(len(d)):
            yield {"sample_id": int(d.sample_id[i]), "subject_id": int(d.subject_id[i]),
                   "true_age": float(d.age[i]), "predicted_age": float(self.predicted[i]),
                   "gender": d.gender[i], "ethnicity": d.ethnicity[i]}


def mean_absolute_error(predicted, truth) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.size == 0:
        raise ValueError("MAE of an empty set is undefined")
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    return float(np.mean(np.abs(predicted - truth)))


def evaluate(estimator: HierarchicalAgeRegressor, dataset: Dataset) -> Evaluation:
    """Eval-mode MAE on ``dataset``; augmentation seeds derive from sample ids."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = estimator.predict(dataset.features, sample_ids=dataset.sample_id)
    return Evaluation(mean_absolute_error(pred, dataset.age), pred, dataset)


def write_predictions(evaluation: Evaluation, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for r in evaluation.rows():
            w.writerow([r["sample_id"], r["subject_id"], repr(r["true_age"]),
                        repr(r["predicted_age"]), r["gender"], r["ethnicity"]])


def write_log(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for rec in history:
            w.writerow(["" if rec.get(c) is None else rec[c] for c in LOG_COLUMNS])


# -- pipeline -----------------------------------------------------------------

@dataclass
class TrainResult:
    estimator: HierarchicalAgeRegressor
    history: list
    train_set: Dataset
    test_set: Dataset
    test: Evaluation

    @property
    def val_mae(self) -> float:
        return self.test.mae


def train(cfg: dict, out_dir=None) -> TrainResult:
    """Generate or load data, split, fit, evaluate and (optionally) write outputs.

    The held-out split doubles as the validation set for logging and the
    best checkpoint; the reported MAE always uses the final parameters.
    """
    dataset = load_or_generate(cfg)
    train_set, test_set = split(dataset, split_protocol(cfg))
    est = build_estimator(cfg)
    est.fit(train_set.features, train_set.age,
            eval_set=(test_set.features, test_set.age, test_set.sample_id))
    result = TrainResult(est, est.history_, train_set, test_set, evaluate(est, test_set))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(est.history_, out / "train_log.csv")
        est.save(out / "checkpoint_final.json")
        est.save(out / "checkpoint_best.json", state=est.best_state_)
        write_predictions(result.test, out / "predictions.csv")
        write_json(out / "manifest.json", manifest(
            cfg, "train", n_train=len(train_set), n_test=len(test_set),
            val_mae=result.val_mae, best_val_mae=est.best_val_mae_))
    return result
