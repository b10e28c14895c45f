import csv
import json

import numpy as np
import pytest

from hierage.ablation import AUGMENTATION_COUNTS, matrix, run_ablation, trend_cells
from hierage.data import generate_dataset, write_dataset
from hierage.train import (DEFAULT_CONFIG, LOG_COLUMNS, PREDICTION_COLUMNS, ConfigError,
                           evaluate, load_config, mean_absolute_error, merge, set_path,
                           synthetic_config, train)

TINY = {
    "data": {"n_subjects": 30, "samples_per_subject": 4},
    "model": {"num_layers": 1, "num_heads": 2, "model_dim": 8, "n_views": 3},
    "training": {"epochs": 2, "eval_every": 1},
}


def tiny_cfg(**sections):
    return merge(load_config(), merge(TINY, sections))


def test_mae_examples():
    assert mean_absolute_error([20, 30], [22, 27]) == 2.5
    assert mean_absolute_error([5.5, 7.0], [5.5, 7.0]) == 0.0


def test_mae_matches_direct_sum():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=37), rng.normal(size=37)
    total = 0.0
    for x, y in zip(a, b):
        total += abs(x - y)
    assert abs(mean_absolute_error(a, b) - total / 37) < 1e-12


def test_mae_empty_and_mismatch():
    with pytest.raises(ValueError):
        mean_absolute_error([], [])
    with pytest.raises(ValueError):
        mean_absolute_error([1.0], [1.0, 2.0])


def test_defaults_are_desk_scale():
    cfg = load_config()
    sc = synthetic_config(cfg)
    assert sc.n_features == 16 and sc.n_subjects * sc.samples_per_subject == 5000
    assert cfg["model"]["model_dim"] == 32 and cfg["split"]["kind"] == "SE"
    bins = cfg["bins"]
    assert (bins["stop"] - bins["start"]) / bins["step"] + 1 == 60


def test_overrides_parse_json_values():
    cfg = load_config(overrides=["training.epochs=5", "split.kind=RS", "loss.weights=[1,0,0,1]"])
    assert cfg["training"]["epochs"] == 5
    assert cfg["split"]["kind"] == "RS"
    assert cfg["loss"]["weights"] == [1, 0, 0, 1]


def test_config_file_then_flags(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"training": {"epochs": 9, "batch_size": 8}}))
    cfg = load_config(path, ["training.epochs=3"])
    assert cfg["training"] == {**DEFAULT_CONFIG["training"], "epochs": 3, "batch_size": 8}


@pytest.mark.parametrize("override", ["model.aggregation=max", "model.num_heads=5",
                                      "split.kind=XX", "bogus.key=1", "optimizer.speed=2",
                                      "data.n_features=4"])
def test_invalid_config_rejected(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_malformed_override_and_json(tmp_path):
    with pytest.raises(ConfigError):
        load_config(overrides=["no-equals-sign"])
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_set_path_creates_sections():
    cfg = {}
    set_path(cfg, "a.b.c", "1.5")
    set_path(cfg, "a.d", "text")
    assert cfg == {"a": {"b": {"c": 1.5}, "d": "text"}}


def test_train_writes_outputs(tmp_path):
    result = train(tiny_cfg(), tmp_path)
    for name in ("manifest.json", "train_log.csv", "checkpoint_final.json",
                 "checkpoint_best.json", "predictions.csv"):
        assert (tmp_path / name).exists()
    log = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert tuple(log[0]) == LOG_COLUMNS and len(log) == 2
    rows = list(csv.DictReader(open(tmp_path / "predictions.csv")))
    assert tuple(rows[0]) == PREDICTION_COLUMNS and len(rows) == len(result.test_set)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 0 and man["val_mae"] == result.val_mae
    assert "numpy" in man["versions"]


def test_train_is_reproducible():
    cfg = tiny_cfg()
    assert train(cfg).val_mae == train(cfg).val_mae


def test_eval_is_deterministic():
    result = train(tiny_cfg())
    a = evaluate(result.estimator, result.test_set)
    b = evaluate(result.estimator, result.test_set)
    assert a.mae == b.mae and np.array_equal(a.predicted, b.predicted)


def test_evaluate_empty_dataset():
    result = train(tiny_cfg())
    with pytest.raises(ValueError):
        evaluate(result.estimator, result.test_set.subset(np.array([], dtype=int)))


def test_train_from_dataset_path(tmp_path):
    cfg = tiny_cfg()
    write_dataset(generate_dataset(synthetic_config(cfg)), tmp_path / "d.csv")
    from_file = merge(cfg, {"data": {"path": str(tmp_path / "d.csv")}})
    assert train(from_file).val_mae == train(cfg).val_mae


def test_ablation_matrix_cells():
    cfg = load_config()
    full = matrix(cfg)
    quick = matrix(cfg, quick=True)
    assert [c.setting for c in quick] == ["1 no-encoder"] + [
        s for k in AUGMENTATION_COUNTS for s in ([str(k), "10 average-pool"] if k == 10 else [str(k)])]
    tables = {c.table for c in full}
    assert tables == {"augmentations", "encoder-size", "bin-size"}
    sizes = [c.overrides.get("bins", {}).get("step", 1) for c in full if c.table == "bin-size"]
    assert sizes == [10, 5, 1]
    assert {c.setting for c in trend_cells()} == {"10", "10 average-pool", "1 no-encoder"}


def test_run_ablation_summary(tmp_path):
    cfg = tiny_cfg(training={"epochs": 1})
    cells = trend_cells()
    runs, summary = run_ablation(cfg, cells, [0, 1], tmp_path)
    assert len(runs) == 6 and len(summary) == 3
    for row in summary:
        assert row["mae_min"] <= row["mae"] <= row["mae_max"] and row["n_seeds"] == 2
    header = next(csv.reader(open(tmp_path / "ablation_summary.csv")))
    assert header[:2] == ["table", "setting"] and "mae" in header


def test_final_validation_matches_evaluation():
    result = train(tiny_cfg())
    assert result.history[-1]["val_mae"] == result.val_mae
