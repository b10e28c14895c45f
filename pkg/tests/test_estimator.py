import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hierage import FeatureAugmenter, HierarchicalAgeRegressor, SubjectSplit
from hierage.data import AugmentationSpec, SyntheticConfig, generate_dataset

BINS = tuple(float(a) for a in range(16, 78, 2))


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(SyntheticConfig(n_subjects=40, samples_per_subject=4, n_features=8,
                                          age_signal_dims=8, seed=1))
    return ds.features, ds.age, ds.subject_id


def tiny(**kw):
    base = dict(n_views=3, num_layers=1, num_heads=2, model_dim=8, bins=BINS, epochs=2,
                batch_size=16, lr=3e-3)
    base.update(kw)
    return HierarchicalAgeRegressor(**base)


def test_params_round_trip_and_clone():
    est = tiny(dropout=0.2)
    params = est.get_params()
    assert params["dropout"] == 0.2 and params["n_views"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_fit_returns_self_and_sets_attributes(data):
    X, y, _ = data
    est = tiny()
    assert est.fit(X, y) is est
    assert est.n_features_in_ == 8 and len(est.history_) == 2
    assert est.predict(X).shape == (len(y),)
    proba = est.predict_proba(X[:5])
    assert proba.shape == (5, len(BINS))
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-12)


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        tiny().predict(np.zeros((2, 8)))


def test_input_validation(data):
    X, y, _ = data
    with pytest.raises(ValueError):
        tiny().fit(X, y[:-1])
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        tiny().fit(bad, y)
    est = tiny().fit(X, y)
    with pytest.raises(ValueError, match="features"):
        est.predict(X[:, :5])


def test_fit_is_deterministic(data):
    X, y, _ = data
    a = tiny(random_state=3).fit(X, y).predict(X)
    b = tiny(random_state=3).fit(X, y).predict(X)
    np.testing.assert_array_equal(a, b)


def test_predict_is_batch_independent(data):
    X, y, _ = data
    est = tiny().fit(X, y)
    full = est.predict(X, sample_ids=np.arange(len(X)))
    tail = est.predict(X[10:], sample_ids=np.arange(10, len(X)))
    np.testing.assert_array_equal(full[10:], tail)


def test_zero_lr_leaves_params_unchanged(data):
    X, y, _ = data
    est = tiny(lr=0.0, epochs=1)
    est.fit(X, y)
    ref = tiny(lr=0.0, epochs=0).fit(X, y)
    for k, v in est.model_.state_dict().items():
        np.testing.assert_array_equal(v, ref.model_.state_dict()[k])


def test_eval_set_history_and_best(data):
    X, y, _ = data
    est = tiny(epochs=3).fit(X[:120], y[:120], eval_set=(X[120:], y[120:]))
    vals = [r["val_mae"] for r in est.history_]
    assert all(v is not None for v in vals)
    assert est.best_val_mae_ == min(vals)
    assert set(est.history_[0]) >= {"ce", "lm", "lv", "l2", "total", "lr", "train_mae"}


def test_eval_views_one_repeats_original(data):
    X, y, _ = data
    est = tiny().fit(X, y)
    est.eval_views = 1
    views = est._views(X[:2])
    assert np.array_equal(views[:, 0], views[:, 2]) and np.array_equal(views[:, 0], X[:2])


@pytest.mark.parametrize("aggregation", ["average-pool", "none"])
def test_encoder_free_modes_fit(data, aggregation):
    X, y, _ = data
    est = tiny(aggregation=aggregation).fit(X, y)
    assert "cls_token" not in est.model_.encoder.tensors
    assert np.all(np.isfinite(est.predict(X)))


def test_save_load_round_trip(tmp_path, data):
    X, y, _ = data
    est = tiny(augmentation=AugmentationSpec(p_flip=0.0)).fit(X, y)
    est.save(tmp_path / "m.json")
    back = HierarchicalAgeRegressor.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.predict(X), est.predict(X))
    assert back.augmentation.p_flip == 0.0


def test_feature_augmenter():
    X = np.random.default_rng(0).normal(size=(4, 6))
    views = FeatureAugmenter(n_views=5).fit_transform(X)
    assert views.shape == (4, 5, 6)
    np.testing.assert_array_equal(views[:, 0], X)


def test_subject_split(data):
    X, _, groups = data
    (tr, te), = SubjectSplit("SE", 0.75, 2).split(X, groups=groups)
    assert set(groups[tr]).isdisjoint(groups[te])
    with pytest.raises(ValueError):
        next(SubjectSplit("SE").split(X))
    assert SubjectSplit().get_n_splits() == 1
