"""scikit-learn compatible front end.

:class:`HierarchicalAgeRegressor` maps raw feature rows to ages.  Each row
is expanded into ``n_views`` augmented views, fused by the configured
aggregation and read out by the hierarchical head.  It follows the usual
estimator contract (``get_params``/``set_params``, ``fit`` returns ``self``,
fitted attributes end in ``_``), so it drops into pipelines, ``clone`` and
cross-validation helpers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .aggregator import EncoderConfig, EncoderParams
from .autodiff import Tensor
from .data import (AugmentationSpec, SplitProtocol, augment_batch, augment_per_sample,
                   split_indices)
from .head import AgeBins, HeadParams
from .losses import LossWeights
from .model import AgeModel
from .optim import OptimizerConfig, Ranger, cosine_lr

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def _bins_from_param(bins) -> AgeBins:
    if bins is None:
        return AgeBins.one_to_75()
    if isinstance(bins, AgeBins):
        return bins
    return AgeBins(np.asarray(bins, dtype=np.float64))


class HierarchicalAgeRegressor(RegressorMixin, BaseEstimator):
    """Augmentation-aggregating age regressor with a classifier/residual head.

    Parameters
    ----------
    n_views : int
        Augmented views per input (K).  Row 0 is the unaugmented input when
        ``augmentation.include_original`` is set.
    aggregation : {"encoder", "average-pool", "none"}
        How views are fused; ``"none"`` uses the first view's stem output.
    bins : array-like or None
        Age bin centres; ``None`` means ``1, 2, ..., 75``.
    loss_weights : 4-tuple
        Weights of cross-entropy, mean, variance and ensemble-L2 terms.
    l2_mode : {"soft", "hard"}
        Posterior-weighted or target-bin-only ensemble L2.
    eval_views : int or None
        Views used at prediction time.  ``None`` uses ``n_views`` augmented
        views with per-sample seeds; ``1`` disables test-time augmentation
        (the original row is repeated ``n_views`` times).
    """

    def __init__(self, *, n_views=10, aggregation="encoder", num_layers=4, num_heads=4,
                 model_dim=32, ffn_dim=None, dropout=0.1, bins=None,
                 loss_weights=(0.2, 0.05, 1.0, 1.0), l2_mode="soft",
                 lr=1e-3, min_lr=0.0, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0,
                 rectify=True, lookahead=True, lookahead_k=6, lookahead_alpha=0.5,
                 grad_clip=None, batch_size=32, epochs=30, augmentation=None,
                 eval_views=None, eval_every=1, random_state=0, verbose=0):
        self.n_views = n_views
        self.aggregation = aggregation
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.model_dim = model_dim
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.bins = bins
        self.loss_weights = loss_weights
        self.l2_mode = l2_mode
        self.lr = lr
        self.min_lr = min_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.rectify = rectify
        self.lookahead = lookahead
        self.lookahead_k = lookahead_k
        self.lookahead_alpha = lookahead_alpha
        self.grad_clip = grad_clip
        self.batch_size = batch_size
        self.epochs = epochs
        self.augmentation = augmentation
        self.eval_views = eval_views
        self.eval_every = eval_every
        self.random_state = random_state
        self.verbose = verbose

    # -- configuration ---------------------------------------------------------

    def _encoder_config(self, n_features: int) -> EncoderConfig:
        return EncoderConfig(
            input_dim=n_features, model_dim=self.model_dim, num_layers=self.num_layers,
            num_heads=self.num_heads, ffn_dim=self.ffn_dim, dropout_p=self.dropout,
            n_views=1 if self.aggregation == "none" else self.n_views,
            aggregation=self.aggregation)

    def _optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            base_lr=self.lr, min_lr=self.min_lr, beta1=self.beta1, beta2=self.beta2,
            eps=self.eps, weight_decay=self.weight_decay, rectify=self.rectify,
            lookahead=self.lookahead, lookahead_k=self.lookahead_k,
            lookahead_alpha=self.lookahead_alpha, grad_clip=self.grad_clip)

    def _augmentation(self) -> AugmentationSpec:
        return self.augmentation if self.augmentation is not None else AugmentationSpec()

    def _seeds(self):
        init, shuffle, drop, evaluation = np.random.SeedSequence(self.random_state).spawn(4)
        return init, np.random.default_rng(shuffle), np.random.default_rng(drop), \
            int(evaluation.generate_state(1)[0])

    # -- fitting ---------------------------------------------------------------

    def fit(self, X, y, eval_set=None):
        """Train end to end on rows ``X`` with ages ``y``.

        ``eval_set=(X_val, y_val)`` or ``(X_val, y_val, sample_ids)`` adds a
        validation MAE to ``history_`` every ``eval_every`` epochs and tracks
        the best parameters.  Pass the sample ids to draw the same test-time
        views that ``predict`` will.
        """
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.bins_ = _bins_from_param(self.bins)
        self.loss_weights_ = LossWeights(*self.loss_weights)
        config = self._encoder_config(X.shape[1])
        spec = self._augmentation()
        opt_cfg = self._optimizer_config()
        init_seed, rng, drop_rng, self.eval_seed_ = self._seeds()

        self.model_ = AgeModel.initialize(config, self.bins_, init_seed)
        params = self.model_.parameters()
        opt = Ranger(params, opt_cfg)

        n = X.shape[0]
        bs = min(self.batch_size, n)
        steps_per_epoch = math.ceil(n / bs)
        total_steps = self.epochs * steps_per_epoch
        if eval_set is not None:
            if len(eval_set) not in (2, 3):
                raise ValueError("eval_set must be (X, y) or (X, y, sample_ids)")
            X_val, y_val = check_X_y(*eval_set[:2], dtype=np.float64, y_numeric=True)
            val_ids = eval_set[2] if len(eval_set) == 3 else None

        self.history_ = []
        self.best_val_mae_ = None
        self.best_state_ = None
        step = 0
        for epoch in range(1, self.epochs + 1):
            perm = rng.permutation(n)
            sums = dict.fromkeys(("ce", "lm", "lv", "l2", "total", "abs_err"), 0.0)
            lr = opt_cfg.base_lr
            for lo in range(0, n, bs):
                idx = perm[lo:lo + bs]
                views = augment_batch(X[idx], config.n_views, spec, rng)
                lr = cosine_lr(step, total_steps, opt_cfg.base_lr, opt_cfg.min_lr)
                try:
                    with ad.Tape() as tape:
                        total, terms = self.model_.loss(
                            views, y[idx], self.loss_weights_, self.l2_mode,
                            training=True, rng=drop_rng)
                    for p in params.values():
                        p.zero_grad()
                    ad.backward(total, tape)
                    opt.step({k: p.grad for k, p in params.items() if p.grad is not None}, lr)
                except (ad.NumericError, FloatingPointError) as exc:
                    raise TrainingDivergedError(
                        f"training diverged at epoch {epoch}, step {step + 1}: {exc}") from exc
                step += 1
                w = idx.size
                for key in ("ce", "lm", "lv", "l2"):
                    sums[key] += terms[key].item() * w
                sums["total"] += total.item() * w
                sums["abs_err"] += float(np.abs(terms["pred"].data - y[idx]).sum())

            record = {"epoch": epoch, "step": step, "lr": lr}
            record.update({k: sums[k] / n for k in ("ce", "lm", "lv", "l2", "total")})
            record["train_mae"] = sums["abs_err"] / n
            record["val_mae"] = None
            last = epoch == self.epochs
            if eval_set is not None and (last or (self.eval_every and epoch % self.eval_every == 0)):
                val_mae = float(np.mean(np.abs(self.predict(X_val, val_ids) - y_val)))
                record["val_mae"] = val_mae
                if self.best_val_mae_ is None or val_mae < self.best_val_mae_:
                    self.best_val_mae_ = val_mae
                    self.best_state_ = self.model_.state_dict()
            self.history_.append(record)
            if self.verbose:
                logger.info("epoch %d total %.4f train_mae %.3f val_mae %s", epoch,
                            record["total"], record["train_mae"], record["val_mae"])
        return self

    # -- inference -------------------------------------------------------------

    def _views(self, X, sample_ids=None) -> np.ndarray:
        k = self.model_.config.n_views
        if sample_ids is None:
            sample_ids = np.arange(X.shape[0])
        if self.eval_views == 1 or k == 1:
            return np.repeat(X[:, None, :], k, axis=1)
        if self.eval_views not in (None, k):
            raise ValueError(f"eval_views must be None, 1 or n_views={k}")
        return augment_per_sample(X, sample_ids, k, self._augmentation(), self.eval_seed_)

    def predict(self, X, sample_ids=None) -> np.ndarray:
        """Eval-mode age estimates; augmentation seeds derive from ``sample_ids``
        (row positions by default), so results do not depend on batching."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        self._check_n_features(X)
        return self.model_.predict_views(self._views(X, sample_ids))[0]

    def predict_proba(self, X, sample_ids=None) -> np.ndarray:
        """Posterior over ``bins_`` for each row."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        self._check_n_features(X)
        return self.model_.predict_views(self._views(X, sample_ids))[1]

    def _check_n_features(self, X) -> None:
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but the model was fitted with {self.n_features_in_}")

    def use_best(self) -> "HierarchicalAgeRegressor":
        """Swap in the parameters with the best validation MAE, if tracked."""
        check_is_fitted(self, "model_")
        if self.best_state_ is not None:
            self.model_.load_state_dict(self.best_state_)
        return self

    # -- persistence -----------------------------------------------------------

    def save(self, path, state: dict | None = None) -> None:
        """Write a checkpoint holding the network plus what inference needs.

        ``state`` optionally substitutes a parameter snapshot (e.g. ``best_state_``).
        """
        check_is_fitted(self, "model_")
        model = self.model_
        if state is not None:
            model = AgeModel(model.config, model.bins, *_clone_params(model))
            model.load_state_dict(state)
        extra = {
            "estimator": {k: v for k, v in self.get_params().items()
                          if k not in ("augmentation", "bins")},
            "augmentation": asdict(self._augmentation()),
            "eval_seed": self.eval_seed_,
        }
        model.save(path, extra)

    @classmethod
    def load(cls, path) -> "HierarchicalAgeRegressor":
        model, extra = AgeModel.load(path, with_extra=True)
        params = dict(extra.get("estimator", {}))
        params["loss_weights"] = tuple(params.get("loss_weights", (0.2, 0.05, 1.0, 1.0)))
        aug = dict(extra["augmentation"])
        aug["scale_range"] = tuple(aug["scale_range"])
        est = cls(**params, augmentation=AugmentationSpec(**aug), bins=tuple(model.bins.values))
        est.model_ = model
        est.bins_ = model.bins
        est.loss_weights_ = LossWeights(*est.loss_weights)
        est.n_features_in_ = model.config.input_dim
        est.eval_seed_ = int(extra["eval_seed"])
        est.history_ = []
        est.best_val_mae_ = None
        est.best_state_ = None
        return est


def _clone_params(model: AgeModel):
    enc = EncoderParams({k: Tensor(t.data, True, k) for k, t in model.encoder.tensors.items()})
    head = HeadParams.from_tensors({k: Tensor(t.data, True, k) for k, t in model.head.tensors.items()})
    return enc, head


class FeatureAugmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer expanding ``[N, F]`` rows into ``[N, K, F]`` views."""

    def __init__(self, n_views=10, augmentation=None, random_state=0):
        self.n_views = n_views
        self.augmentation = augmentation
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, sample_ids=None):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        spec = self.augmentation if self.augmentation is not None else AugmentationSpec()
        ids = np.arange(X.shape[0]) if sample_ids is None else sample_ids
        return augment_per_sample(X, ids, self.n_views, spec, self.random_state)


class SubjectSplit:
    """Single train/test split following the RS or SE protocol.

    Mirrors scikit-learn splitters: ``split(X, y, groups)`` yields one pair of
    index arrays; ``groups`` are subject identities.
    """

    def __init__(self, kind="SE", train_fraction=0.8, random_state=0):
        self.kind = kind
        self.train_fraction = train_fraction
        self.random_state = random_state

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return 1

    def split(self, X, y=None, groups=None):
        n = len(X)
        if groups is None:
            if self.kind == "SE":
                raise ValueError("the SE protocol needs subject identities as groups")
            groups = np.arange(n)
        protocol = SplitProtocol(self.kind, self.train_fraction, self.random_state)
        yield split_indices(np.asarray(groups), protocol)
