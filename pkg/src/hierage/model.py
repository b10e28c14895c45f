"""The full network: stem + aggregation + hierarchical head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .aggregator import (EncoderConfig, EncoderParams, aggregate, config_dict,
                         load_checkpoint, save_checkpoint)
from .autodiff import Tensor
from .head import AgeBins, HeadParams, classify, infer_age, residuals


@dataclass
class AgeModel:
    config: EncoderConfig
    bins: AgeBins
    encoder: EncoderParams
    head: HeadParams

    @classmethod
    def initialize(cls, config: EncoderConfig, bins: AgeBins, seed) -> "AgeModel":
        rng = np.random.default_rng(seed)
        encoder = EncoderParams.initialize(config, rng)
        head = HeadParams.initialize(config.model_dim, len(bins), rng)
        return cls(config, bins, encoder, head)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.tensors, **self.head.tensors}

    def forward(self, views, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        """Logits and residuals, each ``[B, C]``, for ``views`` of shape ``[B, K, F]``."""
        fused = aggregate(views, self.encoder, self.config, training, rng)
        return classify(fused, self.head), residuals(fused, self.head)

    def predict_views(self, views, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode ages ``[B]`` and posteriors ``[B, C]``, computed off-tape."""
        views = np.asarray(views, dtype=np.float64)
        ages, posts = [], []
        with ad.no_tape():
            for lo in range(0, views.shape[0], batch_size):
                logits, resid = self.forward(views[lo:lo + batch_size])
                p = ad.softmax(logits)
                ages.append(infer_age(p, resid, self.bins).data)
                posts.append(p.data)
        if not ages:
            return np.zeros(0), np.zeros((0, len(self.bins)))
        return np.concatenate(ages), np.concatenate(posts)

    def loss(self, views, ages, weights: losses.LossWeights, l2_mode: str = "soft",
             training: bool = False, rng=None) -> tuple[Tensor, dict]:
        """Composite weighted loss and its terms for one batch."""
        ages = np.asarray(ages, dtype=np.float64)
        targets = self.bins.nearest(ages)
        logits, resid = self.forward(views, training, rng)
        post = ad.softmax(logits)
        terms = {
            "ce": losses.cross_entropy(logits, targets),
            "lm": losses.mean_loss(post, self.bins, ages),
            "lv": losses.variance_loss(post, self.bins),
            "l2": losses.ensemble_l2(post, resid, self.bins, ages, l2_mode, targets),
        }
        total = losses.total_loss(terms["ce"], terms["lm"], terms["lv"], terms["l2"], weights)
        terms["pred"] = infer_age(post, resid, self.bins)
        return total, terms

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.parameters().items():
            t.data[...] = state[k]

    def save(self, path, extra: dict | None = None) -> None:
        cfg = {"encoder": config_dict(self.config), "bins": self.bins.values.tolist()}
        if extra:
            cfg["extra"] = extra
        save_checkpoint(path, cfg, self.parameters())

    @classmethod
    def load(cls, path, with_extra: bool = False):
        cfg, tensors = load_checkpoint(path)
        config = EncoderConfig(**cfg["encoder"])
        encoder = EncoderParams({k: v for k, v in tensors.items() if not k.startswith("head.")})
        head = HeadParams.from_tensors(tensors)
        model = cls(config, AgeBins(np.array(cfg["bins"])), encoder, head)
        return (model, cfg.get("extra", {})) if with_extra else model
