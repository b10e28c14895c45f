"""Finite-difference check of every loss term through the whole network."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .aggregator import EncoderConfig
from .head import AgeBins
from .losses import LossWeights
from .model import AgeModel

TERMS = ("ce", "lm", "lv", "l2", "total")


def tiny_problem(seed: int = 0, n: int = 4, n_features: int = 6, model_dim: int = 8,
                 n_views: int = 3, n_bins: int = 5, num_heads: int = 2, num_layers: int = 2):
    rng = np.random.default_rng(seed)
    config = EncoderConfig(input_dim=n_features, model_dim=model_dim, num_layers=num_layers,
                           num_heads=num_heads, n_views=n_views, dropout_p=0.1)
    bins = AgeBins.arange(20, 20 + 5 * (n_bins - 1), 5)
    model = AgeModel.initialize(config, bins, rng.integers(2 ** 32))
    # nudge every parameter off its initial value so no gradient is trivially zero
    for t in model.parameters().values():
        t.data += rng.normal(0.0, 0.1, size=t.shape)
    views = rng.normal(size=(n, n_views, n_features))
    ages = rng.uniform(bins.values[0], bins.values[-1], size=n)
    return model, views, ages


def gradient_errors(seed: int = 0, eps: float = 1e-5, l2_mode: str = "soft") -> dict[str, float]:
    """Worst relative analytic-vs-central-difference error per loss term (eval mode)."""
    model, views, ages = tiny_problem(seed)
    weights = LossWeights()
    params = model.parameters()

    def term(name):
        def f():
            total, terms = model.loss(views, ages, weights, l2_mode, training=False)
            return total if name == "total" else terms[name]
        return f

    return {name: ad.grad_check(term(name), params, eps) for name in TERMS}
