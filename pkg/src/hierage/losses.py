"""Training objectives for the hierarchical head.

Posteriors and residuals are ``[N, C]`` tensors; ``ages`` are the ground-truth
ages and ``targets`` the nearest-bin indices.  Bin values (not bin indices)
enter the mean and variance terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .head import AgeBins


@dataclass(frozen=True)
class LossWeights:
    ce: float = 0.2
    mean: float = 0.05
    variance: float = 1.0
    l2: float = 1.0

    def __post_init__(self):
        for name in ("ce", "mean", "variance", "l2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name}={v} must be finite and >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ce, self.mean, self.variance, self.l2)


def _check_rows(what: str, t: Tensor, bins: AgeBins, n: int | None = None) -> None:
    if t.ndim != 2 or t.shape[1] != len(bins):
        raise ad.ShapeError(f"{what}: expected [N, {len(bins)}], got {t.shape}")
    if n is not None and t.shape[0] != n:
        raise ad.ShapeError(f"{what}: {t.shape[0]} rows but {n} labels")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of the target bins (log-sum-exp form)."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ad.ShapeError(f"cross_entropy: {targets.shape[0]} targets for {n} rows")
    if np.any(targets < 0) or np.any(targets >= c):
        raise IndexError(f"cross_entropy: target index outside [0, {c})")
    logp = ad.log_softmax(logits, axis=-1)
    return ad.neg(ad.mean(logp[np.arange(n), targets]))


def _expected_age(posteriors: Tensor, bins: AgeBins) -> Tensor:
    return ad.sum_(ad.mul(posteriors, bins.as_tensor()), axis=-1)


def mean_loss(posteriors: Tensor, bins: AgeBins, ages) -> Tensor:
    """``(1/2N) sum_i (E_p[a] - a_i)^2`` -- note the factor one half."""
    ages = np.asarray(ages, dtype=np.float64)
    _check_rows("mean_loss", posteriors, bins, ages.shape[0])
    err = ad.sub(_expected_age(posteriors, bins), Tensor(ages))
    return ad.scale(ad.sum_(ad.square(err)), 0.5 / ages.shape[0])


def variance_loss(posteriors: Tensor, bins: AgeBins) -> Tensor:
    """Batch mean of the posterior variance of the age."""
    _check_rows("variance_loss", posteriors, bins)
    n = posteriors.shape[0]
    mu = ad.reshape(_expected_age(posteriors, bins), (n, 1))
    dev = ad.square(ad.sub(bins.as_tensor(), mu))
    return ad.scale(ad.sum_(ad.mul(posteriors, dev)), 1.0 / n)


def ensemble_l2(posteriors: Tensor, resid: Tensor, bins: AgeBins, ages,
                mode: str = "soft", targets=None) -> Tensor:
    """Sum over bins of the per-bin squared errors of the local estimates.

    ``soft``: each bin's error ``(a_c + r_c - a_i)^2`` is weighted by ``p_ic``.
    ``hard``: only the target bin of each sample contributes, unweighted.
    """
    ages = np.asarray(ages, dtype=np.float64)
    n = ages.shape[0]
    _check_rows("ensemble_l2", resid, bins, n)
    local_err = ad.square(ad.sub(ad.add(resid, bins.as_tensor()),
                                 Tensor(ages.reshape(n, 1))))
    if mode == "soft":
        _check_rows("ensemble_l2", posteriors, bins, n)
        return ad.scale(ad.sum_(ad.mul(posteriors, local_err)), 1.0 / n)
    if mode == "hard":
        targets = bins.nearest(ages) if targets is None else np.asarray(targets)
        return ad.mean(local_err[np.arange(n), targets])
    raise ValueError(f"unknown ensemble_l2 mode {mode!r}")


def total_loss(ce: Tensor, lm: Tensor, lv: Tensor, l2: Tensor, weights: LossWeights) -> Tensor:
    terms = {"ce": ce, "mean": lm, "variance": lv, "l2": l2}
    for name, t in terms.items():
        if not np.all(np.isfinite(t.data)):
            raise ad.NumericError(f"loss term {name} is not finite")
    return (ad.scale(ce, weights.ce) + ad.scale(lm, weights.mean)
            + ad.scale(lv, weights.variance) + ad.scale(l2, weights.l2))
