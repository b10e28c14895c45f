"""Hierarchical age head: a classifier over age bins plus one residual
regressor per bin, combined by expectation.

The local estimate of bin ``c`` is ``a_c + r_c`` and the age estimate is
``sum_c p_c * (a_c + r_c)``; with a one-hot posterior this collapses to the
local estimate of that bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class AgeBins:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size < 2:
            raise ValueError("AgeBins needs at least two bins")
        if not np.all(np.isfinite(v)) or np.any(np.diff(v) <= 0):
            raise ValueError("AgeBins values must be finite and strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def arange(cls, start: float, stop: float, step: float = 1.0) -> "AgeBins":
        """Bins ``start, start+step, ...`` up to and including ``stop``."""
        if step <= 0:
            raise ValueError("bin step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return cls(start + step * np.arange(n))

    @classmethod
    def one_to_75(cls) -> "AgeBins":
        return cls.arange(1, 75, 1)

    def __len__(self) -> int:
        return self.values.size

    @property
    def bin_size(self) -> float:
        return float(np.min(np.diff(self.values)))

    def nearest(self, ages) -> np.ndarray:
        """Index of the nearest bin for each age (ties go to the lower bin)."""
        ages = np.asarray(ages, dtype=np.float64)
        return np.abs(ages[..., None] - self.values).argmin(axis=-1)

    def as_tensor(self) -> Tensor:
        return Tensor(self.values)


@dataclass
class HeadParams:
    classifier_weight: Tensor
    classifier_bias: Tensor
    regressor_weight: Tensor
    regressor_bias: Tensor

    @classmethod
    def initialize(cls, dim: int, n_bins: int, rng: np.random.Generator) -> "HeadParams":
        limit = np.sqrt(6.0 / (dim + n_bins))

        def t(v, name):
            return Tensor(v, requires_grad=True, name=name)

        return cls(
            t(rng.uniform(-limit, limit, size=(dim, n_bins)), "head.classifier.weight"),
            t(np.zeros(n_bins), "head.classifier.bias"),
            t(rng.uniform(-limit, limit, size=(dim, n_bins)) * 0.1, "head.regressor.weight"),
            t(np.zeros(n_bins), "head.regressor.bias"),
        )

    @property
    def tensors(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.classifier_weight, self.classifier_bias,
                                    self.regressor_weight, self.regressor_bias)}

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor]) -> "HeadParams":
        return cls(tensors["head.classifier.weight"], tensors["head.classifier.bias"],
                   tensors["head.regressor.weight"], tensors["head.regressor.bias"])


def _affine(x: Tensor, w: Tensor, b: Tensor, what: str) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ad.ShapeError(f"{what}: embedding dim {x.shape[-1]} != {w.shape[0]}")
    if x.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), w), (w.shape[1],)) + b
    return ad.matmul(x, w) + b


def classify(embedding, params: HeadParams) -> Tensor:
    """Logits over the age bins."""
    return _affine(embedding, params.classifier_weight, params.classifier_bias, "classify")


def residuals(embedding, params: HeadParams) -> Tensor:
    """Per-bin residual regressions ``R_c(x)``, unconstrained."""
    return _affine(embedding, params.regressor_weight, params.regressor_bias, "residuals")


def local_estimate(c: int, residual: float, bins: AgeBins) -> float:
    if not 0 <= c < len(bins):
        raise IndexError(f"bin index {c} outside [0, {len(bins)})")
    return float(bins.values[c] + residual)


def validate_posterior(p, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError("posterior rows must be non-negative and sum to 1")
    return p


def infer_age(posterior, resid, bins: AgeBins) -> Tensor:
    """Expected age ``sum_c p_c (a_c + r_c)`` over the last axis."""
    posterior = posterior if isinstance(posterior, Tensor) else Tensor(posterior)
    resid = resid if isinstance(resid, Tensor) else Tensor(resid)
    c = len(bins)
    if posterior.shape[-1] != c or resid.shape[-1] != c or posterior.shape != resid.shape:
        raise ad.ShapeError(
            f"infer_age: posterior {posterior.shape}, residuals {resid.shape}, {c} bins")
    local = ad.add(resid, bins.as_tensor())
    return ad.sum_(ad.mul(posterior, local), axis=-1)
