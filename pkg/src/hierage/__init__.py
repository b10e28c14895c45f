"""Attention-aggregated, hierarchical probabilistic age regression on numpy."""

__version__ = "0.1.0"

from .estimator import FeatureAugmenter, HierarchicalAgeRegressor, SubjectSplit  # noqa: E402

__all__ = ["HierarchicalAgeRegressor", "FeatureAugmenter", "SubjectSplit", "__version__"]
