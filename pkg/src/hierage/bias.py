"""Per-group error breakdowns from a predictions CSV.

Age ranges are half-open ``[lo, lo + width)`` intervals of the *true* age.
Standard deviations use the population convention (divide by n) unless
``ddof=1`` is requested; the choice never affects MAE.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GROUPINGS = ("age-range", "gender", "ethnicity", "gender-ethnicity")
_ALIASES = {"age": "age-range", "gender×ethnicity": "gender-ethnicity",
            "gender_x_ethnicity": "gender-ethnicity", "cross": "gender-ethnicity"}
THRESHOLDS = (1, 2, 3, 5)


class PredictionsFormatError(ValueError):
    pass


@dataclass
class Predictions:
    sample_id: np.ndarray
    subject_id: np.ndarray
    true_age: np.ndarray
    predicted_age: np.ndarray
    gender: np.ndarray
    ethnicity: np.ndarray

    def __len__(self) -> int:
        return self.true_age.size

    @property
    def errors(self) -> np.ndarray:
        """Signed errors, predicted minus true."""
        return self.predicted_age - self.true_age


def read_predictions(source) -> Predictions:
    """Parse a predictions CSV from a path (or pass through a Predictions)."""
    if isinstance(source, Predictions):
        return source
    path = Path(source)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PredictionsFormatError(f"{path}:1: missing header") from None
        need = ("sample_id", "subject_id", "true_age", "predicted_age")
        missing = [c for c in need if c not in header]
        if missing:
            raise PredictionsFormatError(f"{path}:1: missing columns {missing}")
        col = {c: header.index(c) for c in header}
        rows = {c: [] for c in ("sample_id", "subject_id", "true_age", "predicted_age",
                                "gender", "ethnicity")}
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise PredictionsFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                rows["sample_id"].append(int(rec[col["sample_id"]]))
                rows["subject_id"].append(int(rec[col["subject_id"]]))
                rows["true_age"].append(float(rec[col["true_age"]]))
                rows["predicted_age"].append(float(rec[col["predicted_age"]]))
            except ValueError as exc:
                raise PredictionsFormatError(f"{path}:{lineno}: {exc}") from None
            rows["gender"].append(rec[col["gender"]] if "gender" in col else "")
            rows["ethnicity"].append(rec[col["ethnicity"]] if "ethnicity" in col else "")
    return Predictions(np.array(rows["sample_id"], dtype=np.int64),
                       np.array(rows["subject_id"], dtype=np.int64),
                       np.array(rows["true_age"], dtype=np.float64),
                       np.array(rows["predicted_age"], dtype=np.float64),
                       np.array(rows["gender"], dtype=object),
                       np.array(rows["ethnicity"], dtype=object))


@dataclass
class GroupStats:
    key: str
    count: int
    mae: float | None
    std: float | None


@dataclass
class BiasReport:
    grouping: str
    groups: list[GroupStats]
    overall_mae: float
    n: int
    ddof: int = 0

    def weighted_mae(self) -> float:
        """``sum_g count_g * MAE_g / N``; equals ``overall_mae`` by construction."""
        return sum(g.count * g.mae for g in self.groups if g.count) / self.n

    def header(self) -> str:
        basis = "true age" if self.grouping == "age-range" else self.grouping
        conv = "population" if self.ddof == 0 else "sample"
        return (f"# grouping: {self.grouping} (assigned by {basis}); "
                f"std: {conv}; N={self.n}; overall MAE={self.overall_mae:.4f}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "count", "mae", "std"])
        for g in self.groups:
            w.writerow([g.key, g.count, _cell(g.mae), _cell(g.std)])
        w.writerow(["ALL", self.n, _cell(self.overall_mae), ""])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("group")] + [len(g.key) for g in self.groups] + [3])
        lines = [self.header(),
                 f"{'group':<{width}}  {'Samples#':>9}  {'MAE':>7}  {'Std':>7}"]
        for g in self.groups:
            lines.append(f"{g.key:<{width}}  {g.count:>9d}  {_fmt(g.mae):>7}  {_fmt(g.std):>7}")
        lines.append(f"{'ALL':<{width}}  {self.n:>9d}  {_fmt(self.overall_mae):>7}  {'':>7}")
        return "\n".join(lines) + "\n"


def _cell(x) -> str:
    return "" if x is None else repr(float(x))


def _fmt(x) -> str:
    return "" if x is None else f"{x:.2f}"


def _age_key(lo: float, width: float) -> str:
    def n(v):
        return str(int(v)) if float(v).is_integer() else f"{v:g}"
    return f"{n(lo)}-{n(lo + width)}"


def group_report(predictions, grouping: str, age_bin_width: float = 5.0,
                 age_anchor: float | None = None, ddof: int = 0) -> BiasReport:
    """Count, MAE and error std per group.

    ``age_anchor`` defaults to the smallest true age rounded down to a
    multiple of ``age_bin_width`` (ages 16.. give rows 15-20, 20-25, ...).
    Every range between the anchor and the oldest sample is reported, as is
    every observed gender x ethnicity cell, even when empty.
    """
    grouping = _ALIASES.get(grouping, grouping)
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}; choose from {GROUPINGS}")
    if age_bin_width <= 0:
        raise ValueError("age_bin_width must be positive")
    p = read_predictions(predictions)
    if len(p) == 0:
        raise ValueError("no predictions to audit")
    abs_err = np.abs(p.errors)

    if grouping == "age-range":
        anchor = (age_bin_width * math.floor(p.true_age.min() / age_bin_width)
                  if age_anchor is None else age_anchor)
        if np.any(p.true_age < anchor):
            raise ValueError(f"age_anchor {anchor} exceeds the youngest true age")
        idx = np.floor((p.true_age - anchor) / age_bin_width).astype(int)
        keys = [_age_key(anchor + i * age_bin_width, age_bin_width)
                for i in range(idx.max() + 1)]
        labels = np.array([keys[i] for i in idx], dtype=object)
    elif grouping == "gender":
        labels = p.gender
        keys = sorted(set(labels))
    elif grouping == "ethnicity":
        labels = p.ethnicity
        keys = sorted(set(labels))
    else:
        labels = np.array([f"{g}/{e}" for g, e in zip(p.gender, p.ethnicity)], dtype=object)
        keys = [f"{g}/{e}" for g in sorted(set(p.gender)) for e in sorted(set(p.ethnicity))]

    groups = []
    for key in keys:
        mask = labels == key
        n = int(mask.sum())
        if n == 0:
            groups.append(GroupStats(key, 0, None, None))
            continue
        e = abs_err[mask]
        std = float(np.std(e, ddof=ddof)) if n > ddof else None
        groups.append(GroupStats(key, n, float(e.mean()), std))
    return BiasReport(grouping, groups, float(abs_err.mean()), len(p), ddof)


@dataclass
class ErrorHistogram:
    bin_width: float
    centers: np.ndarray
    counts: np.ndarray
    within: dict

    @property
    def fractions(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else self.counts.astype(float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_center", "count", "fraction"])
        for c, n, f in zip(self.centers, self.counts, self.fractions):
            w.writerow([repr(float(c)), int(n), repr(float(f))])
        return buf.getvalue()

    def within_csv(self) -> str:
        lines = ["threshold,fraction"] + [f"{t},{self.within[t]!r}" for t in self.within]
        return "\n".join(lines) + "\n"


def error_histogram(predictions, bin_width: float = 1.0, thresholds=THRESHOLDS) -> ErrorHistogram:
    """Histogram of signed errors in bins centred on multiples of ``bin_width``.

    Bin edges sit at odd multiples of ``bin_width / 2`` and ties round away
    from zero, so the binning is symmetric under ``e -> -e``.  Also reports
    the fraction of samples with ``|e| <= t`` for each threshold.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    p = read_predictions(predictions)
    e = p.errors
    k = (np.sign(e) * np.floor(np.abs(e) / bin_width + 0.5)).astype(int)
    m = int(np.abs(k).max()) if k.size else 0
    ks = np.arange(-m, m + 1)
    counts = np.array([(k == i).sum() for i in ks], dtype=np.int64)
    n = max(len(p), 1)
    within = {t: float((np.abs(e) <= t).sum()) / n for t in thresholds}
    return ErrorHistogram(bin_width, ks * bin_width, counts, within)
