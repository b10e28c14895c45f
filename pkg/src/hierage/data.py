"""Synthetic longitudinal age data, feature-space augmentation, RS/SE splits
and the dataset CSV format.

Features are ``gain * g(age) + group offsets + subject offset + noise``,
optionally mirrored (coordinate order reversed), where ``g`` is a fixed smooth
injective map of age into ``age_signal_dims`` coordinates: a linear ramp plus
sinusoids of distinct frequencies.  Gain and mirroring are the per-sample
nuisances that the augmentations imitate.

By default ``g`` fills the leading coordinates.  With ``bilateral=True`` it is
laid out in mirror pairs ``(j, F-1-j)`` that carry the same component, like
the two halves of a face, so a flip changes the nuisance terms but not the
age signal (exactly so when ``age_signal_dims`` is even or ``F`` is odd).

Dataset CSV: header ``sample_id,subject_id,age,gender,ethnicity,f0,...``,
UTF-8, LF line endings, floats with 9 significant digits.  Generated datasets
are already quantised to 9 digits, so writing and reading back is bit-exact.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

GENDERS = ("M", "F")
ETHNICITIES = ("Black", "White", "Asian", "Hispanic", "Other")

# MORPH II demographic totals: 46,645 male / 8,489 female images and
# 42,589 / 10,559 / 154 / 1,769 / 63 by ethnicity.
MORPH_GENDER_SKEW = {"M": 46645 / 55134, "F": 8489 / 55134}
MORPH_ETHNICITY_SKEW = {
    "Black": 42589 / 55134, "White": 10559 / 55134, "Asian": 154 / 55134,
    "Hispanic": 1769 / 55134, "Other": 63 / 55134,
}
BALANCED_GENDER_SKEW = {g: 1 / len(GENDERS) for g in GENDERS}
BALANCED_ETHNICITY_SKEW = {e: 1 / len(ETHNICITIES) for e in ETHNICITIES}

_FIXED_COLUMNS = ("sample_id", "subject_id", "age", "gender", "ethnicity")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    sample_id: int
    subject_id: int
    age: float
    gender: str
    ethnicity: str
    features: np.ndarray


@dataclass(eq=False)
class Dataset:
    """Column-oriented collection of samples plus generation metadata.

    Equality compares the samples only, bit for bit; metadata is ignored.
    """

    sample_id: np.ndarray
    subject_id: np.ndarray
    age: np.ndarray
    gender: np.ndarray
    ethnicity: np.ndarray
    features: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_id = np.asarray(self.sample_id, dtype=np.int64).reshape(-1)
        self.subject_id = np.asarray(self.subject_id, dtype=np.int64).reshape(-1)
        self.age = np.asarray(self.age, dtype=np.float64).reshape(-1)
        self.gender = np.asarray(self.gender, dtype=object).reshape(-1)
        self.ethnicity = np.asarray(self.ethnicity, dtype=object).reshape(-1)
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.sample_id.size
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must be [{n}, F], got {self.features.shape}")
        for name in ("subject_id", "age", "gender", "ethnicity"):
            if getattr(self, name).size != n:
                raise ValueError(f"column {name} has {getattr(self, name).size} rows, expected {n}")

    def __len__(self) -> int:
        return self.sample_id.size

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __getitem__(self, i: int) -> SubjectRecord:
        return SubjectRecord(int(self.sample_id[i]), int(self.subject_id[i]), float(self.age[i]),
                             str(self.gender[i]), str(self.ethnicity[i]), self.features[i])

    def records(self) -> Iterator[SubjectRecord]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.sample_id[idx], self.subject_id[idx], self.age[idx],
                       self.gender[idx], self.ethnicity[idx], self.features[idx],
                       dict(self.metadata))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.features.shape == other.features.shape
                and np.array_equal(self.sample_id, other.sample_id)
                and np.array_equal(self.subject_id, other.subject_id)
                and self.age.tobytes() == other.age.tobytes()
                and list(self.gender) == list(other.gender)
                and list(self.ethnicity) == list(other.ethnicity)
                and self.features.tobytes() == other.features.tobytes())


@dataclass
class SyntheticConfig:
    n_subjects: int = 1000
    samples_per_subject: int = 5
    n_features: int = 16
    age_signal_dims: int = 8
    noise_sigma: float = 0.1
    min_age: float = 16.0
    max_age: float = 77.0
    age_span: float = 10.0
    gender_skew: dict = field(default_factory=lambda: dict(MORPH_GENDER_SKEW))
    ethnicity_skew: dict = field(default_factory=lambda: dict(MORPH_ETHNICITY_SKEW))
    group_shift: float = 0.05
    subject_sigma: float = 0.0
    gain_jitter: float = 0.0
    mirror_prob: float = 0.0
    bilateral: bool = False
    seed: int = 0

    def validate(self) -> None:
        for axis in ("gender_skew", "ethnicity_skew"):
            props = getattr(self, axis)
            vals = np.array(list(props.values()), dtype=np.float64)
            if np.any(vals < 0) or abs(vals.sum() - 1.0) > 1e-9:
                raise ValueError(f"{axis} proportions must be >= 0 and sum to 1, got {props}")
        if self.n_subjects < 0 or self.samples_per_subject < 1:
            raise ValueError("n_subjects must be >= 0 and samples_per_subject >= 1")
        if not 1 <= self.age_signal_dims <= self.n_features:
            raise ValueError("age_signal_dims must lie in [1, n_features]")
        if self.max_age <= self.min_age:
            raise ValueError("max_age must exceed min_age")
        if not 0 <= self.age_span <= self.max_age - self.min_age:
            raise ValueError("age_span must lie in [0, max_age - min_age]")
        if not 0 <= self.gain_jitter < 1:
            raise ValueError("gain_jitter must lie in [0, 1)")
        if not 0 <= self.mirror_prob <= 1:
            raise ValueError("mirror_prob must lie in [0, 1]")
        for name in ("noise_sigma", "group_shift", "subject_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def quantize(x) -> np.ndarray:
    """Round to the 9-significant-digit values the CSV format stores."""
    x = np.asarray(x, dtype=np.float64)
    return np.array([float(f"{v:.9g}") for v in x.reshape(-1)]).reshape(x.shape)


def age_signal(age, min_age: float, max_age: float, dims: int) -> np.ndarray:
    """Fixed smooth injective embedding of age into ``dims`` coordinates."""
    t = (np.asarray(age, dtype=np.float64) - min_age) / (max_age - min_age)
    out = np.empty(t.shape + (dims,))
    out[..., 0] = 2.0 * t - 1.0
    for j in range(1, dims):
        out[..., j] = np.sin(np.pi * (0.5 + 0.75 * j) * t + 0.9 * j)
    return out


def _signal_columns(config: SyntheticConfig) -> np.ndarray:
    dims, f = config.age_signal_dims, config.n_features
    if not config.bilateral:
        return np.arange(dims)
    # mirror pairs (j, F-1-j) from both ends; an odd leftover takes the centre
    left = np.arange(dims // 2)
    cols = np.concatenate([left, f - 1 - left[::-1]])
    if dims % 2:
        cols = np.sort(np.append(cols, f // 2))
    return cols


def _signal_block(ages, config: SyntheticConfig) -> np.ndarray:
    dims = config.age_signal_dims
    if not config.bilateral:
        return age_signal(ages, config.min_age, config.max_age, dims)
    # both members of a mirror pair carry the same component, so reversing
    # coordinate order leaves the age signal unchanged
    half = dims // 2
    h = age_signal(ages, config.min_age, config.max_age, half + dims % 2)
    parts = [h[:, :half]]
    if dims % 2:
        parts.append(h[:, half:])
    parts.append(h[:, :half][:, ::-1])
    return np.concatenate(parts, axis=1)


def _exact_counts(n: int, props: dict) -> dict:
    # largest-remainder apportionment: every count within 1 of n * p
    keys = list(props)
    raw = np.array([props[k] * n for k in keys])
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return dict(zip(keys, counts.tolist()))


def _assign(n: int, props: dict, rng) -> np.ndarray:
    counts = _exact_counts(n, props)
    labels = np.array([k for k, c in counts.items() for _ in range(c)], dtype=object)
    return labels[rng.permutation(n)] if n else labels


def generate_dataset(config: SyntheticConfig) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    ns, spp, f = config.n_subjects, config.samples_per_subject, config.n_features
    n = ns * spp

    genders = _assign(ns, config.gender_skew, rng)
    ethnicities = _assign(ns, config.ethnicity_skew, rng)
    group_dirs = {}
    for key in list(config.gender_skew) + list(config.ethnicity_skew):
        v = rng.normal(size=f)
        group_dirs[key] = config.group_shift * v / np.linalg.norm(v)

    base = rng.uniform(config.min_age, config.max_age - config.age_span, size=ns)
    offsets = np.sort(rng.uniform(0.0, config.age_span, size=(ns, spp)), axis=1)
    ages = quantize(np.clip(base[:, None] + offsets, config.min_age, config.max_age).reshape(-1))

    subject_off = rng.normal(0.0, config.subject_sigma, size=(ns, f))
    gain = rng.uniform(1.0 - config.gain_jitter, 1.0 + config.gain_jitter, size=n)
    noise = rng.normal(0.0, config.noise_sigma, size=(n, f))
    mirror = rng.random(n) < config.mirror_prob

    subj = np.repeat(np.arange(ns), spp)
    feats = np.zeros((n, f))
    feats[:, _signal_columns(config)] = _signal_block(ages, config)
    feats *= gain[:, None]
    feats += np.stack([group_dirs[genders[s]] + group_dirs[ethnicities[s]] for s in subj]) \
        if n else 0.0
    feats += subject_off[subj] + noise
    feats[mirror] = feats[mirror, ::-1]

    meta = {"generator": "hierage.synthetic", "config": _config_meta(config)}
    return Dataset(np.arange(n), subj, ages, genders[subj] if n else [],
                   ethnicities[subj] if n else [], quantize(feats).reshape(n, f), meta)


def _config_meta(config: SyntheticConfig) -> dict:
    from dataclasses import asdict
    return asdict(config)


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmentationSpec:
    """Feature-space analogs of image augmentations.

    noise ~ colour jitter, mask ~ random erasing, scale ~ affine zoom,
    flip ~ horizontal flip (reverse coordinate order, i.e. swap each
    mirror pair ``(j, F-1-j)``).
    """

    p_noise: float = 0.5
    p_mask: float = 0.5
    p_scale: float = 0.5
    p_flip: float = 0.5
    noise_sigma: float = 0.1
    mask_fraction: float = 0.25
    scale_range: tuple = (0.8, 1.2)
    include_original: bool = True

    def __post_init__(self):
        for name in ("p_noise", "p_mask", "p_scale", "p_flip"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.mask_fraction < 1:
            raise ValueError("mask_fraction must lie in [0, 1)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(p_noise=0.0, p_mask=0.0, p_scale=0.0, p_flip=0.0)


def augment_batch(X, n_views: int, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """``[B, F]`` -> ``[B, K, F]`` stochastic views of each row."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    b, f = X.shape
    out = np.repeat(X[:, None, :], n_views, axis=1)
    start = 1 if spec.include_original else 0
    m = n_views - start
    if m == 0:
        return out
    v = out[:, start:]

    flip = rng.random((b, m)) < spec.p_flip
    v[flip] = v[flip][:, ::-1]

    lo, hi = spec.scale_range
    gains = rng.uniform(lo, hi, size=(b, m))
    v *= np.where(rng.random((b, m)) < spec.p_scale, gains, 1.0)[..., None]

    jitter = rng.normal(0.0, 1.0, size=(b, m, f)) * spec.noise_sigma
    v += (rng.random((b, m)) < spec.p_noise)[..., None] * jitter

    n_mask = int(np.floor(spec.mask_fraction * f))
    keys = rng.random((b, m, f))
    apply = rng.random((b, m)) < spec.p_mask
    if n_mask:
        chosen = np.argsort(keys, axis=-1)[..., :n_mask]
        erase = np.zeros((b, m, f), dtype=bool)
        np.put_along_axis(erase, chosen, True, axis=-1)
        v[erase & apply[..., None]] = 0.0
    out[:, start:] = v
    return out


def augment(features, n_views: int, spec: AugmentationSpec, seed) -> np.ndarray:
    """``[F]`` -> ``[K, F]``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return augment_batch(np.asarray(features, dtype=np.float64)[None], n_views, spec, rng)[0]


def sample_seed(run_seed: int, sample_id: int) -> np.random.SeedSequence:
    """Per-sample seed: SeedSequence hash of ``(run_seed, sample_id)``."""
    return np.random.SeedSequence([int(run_seed), int(sample_id)])


def augment_per_sample(X, sample_ids, n_views: int, spec: AugmentationSpec,
                       run_seed: int) -> np.ndarray:
    """Augment every row with its own derived seed, independent of batching."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((X.shape[0], n_views, X.shape[1]))
    for i, sid in enumerate(sample_ids):
        out[i] = augment(X[i], n_views, spec, sample_seed(run_seed, sid))
    return out


# -- splits -------------------------------------------------------------------

@dataclass(frozen=True)
class SplitProtocol:
    kind: str = "SE"
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("RS", "SE"):
            raise ValueError(f"split kind must be 'RS' or 'SE', got {self.kind!r}")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


def split_indices(subject_id, protocol: SplitProtocol) -> tuple[np.ndarray, np.ndarray]:
    subject_id = np.asarray(subject_id)
    n = subject_id.size
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(protocol.seed)
    if protocol.kind == "RS":
        perm = rng.permutation(n)
        n_train = int(round(protocol.train_fraction * n))
        train = np.zeros(n, dtype=bool)
        train[perm[:n_train]] = True
    else:
        subjects = np.unique(subject_id)
        perm = rng.permutation(subjects)
        n_train = int(round(protocol.train_fraction * subjects.size))
        train = np.isin(subject_id, perm[:n_train])
    return np.flatnonzero(train), np.flatnonzero(~train)


def split(dataset: Dataset, protocol: SplitProtocol) -> tuple[Dataset, Dataset]:
    """RS splits samples uniformly; SE splits subjects, samples follow them."""
    train, test = split_indices(dataset.subject_id, protocol)
    return dataset.subset(train), dataset.subset(test)


# -- CSV I/O ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def dumps_dataset(dataset: Dataset) -> str:
    buf = io.StringIO()
    cols = list(_FIXED_COLUMNS) + [f"f{j}" for j in range(dataset.n_features)]
    buf.write(",".join(cols) + "\n")
    for i in range(len(dataset)):
        for tag in (dataset.gender[i], dataset.ethnicity[i]):
            if "," in str(tag) or "\n" in str(tag):
                raise ValueError(f"demographic tag {tag!r} cannot contain ',' or newlines")
        row = [str(int(dataset.sample_id[i])), str(int(dataset.subject_id[i])),
               _fmt(dataset.age[i]), str(dataset.gender[i]), str(dataset.ethnicity[i])]
        row.extend(_fmt(v) for v in dataset.features[i])
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_dataset(dataset))


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}:1: missing header")
    header = lines[0].split(",")
    if tuple(header[:5]) != _FIXED_COLUMNS or any(
            h != f"f{j}" for j, h in enumerate(header[5:])):
        raise DatasetFormatError(f"{path}:1: unexpected header {lines[0]!r}")
    f = len(header) - 5
    sids, subj, ages, genders, eths, feats = [], [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise DatasetFormatError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
        try:
            sids.append(int(parts[0]))
            subj.append(int(parts[1]))
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-integer id") from None
        try:
            ages.append(float(parts[2]))
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric age {parts[2]!r}") from None
        genders.append(parts[3])
        eths.append(parts[4])
        try:
            feats.append([float(v) for v in parts[5:]])
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric feature value") from None
    return Dataset(sids, subj, ages, genders, eths,
                   np.array(feats, dtype=np.float64).reshape(len(sids), f))
