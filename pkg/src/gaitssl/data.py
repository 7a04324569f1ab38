"""Trial ingestion, missing-value repair, min-max normalization and windowing.

Trial CSV layout::

    # subject=<id> trial=<id>
    feat_a,feat_b,...
    0.12,,3.4          <- empty field means missing
    ...

Split JSON: ``{"train": [...], "validation": [...], "test": [...]}``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateTrialError,
    EmptyFitError,
    TrialParseError,
    UnrecoverableFeatureError,
)

logger = logging.getLogger(__name__)

_HEADER_RE = re.compile(r"^#\s*subject=(\S+)\s+trial=(\S+)\s*$")


@dataclass(frozen=True, eq=False)
class Trial:
    subject_id: str
    trial_id: str
    values: np.ndarray  # (L, D)
    missing: np.ndarray  # (L, D) bool
    features: tuple[str, ...] = ()

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"trial {self.key}: values must be a non-empty 2-D array")
        if self.missing.shape != self.values.shape:
            raise DataError(f"trial {self.key}: missing mask shape {self.missing.shape} "
                            f"!= values shape {self.values.shape}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.subject_id, self.trial_id)

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Window:
    values: np.ndarray  # (T, D)
    subject_id: str
    trial_id: str
    start_index: int


@dataclass(frozen=True)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray
    fitted_on: frozenset[str]

    @property
    def constant(self) -> np.ndarray:
        return self.maximum == self.minimum

    def to_dict(self) -> dict:
        return {
            "minimum": [float(v) for v in self.minimum],
            "maximum": [float(v) for v in self.maximum],
            "fitted_on": sorted(self.fitted_on),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["minimum"], dtype=np.float64),
                   np.asarray(d["maximum"], dtype=np.float64),
                   frozenset(d["fitted_on"]))


@dataclass(frozen=True)
class SubjectSplit:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]

    def __post_init__(self):
        for a, b in (("train", "validation"), ("train", "test"), ("validation", "test")):
            shared = getattr(self, a) & getattr(self, b)
            if shared:
                raise DataError(f"split sets {a!r} and {b!r} share subjects: {sorted(shared)}")

    @classmethod
    def from_lists(cls, train, validation, test) -> "SubjectSplit":
        return cls(frozenset(map(str, train)), frozenset(map(str, validation)),
                   frozenset(map(str, test)))

    @property
    def all_subjects(self) -> frozenset[str]:
        return self.train | self.validation | self.test

    def part_of(self, subject_id: str) -> str:
        for name in ("train", "validation", "test"):
            if subject_id in getattr(self, name):
                return name
        raise DataError(f"subject {subject_id!r} is not in the split")

    def check_covers(self, subjects: Iterable[str]) -> None:
        extra = set(subjects) - self.all_subjects
        if extra:
            raise DataError(f"subjects missing from split: {sorted(extra)}")

    def to_dict(self) -> dict:
        return {"train": sorted(self.train), "validation": sorted(self.validation),
                "test": sorted(self.test)}


def load_split(path) -> SubjectSplit:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split file {path}: {exc}") from exc
    missing = {"train", "validation", "test"} - set(raw)
    if missing:
        raise DataError(f"split file {path} lacks keys {sorted(missing)}")
    return SubjectSplit.from_lists(raw["train"], raw["validation"], raw["test"])


def save_split(split: SubjectSplit, path) -> None:
    with open(path, "w") as f:
        json.dump(split.to_dict(), f, indent=2)
        f.write("\n")


def split_subjects(subjects: Sequence[str], n_validation: int, n_test: int, seed: int,
                   labels: dict[str, int] | None = None) -> SubjectSplit:
    """Derive a split from a seed. With ``labels`` the held-out sets are stratified."""
    subjects = sorted(set(subjects))
    if n_validation + n_test >= len(subjects):
        raise DataError("not enough subjects to leave any for training")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        return SubjectSplit.from_lists(order[n_validation + n_test:], order[:n_validation],
                                       order[n_validation:n_validation + n_test])
    # round-robin over classes so each held-out set sees every label
    by_label: dict[int, list[str]] = {}
    for s in subjects:
        by_label.setdefault(labels[s], []).append(s)
    queues = []
    for lab in sorted(by_label):
        group = by_label[lab]
        queues.append([group[i] for i in rng.permutation(len(group))])
    interleaved = []
    while any(queues):
        for q in queues:
            if q:
                interleaved.append(q.pop(0))
    return SubjectSplit.from_lists(interleaved[n_validation + n_test:],
                                   interleaved[:n_validation],
                                   interleaved[n_validation:n_validation + n_test])


def read_trial(path) -> Trial:
    path = Path(path)
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    if not lines:
        raise TrialParseError(path, 1, "empty file")
    m = _HEADER_RE.match(lines[0])
    if m is None:
        raise TrialParseError(path, 1, "expected '# subject=<id> trial=<id>' header")
    if len(lines) < 2:
        raise TrialParseError(path, 2, "missing feature-name line")
    features = tuple(next(csv.reader([lines[1]])))
    if not features or any(not name.strip() for name in features):
        raise TrialParseError(path, 2, "empty feature name")
    n_feat = len(features)
    rows, miss = [], []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != n_feat:
            raise TrialParseError(path, lineno, f"expected {n_feat} fields, got {len(row)}")
        vals, m_row = [], []
        for cell in row:
            cell = cell.strip()
            if cell == "":
                vals.append(np.nan)
                m_row.append(True)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise TrialParseError(path, lineno, f"non-numeric field {cell!r}") from None
            if not math.isfinite(v):
                raise TrialParseError(path, lineno, f"non-finite field {cell!r}")
            vals.append(v)
            m_row.append(False)
        rows.append(vals)
        miss.append(m_row)
    if not rows:
        raise TrialParseError(path, 3, "no samples")
    return Trial(m.group(1), m.group(2), np.asarray(rows, dtype=np.float64),
                 np.asarray(miss, dtype=bool), features)


def write_trial(trial: Trial, path) -> None:
    features = trial.features or tuple(f"f{i}" for i in range(trial.values.shape[1]))
    with open(path, "w", newline="") as f:
        f.write(f"# subject={trial.subject_id} trial={trial.trial_id}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(features)
        for vals, miss in zip(trial.values, trial.missing):
            w.writerow(["" if m else repr(float(v)) for v, m in zip(vals, miss)])


def load_trials(path) -> list[Trial]:
    """Load every ``*.csv`` trial file in a directory, sorted by file name."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"trial directory not found: {path}")
    trials, seen = [], {}
    for file in sorted(path.glob("*.csv")):
        trial = read_trial(file)
        if trial.key in seen:
            raise DuplicateTrialError(
                f"duplicate (subject, trial) {trial.key} in {seen[trial.key]} and {file}")
        seen[trial.key] = file
        trials.append(trial)
    return trials


def interpolate_missing(trial: Trial) -> Trial:
    """Linear interpolation along time per feature; edges take the nearest observed value."""
    values = trial.values.copy()
    t = np.arange(trial.length)
    for d in range(values.shape[1]):
        observed = ~trial.missing[:, d]
        if not observed.any():
            name = trial.features[d] if trial.features else str(d)
            raise UnrecoverableFeatureError(
                f"trial {trial.key}: feature column {d} ({name}) has no observed values")
        if observed.all():
            continue
        # np.interp already clamps to the first/last observed value outside the range
        values[~observed, d] = np.interp(t[~observed], t[observed], values[observed, d])
    return Trial(trial.subject_id, trial.trial_id, values,
                 np.zeros_like(trial.missing), trial.features)


def fit_normalizer(trials: Sequence[Trial], split: SubjectSplit) -> NormalizationStats:
    lo = hi = None
    fitted = set()
    # subject membership is checked before values are touched: held-out data is never read
    for trial in trials:
        if trial.subject_id not in split.train:
            continue
        v = trial.values
        if trial.missing.any():
            raise DataError(f"trial {trial.key} must be interpolated before fitting")
        t_lo, t_hi = v.min(axis=0), v.max(axis=0)
        lo = t_lo if lo is None else np.minimum(lo, t_lo)
        hi = t_hi if hi is None else np.maximum(hi, t_hi)
        fitted.add(trial.subject_id)
    if lo is None:
        raise EmptyFitError("no training-subject trials to fit normalization on")
    return NormalizationStats(lo, hi, frozenset(fitted))


def normalize(trial: Trial, stats: NormalizationStats) -> Trial:
    """Affine map to the training range; constant features become 0.5, no clipping."""
    span = stats.maximum - stats.minimum
    const = span == 0
    safe = np.where(const, 1.0, span)
    out = (trial.values - stats.minimum) / safe
    out[:, const] = 0.5
    return Trial(trial.subject_id, trial.trial_id, out, trial.missing.copy(), trial.features)


def slice_windows(trial: Trial, past_len: int, future_len: int, stride: int) -> list[Window]:
    if past_len < 1 or future_len < 1:
        raise DataError("past and future lengths must be >= 1")
    if stride < 1:
        raise DataError("stride must be >= 1")
    size = past_len + future_len
    if trial.length < size:
        logger.warning("trial %s has %d samples < window length %d; skipped",
                       trial.key, trial.length, size)
        return []
    return [Window(trial.values[s:s + size], trial.subject_id, trial.trial_id, s)
            for s in range(0, trial.length - size + 1, stride)]


def augment_window(values: np.ndarray, rng: np.random.Generator, scale_range=(0.9, 1.1),
                   jitter_std=0.01, max_warp=0.05, offset_std=0.0) -> np.ndarray:
    """Dynamics-preserving perturbation: amplitude scale, time warp, level shift, jitter."""
    T, D = values.shape
    scale = rng.uniform(*scale_range, size=D)
    centre = values.mean(axis=0)
    out = centre + (values - centre) * scale
    if max_warp > 0:
        rate = 1.0 + rng.uniform(-max_warp, max_warp)
        t = np.clip(np.arange(T) * rate, 0, T - 1)
        out = np.stack([np.interp(t, np.arange(T), out[:, d]) for d in range(D)], axis=1)
    if offset_std > 0:
        out = out + rng.normal(0.0, offset_std, size=(1, D))
    if jitter_std > 0:
        out = out + rng.normal(0.0, jitter_std, size=out.shape)
    return out


@dataclass
class WindowSet:
    """Stacked windows with provenance, the array form used by training and probing."""

    values: np.ndarray  # (N, T, D)
    subject_ids: list[str]
    trial_ids: list[str]
    starts: list[int]
    features: tuple[str, ...] = ()
    _by_subject: dict[str, list[int]] | None = field(default=None, repr=False)

    @classmethod
    def from_windows(cls, windows: Sequence[Window], features=()) -> "WindowSet":
        if windows:
            values = np.stack([w.values for w in windows])
        else:
            values = np.zeros((0, 0, len(features)))
        return cls(values, [w.subject_id for w in windows], [w.trial_id for w in windows],
                   [int(w.start_index) for w in windows], tuple(features))

    def __len__(self) -> int:
        return len(self.subject_ids)

    def window(self, i: int) -> Window:
        return Window(self.values[i], self.subject_ids[i], self.trial_ids[i], self.starts[i])

    def by_subject(self) -> dict[str, list[int]]:
        if self._by_subject is None:
            groups: dict[str, list[int]] = {}
            for i, s in enumerate(self.subject_ids):
                groups.setdefault(s, []).append(i)
            self._by_subject = groups
        return self._by_subject

    def pool(self) -> dict[str, int]:
        return {s: len(ix) for s, ix in self.by_subject().items()}

    def channel_indices(self, names: Sequence[str]) -> list[int]:
        unknown = [n for n in names if n not in self.features]
        if unknown:
            raise DataError(f"unknown channels {unknown}; available {list(self.features)}")
        return [self.features.index(n) for n in names]

    def window_ids(self) -> list[str]:
        return [f"{s}:{t}:{st}" for s, t, st in zip(self.subject_ids, self.trial_ids, self.starts)]
