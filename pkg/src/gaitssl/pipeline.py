"""Glue from a cohort directory to normalized, split window sets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    NormalizationStats,
    SubjectSplit,
    Trial,
    WindowSet,
    fit_normalizer,
    interpolate_missing,
    load_trials,
    normalize,
    slice_windows,
)
from .errors import DataError
from .synth import read_metadata


@dataclass
class PreparedData:
    splits: dict[str, WindowSet]  # train / validation / test
    stats: NormalizationStats
    features: tuple[str, ...]
    target_channels: tuple[str, ...]
    metadata: dict[str, dict]
    split: SubjectSplit

    @property
    def input_channels(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f not in self.target_channels]

    @property
    def input_features(self) -> list[str]:
        return [self.features[i] for i in self.input_channels]


def trial_dir(data_dir) -> Path:
    p = Path(data_dir)
    return p / "trials" if (p / "trials").is_dir() else p


def cohort_info(data_dir) -> dict:
    p = Path(data_dir) / "cohort.json"
    return json.loads(p.read_text()) if p.exists() else {}


def prepare_trials(trials: list[Trial], split: SubjectSplit, past_len: int, future_len: int,
                   stride: int, target_channels=(), metadata=None,
                   stats: NormalizationStats | None = None) -> PreparedData:
    """Interpolate, normalize and window ``trials`` into train / validation / test sets.

    ``stats`` reuses a stored normalizer (e.g. from a checkpoint); otherwise one
    is fitted on the training subjects of ``split``.
    """
    if not trials:
        raise DataError("no trials found")
    features = trials[0].features
    for t in trials:
        if t.features != features:
            raise DataError(f"trial {t.key} has features {t.features}, expected {features}")
    split.check_covers(t.subject_id for t in trials)
    unknown = [c for c in target_channels if c not in features]
    if unknown:
        raise DataError(f"target channels {unknown} not among features {list(features)}")
    filled = [interpolate_missing(t) for t in trials]
    if stats is None:
        stats = fit_normalizer(filled, split)
    elif len(stats.minimum) != len(features):
        raise DataError(f"normalizer has {len(stats.minimum)} features, data has {len(features)}")
    normed = [normalize(t, stats) for t in filled]
    parts: dict[str, list] = {"train": [], "validation": [], "test": []}
    for t in normed:
        parts[split.part_of(t.subject_id)].extend(slice_windows(t, past_len, future_len, stride))
    splits = {k: WindowSet.from_windows(v, features) for k, v in parts.items()}
    for k, ws in splits.items():
        if len(ws) == 0:
            splits[k] = WindowSet(np.zeros((0, past_len + future_len, len(features))), [], [], [],
                                  features)
    return PreparedData(splits, stats, tuple(features), tuple(target_channels),
                        metadata or {}, split)


def prepare(data_dir, split: SubjectSplit, past_len: int, future_len: int, stride: int,
            target_channels=None, stats: NormalizationStats | None = None) -> PreparedData:
    """Load, interpolate, normalize (train-fitted) and window a cohort directory.

    ``target_channels=None`` takes the list from ``cohort.json`` when present.
    """
    info = cohort_info(data_dir)
    if target_channels is None:
        target_channels = info.get("target_channels", [])
    meta_path = Path(data_dir) / "metadata.csv"
    metadata = read_metadata(meta_path) if meta_path.exists() else {}
    trials = load_trials(trial_dir(data_dir))
    return prepare_trials(trials, split, past_len, future_len, stride, target_channels, metadata,
                          stats)
