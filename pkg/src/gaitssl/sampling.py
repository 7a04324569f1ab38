"""Subject-balanced batch planning: S subjects x W windows per batch."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientSubjectsError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchPlan:
    # (subject_id, window_index) pairs, contiguous per subject
    entries: tuple[tuple[str, int], ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def subjects(self) -> list[str]:
        out = []
        for s, _ in self.entries:
            if not out or out[-1] != s:
                out.append(s)
        return out


def plan_epoch(pool: dict[str, int], subjects_per_batch: int, windows_per_subject: int,
               seed: int, strict: bool = False) -> list[BatchPlan]:
    """Plan one epoch of balanced batches.

    Subjects are drawn uniformly without replacement inside a batch, independently
    across batches, so a subject's chance of appearing does not depend on how many
    windows it owns. Subjects with fewer than ``windows_per_subject`` windows are
    sampled with replacement. The epoch has ``ceil(total_windows / batch_size)`` batches.
    """
    if not pool:
        raise ConfigError("window pool is empty")
    if subjects_per_batch < 1 or windows_per_subject < 1:
        raise ConfigError("subjects_per_batch and windows_per_subject must be >= 1")
    subjects = sorted(s for s, n in pool.items() if n > 0)
    if not subjects:
        raise ConfigError("window pool has no windows")
    S = subjects_per_batch
    if len(subjects) < S:
        if strict:
            raise InsufficientSubjectsError(
                f"pool has {len(subjects)} subjects, batch needs {S}")
        logger.warning("pool has %d subjects < subjects_per_batch=%d; shrinking S",
                       len(subjects), S)
        S = len(subjects)
    W = windows_per_subject
    total = sum(pool[s] for s in subjects)
    n_batches = math.ceil(total / (S * W))
    rng = np.random.default_rng(seed)
    plans = []
    for _ in range(n_batches):
        chosen = rng.choice(len(subjects), size=S, replace=False)
        entries = []
        for k in chosen:
            sid = subjects[k]
            n = pool[sid]
            idx = rng.choice(n, size=W, replace=n < W)
            entries.extend((sid, int(i)) for i in idx)
        plans.append(BatchPlan(tuple(entries)))
    return plans
