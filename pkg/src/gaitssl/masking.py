"""Contiguous-span time masks and same-subject support/query tables."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Window
from .errors import ConfigError

logger = logging.getLogger(__name__)


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SpanMaskConfig:
    ratio: float
    seg_min: int
    seg_max: int

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1], got {self.ratio}")
        if not 1 <= self.seg_min <= self.seg_max:
            raise ConfigError(f"need 1 <= seg_min <= seg_max, got [{self.seg_min}, {self.seg_max}]")


@dataclass(frozen=True, eq=False)
class TimeMask:
    flags: np.ndarray  # bool over the region
    region_offset: int = 0
    # (start, length) of every sampled segment, in draw order and region coordinates
    segments: tuple[tuple[int, int], ...] = ()

    @property
    def region_length(self) -> int:
        return len(self.flags)

    @property
    def coverage(self) -> float:
        return float(self.flags.sum()) / len(self.flags)

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def dense(self, total_len: int) -> np.ndarray:
        """Mask over a full window of ``total_len`` steps."""
        if self.region_offset + self.region_length > total_len:
            raise ConfigError("mask region extends past the window")
        out = np.zeros(total_len, dtype=bool)
        out[self.region_offset:self.region_offset + self.region_length] = self.flags
        return out


def sample_span_mask(region_length: int, config: SpanMaskConfig, rng_seed,
                     region_offset: int = 0) -> TimeMask:
    """Union of uniformly placed segments, drawn until coverage reaches ``config.ratio``.

    The last segment may overshoot the target by fewer than ``seg_max`` steps.
    """
    L = int(region_length)
    flags = np.zeros(L, dtype=bool)
    if config.ratio <= 0.0:
        return TimeMask(flags, region_offset)
    if config.ratio >= 1.0:
        flags[:] = True
        return TimeMask(flags, region_offset, ((0, L),))
    lo, hi = config.seg_min, config.seg_max
    if hi > L:
        logger.warning("segment length max %d exceeds region %d; reduced", hi, L)
        hi = L
        lo = min(lo, hi)
    rng = as_rng(rng_seed)
    # exact integer target avoids float round-off at e.g. 0.8 * 100
    target = math.ceil(config.ratio * L - 1e-9)
    covered = 0
    segments = []
    while covered < target:
        lengths = rng.integers(lo, hi + 1, size=16)
        u = rng.random(16)
        for ell, ui in zip(lengths, u):
            ell = int(ell)
            start = int(ui * (L - ell + 1))
            flags[start:start + ell] = True
            segments.append((start, ell))
            covered = int(flags.sum())
            if covered >= target:
                break
    return TimeMask(flags, region_offset, tuple(segments))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def tc_segment_range(future_len: int) -> tuple[int, int]:
    """Segment lengths proportional to the horizon: [T_f/10, T_f/2], clamped to T_f."""
    lo = max(1, _round_half_up(future_len / 10))
    hi = max(2, _round_half_up(future_len / 2))
    hi = min(hi, future_len)
    return min(lo, hi), hi


def build_tc_mask(past_len: int, future_len: int, ratio: float, rng_seed,
                  seg_min: int | None = None, seg_max: int | None = None) -> TimeMask:
    if future_len < 1:
        raise ConfigError("future length must be >= 1")
    auto_lo, auto_hi = tc_segment_range(future_len)
    cfg = SpanMaskConfig(ratio, seg_min or auto_lo, seg_max or auto_hi)
    return sample_span_mask(future_len, cfg, rng_seed, region_offset=past_len)


@dataclass(frozen=True)
class TableOptions:
    queries: int = 1
    query_mask_ratio: float = 1.0
    max_rows: int = 16
    support_selection: str = "random"  # or "nearby"
    query_seg_min: int = 4
    query_seg_max: int = 16

    def __post_init__(self):
        if self.queries < 1:
            raise ConfigError("uicd.queries must be >= 1")
        if self.max_rows < 2:
            raise ConfigError("uicd.max_rows must be >= 2")
        if self.queries >= self.max_rows:
            raise ConfigError("uicd.queries must be < uicd.max_rows")
        if self.support_selection not in ("random", "nearby"):
            raise ConfigError(f"unknown support selection {self.support_selection!r}")
        if not 0.0 < self.query_mask_ratio <= 1.0:
            raise ConfigError("uicd.query_mask_ratio must lie in (0, 1]")


@dataclass(eq=False)
class SupportQueryTable:
    rows: list[Window]
    query_rows: tuple[int, ...]
    query_masks: tuple[TimeMask, ...]  # aligned with query_rows
    subject_id: str
    max_rows: int
    batch_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 2 <= len(self.rows) <= self.max_rows:
            raise ConfigError(f"table needs 2..{self.max_rows} rows, got {len(self.rows)}")
        if not self.query_rows:
            raise ConfigError("table needs at least one query row")
        if any(w.subject_id != self.subject_id for w in self.rows):
            raise ConfigError("table rows must share one subject")

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    def values(self) -> np.ndarray:
        return np.stack([w.values for w in self.rows])

    def query_mask_array(self) -> np.ndarray:
        """(R, T) boolean mask, true at masked positions of query rows."""
        T = self.rows[0].values.shape[0]
        out = np.zeros((len(self.rows), T), dtype=bool)
        for r, m in zip(self.query_rows, self.query_masks):
            out[r] = m.dense(T)
        return out


def _nearby_key(query: Window, cand: Window):
    return (cand.trial_id != query.trial_id, abs(cand.start_index - query.start_index),
            cand.trial_id, cand.start_index)


def select_nearby_supports(query: Window, candidates: Sequence[Window],
                           k: int | None = None) -> list[Window]:
    """Same trial first, then closest start index; ties broken by (trial_id, start)."""
    ordered = sorted(candidates, key=lambda c: _nearby_key(query, c))
    return ordered if k is None else ordered[:k]


def build_uicd_table(batch: Sequence[Window], options: TableOptions,
                     rng_seed) -> SupportQueryTable | None:
    """Build one support/query table from a batch, or None when no subject qualifies.

    Duplicate windows (same trial and start, as produced by with-replacement
    sampling) are collapsed first so a query never sees an exact copy of itself.
    """
    rng = as_rng(rng_seed)
    groups: dict[str, list[int]] = {}
    seen = set()
    for i, w in enumerate(batch):
        key = (w.subject_id, w.trial_id, w.start_index)
        if key in seen:
            continue
        seen.add(key)
        groups.setdefault(w.subject_id, []).append(i)
    eligible = sorted(s for s, ix in groups.items() if len(ix) >= 2)
    if not eligible:
        return None
    subject = eligible[int(rng.integers(len(eligible)))]
    idx = groups[subject]
    n_query = min(options.queries, len(idx) - 1)
    perm = [idx[i] for i in rng.permutation(len(idx))]
    queries, supports = perm[:n_query], perm[n_query:]
    n_keep = options.max_rows - n_query
    if options.support_selection == "nearby":
        q0 = batch[queries[0]]
        supports.sort(key=lambda i: _nearby_key(q0, batch[i]))
    # random mode: supports are already in random order, so truncation trims at random
    supports = supports[:n_keep]
    order = queries + supports
    T = batch[order[0]].values.shape[0]
    masks = []
    for _ in queries:
        if options.query_mask_ratio >= 1.0:
            masks.append(TimeMask(np.ones(T, dtype=bool), 0, ((0, T),)))
        else:
            cfg = SpanMaskConfig(options.query_mask_ratio, options.query_seg_min,
                                 options.query_seg_max)
            masks.append(sample_span_mask(T, cfg, rng))
    return SupportQueryTable(rows=[batch[i] for i in order],
                             query_rows=tuple(range(n_query)),
                             query_masks=tuple(masks),
                             subject_id=subject,
                             max_rows=options.max_rows,
                             batch_indices=tuple(order))
