"""Masked-position reconstruction losses and their weighted sum.

Time indices are 0-based: the future region of a window with past length T_p
is ``T_p .. T_p + T_f - 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, NoSignalError
from .masking import TimeMask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lc: float = 1.0
    tc: float = 1.0
    uicd: float = 1.0

    def __post_init__(self):
        if min(self.lc, self.tc, self.uicd) < 0:
            raise ConfigError("loss weights must be non-negative")
        if max(self.lc, self.tc, self.uicd) <= 0:
            raise ConfigError("at least one loss weight must be positive")

    def as_dict(self) -> dict[str, float]:
        return {"lc": self.lc, "tc": self.tc, "uicd": self.uicd}


@dataclass
class LossReport:
    lc: float | None
    tc: float | None
    uicd: float | None
    joint: float
    counts: dict[str, int] = field(default_factory=dict)
    grad_norm: float | None = None
    total: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def present(self, name: str) -> bool:
        return getattr(self, name) is not None


def _as_bool_tensor(mask, length: int, device=None) -> torch.Tensor:
    if isinstance(mask, TimeMask):
        mask = mask.dense(length)
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask)
    return torch.as_tensor(mask, dtype=torch.bool, device=device)


def masked_mse(target: torch.Tensor, prediction: torch.Tensor, mask: torch.Tensor):
    """Mean squared error over masked steps and all features.

    ``target``/``prediction`` are (T, D) or (B, T, D) with a (T,) or (B, T) mask.
    A batch is averaged per sample; samples with empty masks are left out.
    Returns ``(loss or None, masked step count)``.
    """
    if target.shape != prediction.shape:
        raise ValueError(f"shape mismatch {tuple(target.shape)} vs {tuple(prediction.shape)}")
    mask = mask.expand(target.shape[:-1])
    D = target.shape[-1]
    sq = (target - prediction).pow(2).sum(-1)  # (..., T)
    counts = mask.sum(-1)
    total = int(counts.sum())
    if total == 0:
        return None, 0
    per_sample = (sq * mask).sum(-1) / (counts.clamp(min=1) * D)
    if per_sample.dim() == 0:
        return per_sample, total
    keep = counts > 0
    return per_sample[keep].mean(), total


def lc_loss(target, prediction, mask):
    loss, _ = masked_mse(target, prediction,
                         _as_bool_tensor(mask, target.shape[-2], target.device))
    return loss


def tc_loss(target, prediction, future_mask, past_len: int | None = None):
    """Masked MSE restricted to the future region ``t >= past_len``."""
    if isinstance(future_mask, TimeMask) and past_len is None:
        past_len = future_mask.region_offset
    if past_len is None:
        raise ValueError("past_len is required with a dense future mask")
    m = _as_bool_tensor(future_mask, target.shape[-2], target.device).clone()
    m[..., :past_len] = False
    loss, _ = masked_mse(target, prediction, m)
    return loss


def uicd_loss(target, prediction, query_mask, query_rows=None):
    """Pooled MSE over masked positions of query rows of a (R, T, D) table.

    ``query_mask`` is (R, T) (or batched (B, R, T)); rows outside ``query_rows``
    are ignored even if their mask is set.
    """
    R, T, D = target.shape[-3:]
    m = _as_bool_tensor(query_mask, T, target.device)
    if query_rows is not None:
        keep = torch.zeros(R, dtype=torch.bool, device=m.device)
        keep[list(query_rows)] = True
        m = m & keep.unsqueeze(-1)
    flat = lambda x: x.reshape(*x.shape[:-3], R * T, x.shape[-1])  # noqa: E731
    loss, _ = masked_mse(flat(target), flat(prediction), m.reshape(*m.shape[:-2], R * T))
    return loss


def joint_loss(terms: dict, weights: LossWeights, counts: dict | None = None) -> LossReport:
    """Weighted sum of the present terms; absent (None) terms contribute nothing."""
    w = weights.as_dict()
    total = None
    values = {}
    for name in ("lc", "tc", "uicd"):
        term = terms.get(name)
        if term is None:
            values[name] = None
            continue
        values[name] = float(term.detach())
        if w[name] == 0:
            continue
        contrib = w[name] * term
        total = contrib if total is None else total + contrib
    if total is None:
        raise NoSignalError("no loss term present with positive weight")
    for name, v in values.items():
        if v is None and w[name] > 0:
            logger.debug("loss term %s absent this step", name)
    return LossReport(values["lc"], values["tc"], values["uicd"], float(total.detach()),
                      dict(counts or {}), total=total)
