"""Pretraining loop: joint masked objectives, AdamW, cosine schedule, early stopping."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .data import Window, WindowSet, augment_window
from .errors import ConfigError, NoSignalError, NumericError
from .masking import SpanMaskConfig, TableOptions, build_tc_mask, build_uicd_table, sample_span_mask
from .model import EncoderConfig, EncoderModel
from .objectives import LossReport, LossWeights, joint_loss, lc_loss, tc_loss, uicd_loss
from .sampling import plan_epoch

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lc", "tc", "uicd", "joint", "lr", "grad_norm", "val_joint")

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    max_epochs: int = 200
    patience: int = 20
    schedule: str = "cosine"
    eta_min: float = 0.0
    min_delta: float = 1e-6
    seed: int = 0
    val_seed: int = 1234
    weights: LossWeights = field(default_factory=LossWeights)
    use_lc: bool = True
    use_tc: bool = True
    use_uicd: bool = True
    past_len: int = 50
    future_len: int = 50
    lc_mask: SpanMaskConfig = field(default_factory=lambda: SpanMaskConfig(0.8, 4, 16))
    tc_ratio: float = 1.0
    tc_seg_min: int | None = None
    tc_seg_max: int | None = None
    table: TableOptions = field(default_factory=TableOptions)
    tables_per_batch: int = 1
    subjects_per_batch: int = 32
    windows_per_subject: int = 4
    strict_sampler: bool = False
    augment: bool = False
    augment_scale: float = 0.3
    augment_warp: float = 0.2
    augment_offset: float = 0.1
    augment_jitter: float = 0.01

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.schedule != "cosine":
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.eta_min <= self.learning_rate:
            raise ConfigError("eta_min must lie in [0, learning_rate]")
        if self.subjects_per_batch < 1 or self.windows_per_subject < 1:
            raise ConfigError("sampler.subjects_per_batch and sampler.windows_per_subject must be >= 1")
        if self.past_len < 1 or self.future_len < 1:
            raise ConfigError("data.past_len and data.future_len must be >= 1")
        if not 0.0 < self.tc_ratio <= 1.0:
            raise ConfigError("tc.mask_ratio must lie in (0, 1]")
        if self.tables_per_batch < 1:
            raise ConfigError("tables_per_batch must be >= 1")
        if not 0 <= self.augment_scale < 1 or not 0 <= self.augment_warp < 1:
            raise ConfigError("augment_scale and augment_warp must lie in [0, 1)")
        if self.augment_offset < 0 or self.augment_jitter < 0:
            raise ConfigError("augment_offset and augment_jitter must be >= 0")
        if not any(self.active.values()):
            raise ConfigError("no objective enabled with a positive weight")

    @property
    def active(self) -> dict[str, bool]:
        w = self.weights
        return {"lc": self.use_lc and w.lc > 0, "tc": self.use_tc and w.tc > 0,
                "uicd": self.use_uicd and w.uicd > 0}


def _augment(values, rng, config: TrainConfig):
    a = config.augment_scale
    return augment_window(values.astype(np.float64), rng, (1 - a, 1 + a), config.augment_jitter,
                          config.augment_warp, config.augment_offset)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing from ``learning_rate`` at epoch 0 to ``eta_min`` at the last epoch."""
    if not 0 <= epoch < config.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.max_epochs})")
    if config.max_epochs == 1:
        return config.learning_rate
    phase = math.pi * epoch / (config.max_epochs - 1)
    return config.eta_min + 0.5 * (config.learning_rate - config.eta_min) * (1 + math.cos(phase))


def clip_gradients(params: Sequence[torch.nn.Parameter], clip_norm: float) -> float:
    """Scale gradients in place to global L2 norm ``clip_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    sq = sum(float(g.detach().double().pow(2).sum()) for g in grads)
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        bad = [i for i, g in enumerate(grads) if not torch.isfinite(g).all()]
        raise NumericError(f"non-finite gradient in {len(bad)} parameter tensor(s)")
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, betas=BETAS,
                             eps=EPS, weight_decay=config.weight_decay)


def build_model(config: EncoderConfig, seed: int) -> EncoderModel:
    torch.manual_seed(derive_seed(seed, 1))
    return EncoderModel(config)


def pretext_terms(model: EncoderModel, windows: Sequence[Window], config: TrainConfig,
                  seed: int, active: dict[str, bool] | None = None):
    """Forward the active objectives on one batch; return ``(terms, counts)``.

    LC and TC see the same windows with independent mask draws. uICD builds
    ``tables_per_batch`` tables from the batch; a batch with no eligible subject
    leaves the uICD term absent.
    """
    active = active or config.active
    B = len(windows)
    T = config.past_len + config.future_len
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.stack([w.values for w in windows]), dtype=dtype)
    if x.shape[1] != T:
        raise ConfigError(f"windows have length {x.shape[1]}, config expects {T}")
    lc_ss, tc_ss, ui_ss = np.random.SeedSequence(seed).spawn(3)
    terms, counts = {}, {}
    if active["lc"]:
        rng = np.random.default_rng(lc_ss)
        m = np.stack([sample_span_mask(T, config.lc_mask, rng).flags for _ in range(B)])
        mask = torch.from_numpy(m)
        pred = model.reconstruct(x, mask, "lc")
        terms["lc"] = lc_loss(x, pred, mask)
        counts["lc"] = int(m.sum())
    if active["tc"]:
        rng = np.random.default_rng(tc_ss)
        if config.tc_ratio >= 1.0:
            one = build_tc_mask(config.past_len, config.future_len, 1.0, rng).dense(T)
            m = np.broadcast_to(one, (B, T)).copy()
        else:
            m = np.stack([
                build_tc_mask(config.past_len, config.future_len, config.tc_ratio, rng,
                              config.tc_seg_min, config.tc_seg_max).dense(T)
                for _ in range(B)])
        mask = torch.from_numpy(m)
        pred = model.reconstruct(x, mask, "tc")
        terms["tc"] = tc_loss(x, pred, mask, config.past_len)
        counts["tc"] = int(m.sum())
    if active["uicd"]:
        rng = np.random.default_rng(ui_ss)
        losses, n = [], 0
        for _ in range(config.tables_per_batch):
            table = build_uicd_table(windows, config.table, rng)
            if table is None:
                break
            rows = torch.as_tensor(table.values(), dtype=dtype)
            qmask = torch.from_numpy(table.query_mask_array())
            pred = model.reconstruct_table(rows, qmask)
            loss = uicd_loss(rows, pred, qmask, table.query_rows)
            if loss is not None:
                losses.append(loss)
                n += int(qmask.sum())
        terms["uicd"] = torch.stack(losses).mean() if losses else None
        counts["uicd"] = n
    return terms, counts


def train_step(model: EncoderModel, optimizer: torch.optim.Optimizer,
               windows: Sequence[Window], config: TrainConfig, seed: int,
               lr: float) -> LossReport | None:
    """One optimization step. Returns None when every loss term was absent."""
    model.train()
    terms, counts = pretext_terms(model, windows, config, seed)
    try:
        report = joint_loss(terms, config.weights, counts)
    except NoSignalError:
        logger.warning("step skipped: no loss term present")
        return None
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    report.grad_norm = clip_gradients(list(model.parameters()), config.clip_norm)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    report.total = None
    return report


def _batch_windows(ws: WindowSet, inputs: np.ndarray, plan) -> list[Window]:
    groups = ws.by_subject()
    out = []
    for sid, j in plan.entries:
        i = groups[sid][j]
        out.append(Window(inputs[i], sid, ws.trial_ids[i], ws.starts[i]))
    return out


@torch.no_grad()
def validation_loss(model: EncoderModel, batches: list[list[Window]], config: TrainConfig) -> float:
    """Mean joint loss over fixed validation batches with fixed masks."""
    model.eval()
    vals = []
    for b, windows in enumerate(batches):
        terms, counts = pretext_terms(model, windows, config, derive_seed(config.val_seed, b))
        try:
            vals.append(joint_loss(terms, config.weights, counts).joint)
        except NoSignalError:
            continue
    if not vals:
        raise ConfigError("validation produced no loss terms")
    return float(np.mean(vals))


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    log: list[dict]
    best_epoch: int
    stopped_epoch: int


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in rows:
        w.writerow(["" if row[c] is None else repr(row[c]) for c in LOG_COLUMNS])
    return buf.getvalue()


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def fit(model: EncoderModel, train_set: WindowSet, val_set: WindowSet, config: TrainConfig,
        input_channels: Sequence[int] | None = None, out_dir=None,
        extras: dict | None = None) -> FitResult:
    """Pretrain ``model`` with validation-loss early stopping.

    Stops after ``patience`` epochs without a validation improvement of at least
    ``min_delta``, or at ``max_epochs``. Writes ``train_log.csv``, ``best.ckpt``
    and ``last.ckpt`` into ``out_dir`` when given.
    """
    if len(train_set) == 0:
        raise ConfigError("no training windows")
    if len(val_set) == 0:
        raise ConfigError("no validation windows; early stopping needs a validation split")
    idx = list(range(train_set.values.shape[-1])) if input_channels is None else list(input_channels)
    dtype = np.float64 if next(model.parameters()).dtype == torch.float64 else np.float32
    train_inputs = np.ascontiguousarray(train_set.values[..., idx], dtype=dtype)
    val_inputs = np.ascontiguousarray(val_set.values[..., idx], dtype=dtype)
    S, W = config.subjects_per_batch, config.windows_per_subject
    val_batches = [_batch_windows(val_set, val_inputs, p)
                   for p in plan_epoch(val_set.pool(), S, W, config.val_seed, config.strict_sampler)]

    torch.manual_seed(derive_seed(config.seed, 2))
    optimizer = make_optimizer(model, config)
    extras = dict(extras or {})
    rows: list[dict] = []
    best_val, best_epoch, best_ckpt = math.inf, -1, None
    epoch = 0
    for epoch in range(config.max_epochs):
        lr = lr_at(epoch, config)
        plans = plan_epoch(train_set.pool(), S, W, derive_seed(config.seed, 3, epoch),
                           config.strict_sampler)
        reports = []
        for b, plan in enumerate(plans):
            windows = _batch_windows(train_set, train_inputs, plan)
            if config.augment:
                arng = np.random.default_rng(derive_seed(config.seed, 4, epoch, b))
                windows = [Window(_augment(w.values, arng, config).astype(dtype), w.subject_id,
                                  w.trial_id, w.start_index) for w in windows]
            rep = train_step(model, optimizer, windows, config,
                             derive_seed(config.seed, 5, epoch, b), lr)
            if rep is not None:
                reports.append(rep)
        for p in model.parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite parameters after epoch {epoch}")
        val = validation_loss(model, val_batches, config)
        rows.append({
            "epoch": epoch,
            "lc": _mean(r.lc for r in reports),
            "tc": _mean(r.tc for r in reports),
            "uicd": _mean(r.uicd for r in reports),
            "joint": _mean(r.joint for r in reports),
            "lr": lr,
            "grad_norm": _mean(r.grad_norm for r in reports),
            "val_joint": val,
        })
        logger.info("epoch %d joint=%s val=%.6f lr=%.3g", epoch, rows[-1]["joint"], val, lr)
        if val < best_val - config.min_delta:
            best_val, best_epoch = val, epoch
            best_ckpt = _snapshot(model, optimizer, epoch, best_val, extras)
        elif epoch - best_epoch >= config.patience:
            break
    last_ckpt = _snapshot(model, optimizer, epoch, best_val, extras)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.csv").write_text(format_log(rows))
        save_checkpoint(best_ckpt, out / "best.ckpt")
        save_checkpoint(last_ckpt, out / "last.ckpt")
    return FitResult(best_ckpt, last_ckpt, rows, best_epoch, epoch)


def _snapshot(model, optimizer, epoch, best_val, extras) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(model.config, state, copy.deepcopy(optimizer.state_dict()), epoch,
                      best_val, copy.deepcopy(extras))
