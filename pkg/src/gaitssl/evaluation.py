"""Held-out pretext metrics and frozen-encoder probing."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.metrics import f1_score, log_loss, roc_auc_score
from torch import nn

from .checkpoint import parameter_hash
from .data import SubjectSplit, Window, WindowSet
from .errors import DataError, DegenerateTaskError
from .masking import build_tc_mask, sample_span_mask
from .model import EncoderModel
from .training import TrainConfig, derive_seed


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task": self.task, "metrics": self.metrics, "counts": self.counts,
                "flags": self.flags}


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return None
    return float(np.clip((da @ db) / denom, -1.0, 1.0))


def r2_score(target: np.ndarray, pred: np.ndarray) -> float | None:
    target = np.asarray(target, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    sst = float(((target - target.mean()) ** 2).sum())
    if sst == 0.0:
        return None
    return 1.0 - float(((target - pred) ** 2).sum()) / sst


def pretext_masks(objective: str, n: int, config: TrainConfig, seed: int) -> np.ndarray:
    T = config.past_len + config.future_len
    rng = np.random.default_rng(derive_seed(seed, 0 if objective == "lc" else 1))
    if objective == "lc":
        return np.stack([sample_span_mask(T, config.lc_mask, rng).flags for _ in range(n)])
    if objective == "tc":
        return np.stack([build_tc_mask(config.past_len, config.future_len, config.tc_ratio, rng,
                                       config.tc_seg_min, config.tc_seg_max).dense(T)
                         for _ in range(n)])
    raise ValueError(f"unknown pretext objective {objective!r}")


@torch.no_grad()
def reconstruct_masked(model: EncoderModel, inputs: np.ndarray, masks: np.ndarray,
                       objective: str, batch_size: int = 256) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(inputs), batch_size):
        x = torch.as_tensor(inputs[i:i + batch_size], dtype=dtype)
        m = torch.from_numpy(masks[i:i + batch_size])
        out.append(model.reconstruct(x, m, objective).double().numpy())
    return np.concatenate(out) if out else np.zeros((0,) + inputs.shape[1:])


def pretext_metrics(target: np.ndarray, pred: np.ndarray, masks: np.ndarray,
                    task: str = "pretext") -> MetricReport:
    """R^2, Pearson r and MSE pooled over masked positions and all features.

    Also reports the MSE of a mean-imputation baseline that fills each masked
    step with the per-window, per-feature mean of the visible steps.
    """
    sel = masks.astype(bool)
    t, p = target[sel], pred[sel]
    report = MetricReport(task, counts={"masked_steps": int(sel.sum()),
                                        "masked_values": int(t.size)})
    report.metrics["r2"] = r2_score(t, p)
    report.metrics["pearson"] = pearson(t, p)
    for k in ("r2", "pearson"):
        if report.metrics[k] is None:
            report.flags.append(f"{k}_undefined_zero_variance")
    report.metrics["mse"] = float(((t - p) ** 2).mean()) if t.size else None
    visible = (~sel)[..., None]
    n_vis = visible.sum(axis=1)
    means = (target * visible).sum(axis=1) / np.maximum(n_vis, 1)
    baseline = np.broadcast_to(means[:, None, :], target.shape)[sel]
    report.metrics["baseline_mse"] = float(((t - baseline) ** 2).mean()) if t.size else None
    return report


def eval_pretext(model: EncoderModel, inputs: np.ndarray, objective: str, config: TrainConfig,
                 seed: int) -> MetricReport:
    """Mask held-out windows with a fixed seed, reconstruct, and score masked positions."""
    masks = pretext_masks(objective, len(inputs), config, seed)
    pred = reconstruct_masked(model, inputs, masks, objective)
    return pretext_metrics(np.asarray(inputs, dtype=np.float64), pred, masks, objective)


@torch.no_grad()
def embed_steps(model: EncoderModel, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Per-step hidden states (N, T, d) of unmasked windows."""
    model.eval()
    dtype = next(model.parameters()).dtype
    inputs = np.asarray(inputs)
    single = inputs.ndim == 2
    if single:
        inputs = inputs[None]
    out = []
    for i in range(0, len(inputs), batch_size):
        x = torch.as_tensor(inputs[i:i + batch_size], dtype=dtype)
        out.append(model.encode(model.embed_window(x)).double().numpy())
    h = np.concatenate(out) if out else np.zeros((0, inputs.shape[1], model.config.embed_dim))
    return h[0] if single else h


def embed_for_probe(model: EncoderModel, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Mean over time of the hidden states: (T, D) -> (d,) or (N, T, D) -> (N, d)."""
    return embed_steps(model, inputs, batch_size).mean(axis=-2)


@dataclass
class ProbeTask:
    name: str
    kind: str  # "classification" or "regression"
    extract: Callable[[dict, Window], object]
    head: str | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown probe task kind {self.kind!r}")
        if self.head is None:
            self.head = "linear" if self.kind == "classification" else "mlp"
        if self.head not in ("linear", "mlp"):
            raise ValueError(f"unknown probe head {self.head!r}")


def metadata_label_task(column: str, head: str | None = None) -> ProbeTask:
    """Per-subject integer label read from a metadata column."""
    return ProbeTask(column, "classification",
                     lambda meta, window: int(float(meta[column])), head)


def channel_regression_task(name: str, channel: int, head: str | None = None) -> ProbeTask:
    """Step-level regression of one (held-out) channel of the window."""
    return ProbeTask(name, "regression",
                     lambda meta, window: np.asarray(window.values[:, channel], dtype=np.float64),
                     head)


class ProbeHead(nn.Module):
    """Standardize features then a linear map or one GELU hidden layer of width ``hidden``."""

    def __init__(self, in_dim: int, out_dim: int, kind: str, hidden: int | None = None):
        super().__init__()
        self.register_buffer("mean", torch.zeros(in_dim))
        self.register_buffer("scale", torch.ones(in_dim))
        if kind == "linear":
            self.net = nn.Linear(in_dim, out_dim)
        else:
            hidden = hidden or in_dim
            self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net((x - self.mean) / self.scale)

    @torch.no_grad()
    def predict(self, x: np.ndarray) -> np.ndarray:
        self.eval()
        return self(torch.as_tensor(x, dtype=torch.float32)).double().numpy()


# inverse L2 strengths tried by the linear probe; validation loss picks one
PENALTY_GRID = tuple(10.0 ** k for k in range(-4, 3))


def _fit_linear(head: ProbeHead, train_x, train_y, val_x, val_y, task: ProbeTask,
                n_out: int, grid=PENALTY_GRID) -> ProbeHead:
    """Convex L2-penalized fit (logistic or ridge) on standardized features.

    Each strength in ``grid`` is fitted on the training rows and scored on the
    validation rows; the best fit is copied into ``head.net``.
    """
    z = lambda x: (x - head.mean.numpy()) / head.scale.numpy()  # noqa: E731
    zt, zv = z(train_x), z(val_x)
    best, best_model = math.inf, None
    for C in grid if len(zv) else (1.0,):
        if task.kind == "classification":
            model = LogisticRegression(C=C, max_iter=5000).fit(zt, train_y)
            score = (log_loss(val_y, model.predict_proba(zv), labels=model.classes_)
                     if len(zv) else 0.0)
        else:
            model = Ridge(alpha=1.0 / C).fit(zt, train_y)
            pred = model.predict(zv).reshape(val_y.shape) if len(zv) else None
            score = float(((pred - val_y) ** 2).mean()) if len(zv) else 0.0
        if score < best - 1e-12:
            best, best_model = score, model
    weight = np.zeros((n_out, zt.shape[1]))
    bias = np.zeros(n_out)
    coef = np.atleast_2d(best_model.coef_)
    intercept = np.atleast_1d(best_model.intercept_)
    if task.kind == "classification":
        classes = best_model.classes_.astype(int)
        bias[:] = -30.0  # classes never seen in training get a negligible score
        if len(classes) == 2:
            weight[classes[1]], bias[classes[1]] = coef[0], intercept[0]
            bias[classes[0]] = 0.0
        else:
            weight[classes], bias[classes] = coef, intercept
    else:
        weight, bias = coef, intercept
    with torch.no_grad():
        head.net.weight.copy_(torch.as_tensor(weight, dtype=torch.float32))
        head.net.bias.copy_(torch.as_tensor(bias, dtype=torch.float32))
    head.eval()
    return head


def train_probe(train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
                task: ProbeTask, seed: int = 0, max_epochs: int = 300, lr: float = 1e-2,
                weight_decay: float = 1e-4, patience: int = 30) -> ProbeHead:
    """Fit a probe head on frozen features with model selection on validation rows.

    Linear heads are convex L2-penalized fits whose strength is chosen by
    validation loss. MLP heads use full-batch AdamW and keep the epoch with the
    best validation loss.
    """
    train_x = np.asarray(train_x, dtype=np.float32)
    val_x = np.asarray(val_x, dtype=np.float32)
    if task.kind == "classification":
        train_y = np.asarray(train_y, dtype=np.int64)
        val_y = np.asarray(val_y, dtype=np.int64)
        if len(np.unique(train_y)) < 2:
            raise DegenerateTaskError(f"task {task.name}: training labels have a single class")
        n_out = task.num_classes or int(max(train_y.max(), val_y.max(initial=0)) + 1)
        loss_fn = nn.CrossEntropyLoss()
    else:
        train_y = np.asarray(train_y, dtype=np.float32).reshape(len(train_x), -1)
        val_y = np.asarray(val_y, dtype=np.float32).reshape(len(val_x), -1)
        n_out = train_y.shape[1]
        loss_fn = nn.MSELoss()
    torch.manual_seed(derive_seed(seed, 11))
    head = ProbeHead(train_x.shape[1], n_out, task.head)
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    head.mean.copy_(torch.from_numpy(mu))
    head.scale.copy_(torch.from_numpy(np.where(sd > 1e-8, sd, 1.0).astype(np.float32)))
    if task.head == "linear":
        return _fit_linear(head, train_x, train_y, val_x, val_y, task, n_out)
    xt, yt = torch.from_numpy(train_x), torch.from_numpy(train_y)
    xv, yv = torch.from_numpy(val_x), torch.from_numpy(val_y)
    opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=weight_decay)
    best, best_state, stale = math.inf, copy.deepcopy(head.state_dict()), 0
    for _ in range(max_epochs):
        head.train()
        opt.zero_grad()
        loss_fn(head(xt), yt).backward()
        opt.step()
        if len(xv) == 0:
            best_state = copy.deepcopy(head.state_dict())
            continue
        head.eval()
        with torch.no_grad():
            v = float(loss_fn(head(xv), yv))
        if v < best - 1e-7:
            best, best_state, stale = v, copy.deepcopy(head.state_dict()), 0
        else:
            stale += 1
            if stale >= patience:
                break
    head.load_state_dict(best_state)
    head.eval()
    return head


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def compute_metrics(predictions: np.ndarray, targets: np.ndarray, kind: str,
                    task: str = "task", num_classes: int | None = None) -> MetricReport:
    """Classification: macro-F1 at argmax and AUC from class scores (N, C) or positive
    scores (N,). Regression: Pearson, MSE, RMSE and R^2 over all values."""
    report = MetricReport(task, counts={"n": int(len(targets))})
    if len(targets) == 0:
        raise DataError("no predictions to score")
    if kind == "classification":
        y = np.asarray(targets).astype(int)
        scores = np.asarray(predictions, dtype=np.float64)
        if scores.ndim == 1:
            scores = np.stack([1.0 - scores, scores], axis=1)
        C = num_classes or scores.shape[1]
        report.metrics["f1"] = float(f1_score(y, scores.argmax(axis=1), labels=np.arange(C),
                                              average="macro", zero_division=0))
        present = np.unique(y)
        if len(present) < C:
            report.metrics["auc"] = None
            report.flags.append("auc_undefined_missing_class")
        elif C == 2:
            report.metrics["auc"] = float(roc_auc_score(y, scores[:, 1]))
        else:
            probs = scores if np.allclose(scores.sum(axis=1), 1.0) else softmax(scores)
            report.metrics["auc"] = float(roc_auc_score(y, probs, multi_class="ovr",
                                                        average="macro", labels=np.arange(C)))
    elif kind == "regression":
        t = np.asarray(targets, dtype=np.float64).ravel()
        p = np.asarray(predictions, dtype=np.float64).ravel()
        mse = float(((t - p) ** 2).mean())
        report.metrics.update(pearson=pearson(t, p), mse=mse, rmse=math.sqrt(mse),
                              r2=r2_score(t, p))
        for k in ("pearson", "r2"):
            if report.metrics[k] is None:
                report.flags.append(f"{k}_undefined_zero_variance")
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return report


@dataclass
class ProbeResult:
    report: MetricReport
    predictions: list[dict]
    head: ProbeHead


def _targets(task: ProbeTask, ws: WindowSet, metadata: dict[str, dict]):
    out = []
    for i in range(len(ws)):
        sid = ws.subject_ids[i]
        if task.kind == "classification" and sid not in metadata:
            raise DataError(f"no metadata for subject {sid!r}")
        out.append(task.extract(metadata.get(sid, {}), ws.window(i)))
    return np.asarray(out)


def audit_subjects(ws: WindowSet, allowed: frozenset[str], what: str) -> None:
    leaked = sorted(set(ws.subject_ids) - set(allowed))
    if leaked:
        raise DataError(f"{what} contains windows from disallowed subjects {leaked}")


def run_probe(model: EncoderModel, splits: dict[str, WindowSet], split: SubjectSplit,
              input_channels: Sequence[int], metadata: dict[str, dict], task: ProbeTask,
              seed: int = 0, eval_on: str = "test", step_stride: int = 5,
              **probe_kwargs) -> ProbeResult:
    """Train a probe head on frozen training-subject embeddings and score held-out subjects.

    Classification uses mean-pooled window embeddings; window scores are averaged
    per subject for the headline metrics (``window_*`` metrics are also given).
    Regression maps per-step hidden states to the target channel at that step.
    """
    train, val, held = splits["train"], splits["validation"], splits[eval_on]
    audit_subjects(train, split.train, "probe training data")
    audit_subjects(val, split.validation, "probe validation data")
    before = parameter_hash(model)
    idx = list(input_channels)

    def features(ws):
        steps = embed_steps(model, ws.values[..., idx])
        if task.kind == "classification":
            return steps.mean(axis=1)
        return steps[:, ::step_stride, :]

    ys = {name: _targets(task, ws, metadata) for name, ws in
          (("train", train), ("val", val), ("held", held))}
    xs = {"train": features(train), "val": features(val), "held": features(held)}
    if task.kind == "regression":
        for k in xs:
            ys[k] = ys[k][:, ::step_stride]
            xs[k] = xs[k].reshape(-1, xs[k].shape[-1])
            ys[k] = ys[k].reshape(-1)
    head = train_probe(xs["train"], ys["train"], xs["val"], ys["val"], task, seed,
                       **probe_kwargs)
    raw = head.predict(xs["held"])
    rows = []
    if task.kind == "classification":
        probs = softmax(raw)
        C = probs.shape[1]
        window_rep = compute_metrics(probs, ys["held"], "classification", task.name, C)
        subjects = sorted(set(held.subject_ids))
        subj_idx = {s: [i for i, x in enumerate(held.subject_ids) if x == s] for s in subjects}
        subj_probs = np.stack([probs[subj_idx[s]].mean(axis=0) for s in subjects])
        subj_y = np.array([ys["held"][subj_idx[s][0]] for s in subjects])
        report = compute_metrics(subj_probs, subj_y, "classification", task.name, C)
        report.metrics.update({f"window_{k}": v for k, v in window_rep.metrics.items()})
        report.flags += [f"window_{f}" for f in window_rep.flags]
        report.counts = {"subjects": len(subjects), "windows": len(held)}
        for i, wid in enumerate(held.window_ids()):
            row = {"window_id": wid, "subject_id": held.subject_ids[i],
                   "target": int(ys["held"][i])}
            row.update({f"score_{c}": float(probs[i, c]) for c in range(C)})
            rows.append(row)
    else:
        pred = raw.ravel()
        report = compute_metrics(pred, ys["held"], "regression", task.name)
        report.counts = {"windows": len(held), "steps": int(len(pred))}
        T_sub = len(range(0, held.values.shape[1], step_stride)) if len(held) else 0
        for i, wid in enumerate(held.window_ids()):
            for j in range(T_sub):
                k = i * T_sub + j
                rows.append({"window_id": wid, "subject_id": held.subject_ids[i],
                             "t": j * step_stride, "target": float(ys["held"][k]),
                             "prediction": float(pred[k])})
    if parameter_hash(model) != before:
        raise RuntimeError("encoder parameters changed during probing")
    return ProbeResult(report, rows, head)
