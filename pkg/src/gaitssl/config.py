"""Layered run configuration: defaults <- JSON file <- dotted-key flags."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .masking import SpanMaskConfig, TableOptions
from .model import EncoderConfig
from .objectives import LossWeights
from .training import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "data": {"past_len": 50, "future_len": 50, "stride": 10, "target_channels": None},
    "sampler": {"subjects_per_batch": 32, "windows_per_subject": 4, "strict": False},
    "lc": {"mask_ratio": 0.8, "seg_min": 4, "seg_max": 16},
    "tc": {"mask_ratio": 1.0, "seg_min": None, "seg_max": None},
    "uicd": {"queries": 1, "query_mask_ratio": 1.0, "max_rows": 16,
             "support_selection": "random", "tables_per_batch": 1,
             "seg_min": 4, "seg_max": 16},
    "objectives": {"lc": True, "tc": True, "uicd": True},
    "loss": {"lc": 1.0, "tc": 1.0, "uicd": 1.0},
    "model": {"embed_dim": 128, "depth": 8, "heads": 4, "dropout": 0.1, "ff_mult": 2,
              "pre_norm": True, "positional": "sinusoidal", "max_len": 512,
              "shared_head": True},
    "train": {"learning_rate": 1e-4, "weight_decay": 1e-3, "clip_norm": 1.0,
              "max_epochs": 200, "patience": 20, "schedule": "cosine", "eta_min": 0.0,
              "min_delta": 1e-6, "val_seed": 1234, "augment": False,
              "augment_scale": 0.3, "augment_warp": 0.2, "augment_offset": 0.1,
              "augment_jitter": 0.01},
    "probe": {"head": None, "max_epochs": 300, "learning_rate": 1e-2,
              "weight_decay": 1e-4, "patience": 30, "step_stride": 5},
    "eval": {"seed": 777, "subjects": "test"},
}

# keys whose default is None, with the type they take when set
_NULLABLE = {
    "data.target_channels": list,
    "tc.seg_min": int,
    "tc.seg_max": int,
    "probe.head": str,
}

_CHOICES = {
    "uicd.support_selection": ("random", "nearby"),
    "model.positional": ("sinusoidal", "learned"),
    "train.schedule": ("cosine",),
    "probe.head": ("linear", "mlp"),
    "eval.subjects": ("validation", "test"),
}


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(tree: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for p in parents:
        node = node[p]
    node[leaf] = value


_FLAT_DEFAULTS = flatten(DEFAULTS)


def _coerce(key: str, value):
    if key not in _FLAT_DEFAULTS:
        raise ConfigError(f"unknown configuration key {key!r}")
    default = _FLAT_DEFAULTS[key]
    expected = _NULLABLE.get(key, type(default))
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected boolean, got {value!r}")
    elif expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        value = float(value)
    elif expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            else:
                raise ConfigError(f"{key}: expected integer, got {value!r}")
    elif expected is list:
        if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
            raise ConfigError(f"{key}: expected list of strings, got {value!r}")
    elif not isinstance(value, expected):
        raise ConfigError(f"{key}: expected {expected.__name__}, got {value!r}")
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"{key}: must be one of {_CHOICES[key]}, got {value!r}")
    return value


@dataclass
class RunConfig:
    values: dict
    provenance: dict = field(default_factory=dict)

    def get(self, dotted: str):
        node = self.values
        for part in dotted.split("."):
            node = node[part]
        return node

    def flat(self) -> dict:
        return flatten(self.values)

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def parse_flag_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_flags(tokens: list[str]) -> dict:
    """``["--lc.mask_ratio", "0.5", "--model.depth=2"]`` -> ``{"lc.mask_ratio": 0.5, ...}``."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} needs a value")
            raw = tokens[i + 1]
            i += 2
        out[key] = parse_flag_value(raw)
    return out


def resolve_config(file=None, flags: dict | None = None, defaults: dict | None = None) -> RunConfig:
    """Merge defaults, an optional JSON file (path or dict) and flag overrides, then validate."""
    values = copy.deepcopy(defaults or DEFAULTS)
    provenance = {k: "default" for k in flatten(values)}
    if file is not None:
        if isinstance(file, dict):
            raw = file
        else:
            try:
                raw = json.loads(Path(file).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config file {file}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, v in flatten(raw).items():
            _set(values, key, _coerce(key, v))
            provenance[key] = "file"
    for key, v in (flags or {}).items():
        _set(values, key, _coerce(key, v))
        provenance[key] = "flag"
    run = RunConfig(values, provenance)
    validate(run)
    return run


def train_config(run: RunConfig) -> TrainConfig:
    g = run.get
    return TrainConfig(
        learning_rate=g("train.learning_rate"),
        weight_decay=g("train.weight_decay"),
        clip_norm=g("train.clip_norm"),
        max_epochs=g("train.max_epochs"),
        patience=g("train.patience"),
        schedule=g("train.schedule"),
        eta_min=g("train.eta_min"),
        min_delta=g("train.min_delta"),
        seed=g("seed"),
        val_seed=g("train.val_seed"),
        weights=LossWeights(g("loss.lc"), g("loss.tc"), g("loss.uicd")),
        use_lc=g("objectives.lc"),
        use_tc=g("objectives.tc"),
        use_uicd=g("objectives.uicd"),
        past_len=g("data.past_len"),
        future_len=g("data.future_len"),
        lc_mask=SpanMaskConfig(g("lc.mask_ratio"), g("lc.seg_min"), g("lc.seg_max")),
        tc_ratio=g("tc.mask_ratio"),
        tc_seg_min=g("tc.seg_min"),
        tc_seg_max=g("tc.seg_max"),
        table=TableOptions(queries=g("uicd.queries"),
                           query_mask_ratio=g("uicd.query_mask_ratio"),
                           max_rows=g("uicd.max_rows"),
                           support_selection=g("uicd.support_selection"),
                           query_seg_min=g("uicd.seg_min"),
                           query_seg_max=g("uicd.seg_max")),
        tables_per_batch=g("uicd.tables_per_batch"),
        subjects_per_batch=g("sampler.subjects_per_batch"),
        windows_per_subject=g("sampler.windows_per_subject"),
        strict_sampler=g("sampler.strict"),
        augment=g("train.augment"),
        augment_scale=g("train.augment_scale"),
        augment_warp=g("train.augment_warp"),
        augment_offset=g("train.augment_offset"),
        augment_jitter=g("train.augment_jitter"),
    )


def encoder_config(run: RunConfig, input_dim: int) -> EncoderConfig:
    g = run.get
    return EncoderConfig(
        input_dim=input_dim,
        embed_dim=g("model.embed_dim"),
        depth=g("model.depth"),
        heads=g("model.heads"),
        dropout=g("model.dropout"),
        ff_mult=g("model.ff_mult"),
        pre_norm=g("model.pre_norm"),
        positional=g("model.positional"),
        max_len=g("model.max_len"),
        max_rows=g("uicd.max_rows"),
        shared_head=g("model.shared_head"),
    )


def validate(run: RunConfig) -> None:
    """Construct every module config so constraint violations surface before any work."""
    train_config(run)
    encoder_config(run, input_dim=1)
    if run.get("data.stride") < 1:
        raise ConfigError("data.stride must be >= 1")
    for key in ("tc.seg_min", "tc.seg_max"):
        v = run.get(key)
        if v is not None and v < 1:
            raise ConfigError(f"{key} must be >= 1")
    for key in ("probe.max_epochs", "probe.patience", "probe.step_stride"):
        if run.get(key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if run.get("probe.learning_rate") <= 0:
        raise ConfigError("probe.learning_rate must be > 0")
