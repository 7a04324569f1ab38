"""Checkpoint serialization.

Layout (all integers little-endian)::

    b"GAITSSL-CKPT\\n"          13-byte magic
    uint64                     header length H
    H bytes                    UTF-8 JSON header, keys sorted, no whitespace
    payload                    raw tensor bytes, concatenated in header order

The header records ``format_version``, ``encoder_config``, ``epoch``,
``best_val_loss``, free-form ``extras`` (normalization statistics, data settings),
optimizer ``param_groups`` and a ``tensors`` list of ``{name, dtype, shape,
offset, nbytes}``. Model parameters are stored under ``model.<name>`` and
optimizer moments under ``optim.<param index>.<key>``. Saving the same state
twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .model import EncoderConfig, EncoderModel

MAGIC = b"GAITSSL-CKPT\n"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: EncoderConfig
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict | None = None
    epoch: int = -1
    best_val_loss: float | None = None
    extras: dict = field(default_factory=dict)

    def build_model(self) -> EncoderModel:
        model = EncoderModel(self.config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def _tensor_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        raise TypeError(f"unsupported tensor dtype {t.dtype}")
    code = _DTYPES[t.dtype]
    return code, t.numpy().astype(code, copy=False).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, torch.Tensor]] = [
        (f"model.{k}", v) for k, v in ckpt.model_state.items()]
    groups = None
    if ckpt.optimizer_state is not None:
        for idx in sorted(ckpt.optimizer_state["state"]):
            for key, val in sorted(ckpt.optimizer_state["state"][idx].items()):
                tensors.append((f"optim.{idx}.{key}", torch.as_tensor(val)))
        groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
                  for g in ckpt.optimizer_state["param_groups"]]
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        code, raw = _tensor_bytes(t)
        entries.append({"name": name, "dtype": code, "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "best_val_loss": ckpt.best_val_loss,
        "extras": ckpt.extras,
        "optimizer_param_groups": groups,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise DataError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
    base = pos + hlen
    model_state, optim_state = {}, {}
    for e in header["tensors"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        t = torch.from_numpy(arr).to(_TORCH_DTYPES[e["dtype"]])
        kind, rest = e["name"].split(".", 1)
        if kind == "model":
            model_state[rest] = t
        else:
            idx, key = rest.split(".", 1)
            optim_state.setdefault(int(idx), {})[key] = t
    optimizer_state = None
    if header["optimizer_param_groups"] is not None:
        groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()}
                  for g in header["optimizer_param_groups"]]
        optimizer_state = {"state": optim_state, "param_groups": groups}
    return Checkpoint(EncoderConfig(**header["encoder_config"]), model_state, optimizer_state,
                      header["epoch"], header["best_val_loss"], header["extras"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def parameter_hash(model: torch.nn.Module) -> str:
    """SHA-256 over parameter names, shapes and bytes."""
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(str(tuple(p.shape)).encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
