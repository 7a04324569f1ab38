"""Encoder-centric transformer with a learned mask token and row embeddings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import CapacityError, ConfigError, NumericError

OBJECTIVES = ("lc", "tc", "uicd")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    embed_dim: int = 128
    depth: int = 8
    heads: int = 4
    dropout: float = 0.1
    ff_mult: int = 2
    pre_norm: bool = True
    positional: str = "sinusoidal"
    max_len: int = 512  # only bounds the learned positional table
    max_rows: int = 16
    shared_head: bool = True

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.ff_mult < 1:
            raise ConfigError("ff_mult must be >= 1")
        if self.positional not in ("sinusoidal", "learned"):
            raise ConfigError(f"unknown positional encoding {self.positional!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_table(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe.to(dtype)


class SelfAttention(nn.Module):
    """Multi-head softmax(QK^T / sqrt(d_k)) V over all tokens, no attention mask."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)

    def forward(self, x, return_weights=False):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        out = self.attn_drop(weights) @ v
        out = self.proj(out.transpose(1, 2).reshape(B, N, C))
        return (out, weights) if return_weights else out


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, ff_mult, dropout, pre_norm):
        super().__init__()
        self.pre_norm = pre_norm
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ff_mult * dim, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        if self.pre_norm:
            x = x + self.drop(self.attn(self.norm1(x)))
            return x + self.drop(self.ff(self.norm2(x)))
        x = self.norm1(x + self.drop(self.attn(x)))
        return self.norm2(x + self.drop(self.ff(x)))


class EncoderModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.input_proj = nn.Linear(config.input_dim, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.row_embed = nn.Parameter(torch.zeros(config.max_rows, d))
        if config.positional == "learned":
            self.pos_embed = nn.Parameter(torch.zeros(config.max_len, d))
        else:
            self.pos_embed = None
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.heads, config.ff_mult, config.dropout, config.pre_norm)
            for _ in range(config.depth)
        )
        self.final_norm = nn.LayerNorm(d) if config.pre_norm else nn.Identity()
        if config.shared_head:
            self.head = nn.Linear(d, config.input_dim)
        else:
            self.obj_heads = nn.ModuleDict({k: nn.Linear(d, config.input_dim) for k in OBJECTIVES})
        # Projections start at std 0.02; a unit-amplitude sinusoidal table would
        # drown the content after the first LayerNorm, so it is scaled by 1/sqrt(d).
        self.pos_scale = 1.0 / math.sqrt(d)
        self._pe_cache: dict = {}
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for p in (self.mask_token, self.row_embed, self.pos_embed):
            if p is not None:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)

    def positions(self, length: int, like: torch.Tensor) -> torch.Tensor:
        if self.pos_embed is not None:
            if length > self.pos_embed.shape[0]:
                raise CapacityError(
                    f"window length {length} exceeds positional table {self.pos_embed.shape[0]}")
            return self.pos_embed[:length]
        key = (length, like.dtype)
        if key not in self._pe_cache:
            table = sinusoidal_table(length, self.config.embed_dim, torch.float64) * self.pos_scale
            self._pe_cache[key] = table.to(like.dtype)
        return self._pe_cache[key]

    def _content(self, x: torch.Tensor, mask) -> torch.Tensor:
        if mask is None:
            return self.input_proj(x)
        mask = torch.as_tensor(mask, dtype=torch.bool, device=x.device)
        mask = mask.expand(x.shape[:-1])
        x = x.masked_fill(mask.unsqueeze(-1), 0.0)
        return torch.where(mask.unsqueeze(-1), self.mask_token.to(x.dtype), self.input_proj(x))

    def embed_window(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(..., T, D) values and (..., T) bool mask -> (..., T, d) tokens.

        Masked positions are zeroed before projection and then replaced by the
        mask token, so their raw values cannot influence anything downstream.
        """
        return self._content(x, mask) + self.positions(x.shape[-2], x)

    def embed_table(self, rows: torch.Tensor, query_mask: torch.Tensor | None = None):
        """(..., R, T, D) table -> (..., R*T, d) tokens with per-row embeddings added."""
        R, T = rows.shape[-3], rows.shape[-2]
        if R > self.row_embed.shape[0]:
            raise CapacityError(f"table has {R} rows, row embedding holds {self.row_embed.shape[0]}")
        tokens = self.embed_window(rows, query_mask) + self.row_embed[:R].unsqueeze(-2)
        return tokens.reshape(*tokens.shape[:-3], R * T, tokens.shape[-1])

    def encode(self, tokens: torch.Tensor, check_finite: bool = True) -> torch.Tensor:
        squeeze = tokens.dim() == 2
        h = tokens.unsqueeze(0) if squeeze else tokens
        for i, block in enumerate(self.blocks):
            h = block(h)
            if check_finite and not torch.isfinite(h).all():
                raise NumericError(f"non-finite activation after encoder block {i}")
        h = self.final_norm(h)
        return h.squeeze(0) if squeeze else h

    def decode(self, hidden: torch.Tensor, objective: str = "lc") -> torch.Tensor:
        if self.config.shared_head:
            return self.head(hidden)
        return self.obj_heads[objective](hidden)

    def head_bias(self, objective: str = "lc") -> torch.Tensor:
        return (self.head if self.config.shared_head else self.obj_heads[objective]).bias

    def reconstruct(self, x, mask=None, objective="lc"):
        """Embed, encode and decode one batch of windows."""
        return self.decode(self.encode(self.embed_window(x, mask)), objective)

    def reconstruct_table(self, rows, query_mask=None):
        R, T = rows.shape[-3], rows.shape[-2]
        out = self.decode(self.encode(self.embed_table(rows, query_mask)), "uicd")
        return out.reshape(*out.shape[:-2], R, T, out.shape[-1])


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
