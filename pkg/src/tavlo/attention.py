"""Factorized audio-spatial-temporal attention.

State layout is (B, T, 1 + H*W, D): token 0 of every row is the audio
token, tokens 1.. are the row-major flattened visual grid. Each layer
runs pre-norm self-attention plus FFN over the token axis (per frame),
transposes, and repeats the same pair along the time axis (per token).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .encoders import EncodedPair
from .errors import ConfigError, NumericalError


@dataclass
class ASTConfig:
    depth: int = 3
    heads: int = 4
    ffn_hidden: int | None = None  # defaults to 4 * dim
    dropout: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"ast_attention.depth: must be >= 1, got {self.depth}")
        if self.heads < 1:
            raise ConfigError(f"ast_attention.heads: must be >= 1, got {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"ast_attention.dropout: must be in [0, 1), got {self.dropout}")


def _near_zero_(module: nn.Linear, std: float = 1e-3) -> None:
    # Residual branches start near identity, which keeps tiny-scale
    # optimization from thrashing in the first steps.
    nn.init.normal_(module.weight, std=std)
    nn.init.zeros_(module.bias)


class MultiHeadSelfAttention(nn.Module):
    """Standard softmax attention over the second-to-last axis."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"ast_attention.heads: {heads} does not divide dim {dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        _near_zero_(self.out)

    def attention_probs(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax weights (batch..., heads, N, N) without dropout."""
        q, k, _ = self._project(x)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def _project(self, x: torch.Tensor):
        qkv = self.qkv(x)
        shape = x.shape[:-1] + (self.heads, 3 * self.head_dim)
        qkv = qkv.view(shape).transpose(-3, -2)
        return qkv.chunk(3, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self._project(x)
        probs = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        y = self.drop(probs) @ v
        y = y.transpose(-3, -2).reshape(x.shape)
        return self.drop(self.out(y))


class AxialTransformerLayer(nn.Module):
    """Pre-norm MSA + FFN with residuals, mixing only the second-to-last axis."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.msa = MultiHeadSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_hidden, dim),
            nn.Dropout(dropout),
        )
        _near_zero_(self.ffn[3])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.msa(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def spatial_attention(z: torch.Tensor, layer: AxialTransformerLayer) -> torch.Tensor:
    """Mix tokens within each frame, then hand back a time-major transpose.

    (B, T, N, D) in, (B, N, T, D) out, ready for the temporal stage.
    """
    return layer(z).transpose(1, 2)


def temporal_attention(y: torch.Tensor, layer: AxialTransformerLayer) -> torch.Tensor:
    """Mix frames within each token column; transpose back to (B, T, N, D)."""
    return layer(y).transpose(1, 2)


class ASTLayer(nn.Module):
    def __init__(self, dim: int, cfg: ASTConfig):
        super().__init__()
        hidden = cfg.ffn_hidden or 4 * dim
        self.spatial = AxialTransformerLayer(dim, cfg.heads, hidden, cfg.dropout)
        self.temporal = AxialTransformerLayer(dim, cfg.heads, hidden, cfg.dropout)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return temporal_attention(spatial_attention(z, self.spatial), self.temporal)


class ASTEncoder(nn.Module):
    """Depth-L stack of spatial-then-temporal attention layers."""

    def __init__(self, dim: int, cfg: ASTConfig | None = None):
        super().__init__()
        cfg = cfg or ASTConfig()
        if dim % cfg.heads:
            raise ConfigError(f"ast_attention.heads: {cfg.heads} does not divide dim {dim}")
        self.cfg = cfg
        self.dim = dim
        self.layers = nn.ModuleList(ASTLayer(dim, cfg) for _ in range(cfg.depth))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[-1] != self.dim:
            raise ConfigError(
                f"ast_attention.dim: expected (B, T, N, {self.dim}), got {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise NumericalError("non-finite values in the attention input")
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if not torch.isfinite(z).all():
                raise NumericalError(f"non-finite values after attention layer {i}")
        return z


def build_joint(pair: EncodedPair) -> torch.Tensor:
    """Stack the audio token in front of the flattened visual grid.

    (B, T, H, W, D) + (B, T, D) -> (B, T, 1 + H*W, D), row-major flatten.
    """
    b, t, h, w, d = pair.v_tilde.shape
    visual = pair.v_tilde.reshape(b, t, h * w, d)
    return torch.cat([pair.a_tilde.unsqueeze(2), visual], dim=2)


def split_output(z: torch.Tensor, grid_h: int, grid_w: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Undo build_joint: (B,T,D) audio tokens and (B,T,H,W,D) visual grid."""
    b, t, n, d = z.shape
    if n != 1 + grid_h * grid_w:
        raise ConfigError(
            f"ast_attention.grid: {n} tokens cannot unflatten to 1 + {grid_h}x{grid_w}")
    audio = z[:, :, 0, :]
    visual = z[:, :, 1:, :].reshape(b, t, grid_h, grid_w, d)
    return audio, visual
