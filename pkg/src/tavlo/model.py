"""End-to-end model: encoders, positional codes, attention, similarity maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
from torch import nn

from .attention import ASTConfig, ASTEncoder, build_joint, split_output
from .encoders import (
    AudioEncoder,
    PositionalEncodings,
    VisualEncoder,
    apply_positional,
)
from .errors import ConfigError
from .objective import BatchRepresentations, localization_map, upsample_map


@dataclass
class ModelConfig:
    t_frames: int = 16
    frame_size: int = 64
    n_freq_bins: int = 128
    n_time_steps: int = 256
    feature_dim: int = 64
    temporal_dim: int = 32
    downsample_factor: int = 8
    depth: int = 3
    heads: int = 4
    ffn_hidden: int | None = None
    dropout: float = 0.1
    learned_positions: bool = False
    pos_scale: float = 0.1
    audio_hidden: int = 64
    visual_base_width: int = 16

    def __post_init__(self):
        if self.t_frames < 1:
            raise ConfigError(f"model.t_frames: must be >= 1, got {self.t_frames}")
        if self.downsample_factor < 2 or 2 ** int(math.log2(self.downsample_factor)) != self.downsample_factor:
            raise ConfigError(
                f"model.downsample_factor: must be a power of two >= 2, got {self.downsample_factor}")
        if self.frame_size % self.downsample_factor:
            raise ConfigError(
                f"model.frame_size: {self.frame_size} not divisible by "
                f"downsample_factor {self.downsample_factor}")
        if self.feature_dim % 4:
            raise ConfigError(
                f"model.feature_dim: must be divisible by 4 for the spatial "
                f"positional code, got {self.feature_dim}")
        if self.temporal_dim % 2:
            raise ConfigError(
                f"model.temporal_dim: must be even, got {self.temporal_dim}")
        if self.joint_dim % self.heads:
            raise ConfigError(
                f"model.heads: {self.heads} does not divide D = "
                f"{self.joint_dim} (feature_dim + temporal_dim)")
        if self.n_time_steps // self.t_frames < 1:
            raise ConfigError(
                f"model.n_time_steps: {self.n_time_steps} time steps cannot cover "
                f"t_frames = {self.t_frames} (audio kernel width would be 0)")
        if self.depth < 1:
            raise ConfigError(f"model.depth: must be >= 1, got {self.depth}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout: must be in [0, 1), got {self.dropout}")
        if self.pos_scale <= 0.0:
            raise ConfigError(f"model.pos_scale: must be > 0, got {self.pos_scale}")

    @property
    def joint_dim(self) -> int:
        return self.feature_dim + self.temporal_dim

    @property
    def grid_size(self) -> int:
        return self.frame_size // self.downsample_factor

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"model.{sorted(unknown)[0]}: unknown field")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class TavloModel(nn.Module):
    """Visual CNN + audio CNN -> positional codes -> AST stack -> streams."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualEncoder(
            feature_dim=cfg.feature_dim, downsample_factor=cfg.downsample_factor,
            base_width=cfg.visual_base_width)
        self.audio = AudioEncoder(
            n_freq_bins=cfg.n_freq_bins, n_time_steps=cfg.n_time_steps,
            t_frames=cfg.t_frames, feature_dim=cfg.feature_dim, hidden=cfg.audio_hidden)
        self.positions = PositionalEncodings(
            t_frames=cfg.t_frames, grid_h=cfg.grid_size, grid_w=cfg.grid_size,
            feature_dim=cfg.feature_dim, temporal_dim=cfg.temporal_dim,
            learned=cfg.learned_positions, spatial_scale=cfg.pos_scale)
        self.ast = ASTEncoder(cfg.joint_dim, ASTConfig(
            depth=cfg.depth, heads=cfg.heads, ffn_hidden=cfg.ffn_hidden,
            dropout=cfg.dropout))

    def forward(self, frames: torch.Tensor, specs: torch.Tensor) -> BatchRepresentations:
        """frames (B,T,H,W,3), specs (B,H_a,W_a) -> audio/visual streams."""
        v = self.visual(frames)
        a = self.audio(specs)
        pair = apply_positional(v, a, self.positions)
        z = self.ast(build_joint(pair))
        audio_repr, visual_repr = split_output(z, self.cfg.grid_size, self.cfg.grid_size)
        return BatchRepresentations(audio=audio_repr, visual=visual_repr)

    @torch.no_grad()
    def localization(self, frames: torch.Tensor, specs: torch.Tensor,
                     upsample: bool = True) -> torch.Tensor:
        """Cosine similarity maps (B, T, H', W'), optionally at frame size."""
        reps = self.forward(frames, specs)
        maps = localization_map(reps.audio, reps.visual)
        if upsample:
            maps = upsample_map(maps, self.cfg.frame_size, self.cfg.frame_size)
        return maps

    def spectrogram_hop(self, clip_duration: float) -> float:
        """Hop that stretches n_time_steps across the given duration."""
        return clip_duration / self.cfg.n_time_steps
