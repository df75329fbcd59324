"""Time-aligned audio and visual encoders plus positional encodings.

The visual encoder applies one shared 2D CNN to every frame. The audio
encoder's first convolution spans the full frequency axis with a kernel
width of floor(W_a / T) and the same horizontal stride, so each output
step covers exactly the spectrogram span of one video frame; trailing
columns that do not fill a whole step are discarded.

Tensors are batch-first and channels-last at the module boundaries:
frames (B, T, H, W, 3), spectrograms (B, H_a, W_a), features
(B, T, H', W', D_f) and (B, T, D_f).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, InvalidInputError
from .ingest import FrameSequence, Spectrogram


def audio_kernel_dims(n_time_steps: int, n_freq_bins: int, t_frames: int) -> tuple[int, int]:
    """Rectangular first-layer kernel (width, height) for a W_a x H_a input.

    Width is floor(W_a / T); height always spans every frequency bin.
    """
    if t_frames < 1:
        raise InvalidInputError(f"t_frames must be >= 1, got {t_frames}")
    k_w = n_time_steps // t_frames
    if k_w < 1:
        raise InvalidInputError(
            f"spectrogram has {n_time_steps} time steps for {t_frames} frames; "
            "kernel width would be 0 (use a smaller hop)")
    return k_w, n_freq_bins


class VisualEncoder(nn.Module):
    """Stack of stride-2 conv stages shared across time.

    downsample_factor must be a power of two; each factor of 2 is one
    conv stage. A 1x1 projection maps the last stage to feature_dim.

    Convs pad circularly, so the trunk is translation-equivariant on the
    torus and no grid cell acquires an identity from border effects; the
    only absolute-position signal downstream is the explicit additive
    code in PositionalEncodings. Zero padding instead hands the border
    cells a clip-independent signature that a contrastive objective can
    rank cells by without ever reading the content.
    """

    def __init__(self, feature_dim: int = 64, downsample_factor: int = 16,
                 in_channels: int = 3, base_width: int = 16):
        super().__init__()
        n_stages = int(math.log2(downsample_factor))
        if 2 ** n_stages != downsample_factor or n_stages < 1:
            raise ConfigError(
                f"model.downsample_factor: must be a power of two >= 2, got {downsample_factor}")
        self.feature_dim = feature_dim
        self.downsample_factor = downsample_factor
        stages = []
        ch_in = in_channels
        for i in range(n_stages):
            ch_out = min(base_width * (2 ** i), 64)
            stages.append(nn.Conv2d(ch_in, ch_out, kernel_size=3, stride=2, padding=1,
                                    padding_mode="circular"))
            stages.append(nn.GroupNorm(min(8, ch_out), ch_out))
            stages.append(nn.ReLU(inplace=True))
            ch_in = ch_out
        self.stages = nn.Sequential(*stages)
        self.project = nn.Conv2d(ch_in, feature_dim, kernel_size=1)

    @classmethod
    def paper_geometry(cls, feature_dim: int = 64) -> "VisualEncoder":
        """Factor-32 preset matching a deep-residual-backbone output grid."""
        return cls(feature_dim=feature_dim, downsample_factor=32)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim != 5 or frames.shape[-1] != 3:
            raise InvalidInputError(f"expected (B, T, H, W, 3) frames, got {tuple(frames.shape)}")
        b, t, h, w, _ = frames.shape
        if h % self.downsample_factor or w % self.downsample_factor:
            raise ConfigError(
                f"model.downsample_factor: frame size {h}x{w} not divisible by "
                f"{self.downsample_factor}")
        x = frames.reshape(b * t, h, w, 3).permute(0, 3, 1, 2)
        x = self.project(self.stages(x))
        x = x.permute(0, 2, 3, 1)
        return x.reshape(b, t, x.shape[1], x.shape[2], self.feature_dim)


class AudioEncoder(nn.Module):
    """Full-height rectangular stem, then temporal convs at stride 1.

    Geometry (n_freq_bins, n_time_steps, t_frames) is fixed at build
    time because the stem kernel width is floor(n_time_steps / t_frames).
    Temporal convs use replicate padding so a constant-in-time input
    yields constant-in-time features exactly.

    Inputs are rescaled by a fixed elementwise affine chosen so the
    log-magnitude silence floor maps to 0 and tone peaks land near 1;
    being elementwise and constant, it cannot leak information across
    time steps.
    """

    INPUT_SHIFT = 23.025850929940457  # -log(1e-10), the silence floor
    INPUT_SCALE = 1.0 / 23.025850929940457

    def __init__(self, n_freq_bins: int = 128, n_time_steps: int = 256,
                 t_frames: int = 16, feature_dim: int = 64, hidden: int = 64):
        super().__init__()
        k_w, k_h = audio_kernel_dims(n_time_steps, n_freq_bins, t_frames)
        self.kernel_width = k_w
        self.n_freq_bins = n_freq_bins
        self.t_frames = t_frames
        self.feature_dim = feature_dim
        self.stem = nn.Conv2d(1, hidden, kernel_size=(k_h, k_w), stride=(1, k_w))
        self.temporal = nn.Sequential(
            nn.GroupNorm(min(8, hidden), hidden),
            nn.ReLU(inplace=True),
            nn.Conv1d(hidden, hidden, kernel_size=3, padding=1, padding_mode="replicate"),
            nn.GroupNorm(min(8, hidden), hidden),
            nn.ReLU(inplace=True),
            nn.Conv1d(hidden, hidden, kernel_size=3, padding=1, padding_mode="replicate"),
            nn.GroupNorm(min(8, hidden), hidden),
            nn.ReLU(inplace=True),
            nn.Conv1d(hidden, feature_dim, kernel_size=1),
        )

    def _check_and_trim(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.ndim != 3:
            raise InvalidInputError(f"expected (B, H_a, W_a) spectrograms, got {tuple(spec.shape)}")
        b, h_a, w_a = spec.shape
        if h_a != self.n_freq_bins:
            raise InvalidInputError(f"expected {self.n_freq_bins} frequency bins, got {h_a}")
        needed = self.t_frames * self.kernel_width
        if w_a < needed:
            raise InvalidInputError(
                f"spectrogram has {w_a} time steps, needs >= {needed} for T={self.t_frames}")
        return spec[:, :, :needed]

    def stem_output(self, spec: torch.Tensor) -> torch.Tensor:
        """First-layer activations (B, T, hidden), before any temporal mixing."""
        x = self._rescale(self._check_and_trim(spec)).unsqueeze(1)
        return self.stem(x).squeeze(2).transpose(1, 2)

    def _rescale(self, spec: torch.Tensor) -> torch.Tensor:
        return (spec + self.INPUT_SHIFT) * self.INPUT_SCALE

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        x = self._rescale(self._check_and_trim(spec)).unsqueeze(1)
        x = self.stem(x).squeeze(2)
        x = self.temporal(x)
        return x.transpose(1, 2)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic sin/cos table of shape (length, dim)."""
    if dim % 2:
        raise ConfigError(f"model.temporal_dim: sinusoidal dims must be even, got {dim}")
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table


def spatial_sinusoidal_positions(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """2D positional table (h, w, dim): first half encodes x, second half y."""
    if dim % 4:
        raise ConfigError(f"model.feature_dim: spatial sinusoidal dims need dim % 4 == 0, got {dim}")
    half = dim // 2
    x_tab = sinusoidal_positions(w, half, dtype=dtype)
    y_tab = sinusoidal_positions(h, half, dtype=dtype)
    out = torch.zeros(h, w, dim, dtype=dtype)
    out[:, :, :half] = x_tab.unsqueeze(0)
    out[:, :, half:] = y_tab.unsqueeze(1)
    return out


class PositionalEncodings(nn.Module):
    """Spatial code added to visual features, temporal code concatenated to both.

    The spatial code is constant over time; the temporal code is shared
    verbatim between the audio and visual streams. With learned=True the
    sinusoidal tables become trainable initializations.

    spatial_scale damps only the additive spatial table. At unit scale the
    table's per-cell norm rivals the content features, and the contrastive
    objective can rank cells by position alone; a small scale keeps position
    a tiebreaker. The temporal code owns its channels (concatenated, not
    added), so it is never damped.
    """

    def __init__(self, t_frames: int, grid_h: int, grid_w: int,
                 feature_dim: int, temporal_dim: int, learned: bool = False,
                 spatial_scale: float = 1.0):
        super().__init__()
        self.t_frames = t_frames
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.feature_dim = feature_dim
        self.temporal_dim = temporal_dim
        pos_s = spatial_scale * spatial_sinusoidal_positions(grid_h, grid_w, feature_dim)
        pos_t = sinusoidal_positions(t_frames, temporal_dim)
        if learned:
            self.pos_s = nn.Parameter(pos_s)
            self.pos_t = nn.Parameter(pos_t)
        else:
            self.register_buffer("pos_s", pos_s)
            self.register_buffer("pos_t", pos_t)


@dataclass
class EncodedPair:
    """Positional-encoded streams: v_tilde (B,T,H,W,D), a_tilde (B,T,D)."""

    v_tilde: torch.Tensor
    a_tilde: torch.Tensor

    @property
    def dim(self) -> int:
        return self.a_tilde.shape[-1]


def apply_positional(v: torch.Tensor, a: torch.Tensor,
                     pos: PositionalEncodings) -> EncodedPair:
    """Add the spatial code to v, then concatenate the shared temporal code.

    Output feature size is feature_dim + temporal_dim on both streams.
    """
    b, t, h, w, d_f = v.shape
    if a.shape != (b, t, d_f):
        raise ConfigError(
            f"model.feature_dim: audio features {tuple(a.shape)} do not match "
            f"visual features {tuple(v.shape)}")
    if (h, w) != (pos.grid_h, pos.grid_w) or d_f != pos.feature_dim or t != pos.t_frames:
        raise ConfigError(
            f"model.feature_dim: positional tables built for grid "
            f"({pos.t_frames},{pos.grid_h},{pos.grid_w},{pos.feature_dim}), "
            f"got features ({t},{h},{w},{d_f})")
    pos_s = pos.pos_s.to(v.dtype)
    pos_t = pos.pos_t.to(v.dtype)
    v_spatial = v + pos_s
    v_time = pos_t.view(1, t, 1, 1, -1).expand(b, t, h, w, pos.temporal_dim)
    v_tilde = torch.cat([v_spatial, v_time], dim=-1)
    a_tilde = torch.cat([a, pos_t.unsqueeze(0).expand(b, t, -1)], dim=-1)
    return EncodedPair(v_tilde=v_tilde, a_tilde=a_tilde)


def encode_visual(fs: FrameSequence, encoder: VisualEncoder) -> torch.Tensor:
    """Run one unbatched FrameSequence through the encoder: (T, H', W', D_f)."""
    frames = torch.from_numpy(fs.frames).to(torch.float32).unsqueeze(0)
    return encoder(frames).squeeze(0)


def encode_audio(spec: Spectrogram, encoder: AudioEncoder) -> torch.Tensor:
    """Run one unbatched Spectrogram through the encoder: (T, D_f)."""
    values = torch.from_numpy(spec.values).to(torch.float32).unsqueeze(0)
    return encoder(values).squeeze(0)
