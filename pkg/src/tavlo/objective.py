"""Temporal multiple-instance contrastive loss and the localization map.

Per clip i and frame t, the positive response is the max cosine between
the audio vector and any visual location of the same clip and frame; the
negative response against clip j is the mean cosine over clip j's visual
locations at the same frame index. The total loss adds the symmetric
direction, whose negatives pair clip i's spatial-mean visual vector
against other clips' audio vectors.

Zero-norm vectors get cosine 0 (with a counter bump) so degenerate early
states never produce non-finite losses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, NumericalError


class _ZeroNormCounter:
    """Counts zero-norm vectors swallowed by the safe cosine."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int) -> None:
        if n:
            with self._lock:
                self._count += n

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


zero_norm_counter = _ZeroNormCounter()


def _safe_normalize(x: torch.Tensor) -> torch.Tensor:
    """Unit vectors along the last axis; zero vectors stay zero (counted)."""
    norms = x.norm(dim=-1, keepdim=True)
    zero = norms == 0
    zero_norm_counter.add(int(zero.sum()))
    return x / torch.where(zero, torch.ones_like(norms), norms)


@dataclass
class BatchRepresentations:
    """Post-attention streams: audio (B, T, D), visual (B, T, H, W, D)."""

    audio: torch.Tensor
    visual: torch.Tensor

    def __post_init__(self):
        if self.audio.ndim != 3 or self.visual.ndim != 5:
            raise InvalidInputError(
                f"need audio (B,T,D) and visual (B,T,H,W,D), got "
                f"{tuple(self.audio.shape)} and {tuple(self.visual.shape)}")
        b, t, d = self.audio.shape
        if self.visual.shape[:2] != (b, t) or self.visual.shape[-1] != d:
            raise InvalidInputError(
                f"audio {tuple(self.audio.shape)} and visual "
                f"{tuple(self.visual.shape)} disagree on B, T, or D")

    @property
    def batch_size(self) -> int:
        return self.audio.shape[0]


def _check_finite(batch: BatchRepresentations) -> None:
    for name, tensor in (("audio", batch.audio), ("visual", batch.visual)):
        flat_ok = torch.isfinite(tensor).reshape(tensor.shape[0], tensor.shape[1], -1).all(-1)
        if not flat_ok.all():
            i, t = [int(v) for v in (~flat_ok).nonzero()[0]]
            raise NumericalError(f"non-finite {name} representation at clip {i}, frame {t}")


def positive_response(a_t: torch.Tensor, v_t: torch.Tensor) -> torch.Tensor:
    """Max cosine between one audio vector (D,) and a visual grid (H, W, D)."""
    sims = (_safe_normalize(v_t) * _safe_normalize(a_t)).sum(-1)
    return sims.amax()


def negative_response(a_t: torch.Tensor, v_t_other: torch.Tensor) -> torch.Tensor:
    """Mean cosine between one audio vector and another clip's visual grid."""
    sims = (_safe_normalize(v_t_other) * _safe_normalize(a_t)).sum(-1)
    return sims.mean()


def _responses(batch: BatchRepresentations, temperature: float):
    an = _safe_normalize(batch.audio)  # (B, T, D)
    vn = _safe_normalize(batch.visual)  # (B, T, H, W, D)
    pos = torch.einsum("btd,bthwd->bthw", an, vn).amax(dim=(-2, -1))  # (B, T)
    v_mean = vn.mean(dim=(2, 3))  # (B, T, D) mean of unit vectors
    neg_a2v = torch.einsum("itd,jtd->ijt", an, v_mean)  # audio i vs visual bag j
    neg_v2a = torch.einsum("itd,jtd->ijt", v_mean, an)  # visual bag i vs audio j
    return pos / temperature, neg_a2v / temperature, neg_v2a / temperature


def _nce(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """Mean over (i, t) of log(exp(p) + sum_{j != i} exp(n_ij)) - p.

    With B = 1 the negative set is empty and this is exactly zero.
    """
    b = pos.shape[0]
    off = ~torch.eye(b, dtype=torch.bool, device=pos.device)
    stacked = [torch.cat([pos[i].unsqueeze(0), neg[i][off[i]]], dim=0) for i in range(b)]
    logits = torch.stack(stacked)  # (B, 1 + (B-1), T)
    return (torch.logsumexp(logits, dim=1) - pos).mean()


def loss_a2v(batch: BatchRepresentations, temperature: float = 1.0) -> torch.Tensor:
    """Audio-to-visual alignment loss (scalar tensor, differentiable)."""
    _check_finite(batch)
    pos, neg_a2v, _ = _responses(batch, temperature)
    return _nce(pos, neg_a2v)


def loss_v2a(batch: BatchRepresentations, temperature: float = 1.0) -> torch.Tensor:
    """Symmetric direction: clip i's visual bag against other clips' audio."""
    _check_finite(batch)
    pos, _, neg_v2a = _responses(batch, temperature)
    return _nce(pos, neg_v2a)


def loss_total(batch: BatchRepresentations, temperature: float = 1.0) -> torch.Tensor:
    """Sum of both alignment directions."""
    _check_finite(batch)
    pos, neg_a2v, neg_v2a = _responses(batch, temperature)
    return _nce(pos, neg_a2v) + _nce(pos, neg_v2a)


def localization_map(a: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Per-(t, x, y) cosine similarity.

    Accepts (T, D) with (T, H, W, D) or batched (B, T, D) with
    (B, T, H, W, D); returns (T, H, W) or (B, T, H, W) in [-1, 1].
    """
    if a.ndim == 2:
        return torch.einsum("td,thwd->thw", _safe_normalize(a), _safe_normalize(v))
    if a.ndim == 3:
        return torch.einsum("btd,bthwd->bthw", _safe_normalize(a), _safe_normalize(v))
    raise InvalidInputError(f"audio representation must be (T,D) or (B,T,D), got {tuple(a.shape)}")


def upsample_map(scores: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear upsample of (T, H, W) or (B, T, H, W) score maps."""
    squeeze = scores.ndim == 3
    if squeeze:
        scores = scores.unsqueeze(0)
    up = F.interpolate(scores, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return up.squeeze(0) if squeeze else up
