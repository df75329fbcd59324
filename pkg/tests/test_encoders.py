"""Encoder geometry, time alignment, and positional-code layout."""

import math

import numpy as np
import pytest
import torch

from tavlo.encoders import (
    AudioEncoder,
    PositionalEncodings,
    VisualEncoder,
    apply_positional,
    audio_kernel_dims,
    encode_audio,
    encode_visual,
    sinusoidal_positions,
    spatial_sinusoidal_positions,
)
from tavlo.errors import ConfigError, InvalidInputError
from tavlo.ingest import FrameSequence, Spectrogram

SILENCE = math.log(1e-10)


def _rand_spec(rng, b, bins, steps):
    # roughly the range of log magnitudes the pipeline produces
    return torch.from_numpy(rng.uniform(SILENCE, 3.0, size=(b, bins, steps))).float()


# ---------------------------------------------------------------------------
# Kernel geometry
# ---------------------------------------------------------------------------

def test_audio_kernel_dims_pins():
    assert audio_kernel_dims(1024, 128, 64) == (16, 128)
    assert audio_kernel_dims(1000, 128, 64) == (15, 128)
    assert audio_kernel_dims(256, 128, 16) == (16, 128)
    assert audio_kernel_dims(7, 5, 7) == (1, 5)
    with pytest.raises(InvalidInputError, match="kernel width would be 0"):
        audio_kernel_dims(63, 128, 64)
    with pytest.raises(InvalidInputError, match="t_frames"):
        audio_kernel_dims(64, 128, 0)


def test_audio_kernel_law_random():
    rng = np.random.default_rng(7)
    for _ in range(200):
        t = int(rng.integers(1, 64))
        w_a = int(rng.integers(1, 2048))
        bins = int(rng.integers(1, 256))
        if w_a // t < 1:
            with pytest.raises(InvalidInputError):
                audio_kernel_dims(w_a, bins, t)
        else:
            k_w, k_h = audio_kernel_dims(w_a, bins, t)
            assert k_w == w_a // t
            assert k_h == bins
            # stride == width: T steps consume T * k_w columns, never more
            assert t * k_w <= w_a < t * (k_w + 1)


# ---------------------------------------------------------------------------
# Visual encoder
# ---------------------------------------------------------------------------

def test_visual_output_grid():
    torch.manual_seed(0)
    frames = torch.rand(2, 8, 64, 64, 3)
    assert VisualEncoder(feature_dim=64, downsample_factor=16)(frames).shape == (2, 8, 4, 4, 64)
    assert VisualEncoder(feature_dim=32, downsample_factor=8)(frames).shape == (2, 8, 8, 8, 32)
    assert VisualEncoder.paper_geometry(feature_dim=16)(frames).shape == (2, 8, 2, 2, 16)


def test_visual_rejects_bad_inputs():
    enc = VisualEncoder(downsample_factor=16)
    with pytest.raises(InvalidInputError, match="B, T, H, W, 3"):
        enc(torch.rand(2, 64, 64, 3))
    with pytest.raises(ConfigError, match="model.downsample_factor"):
        enc(torch.rand(1, 2, 60, 60, 3))
    with pytest.raises(ConfigError, match="model.downsample_factor"):
        VisualEncoder(downsample_factor=12)


def test_visual_is_per_frame():
    # one shared CNN per frame: permuting time permutes features, nothing else
    torch.manual_seed(1)
    enc = VisualEncoder(feature_dim=16, downsample_factor=8).eval()
    frames = torch.rand(2, 6, 32, 32, 3)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    with torch.no_grad():
        out = enc(frames)
        out_perm = enc(frames[:, perm])
    assert torch.equal(out_perm, out[:, perm])


def test_visual_constant_clip_gives_constant_features():
    torch.manual_seed(2)
    enc = VisualEncoder(feature_dim=16, downsample_factor=8).eval()
    frames = torch.rand(1, 1, 32, 32, 3).expand(1, 5, 32, 32, 3)
    with torch.no_grad():
        out = enc(frames)
    assert torch.equal(out, out[:, :1].expand_as(out))


# ---------------------------------------------------------------------------
# Audio encoder
# ---------------------------------------------------------------------------

def test_audio_output_shape_and_trailing_trim():
    torch.manual_seed(3)
    rng = np.random.default_rng(3)
    enc = AudioEncoder(n_freq_bins=32, n_time_steps=64, t_frames=8,
                       feature_dim=16, hidden=16).eval()
    spec = _rand_spec(rng, 2, 32, 70)
    with torch.no_grad():
        full = enc(spec)
        trimmed = enc(spec[:, :, :64])
    assert full.shape == (2, 8, 16)
    assert torch.equal(full, trimmed)
    with pytest.raises(InvalidInputError, match="needs >="):
        enc(spec[:, :, :63])
    with pytest.raises(InvalidInputError, match="frequency bins"):
        enc(spec[:, :31, :])
    with pytest.raises(InvalidInputError, match="B, H_a, W_a"):
        enc(spec[0])


def test_audio_silence_floor_rescales_to_zero():
    enc = AudioEncoder(n_freq_bins=8, n_time_steps=8, t_frames=2, hidden=8)
    silence = torch.full((1, 8, 8), SILENCE, dtype=torch.float64)
    assert torch.equal(enc._rescale(silence), torch.zeros_like(silence))
    assert enc.INPUT_SCALE * enc.INPUT_SHIFT == pytest.approx(1.0, abs=1e-15)


def test_audio_constant_input_gives_constant_steps():
    # replicate padding keeps a time-constant spectrogram time-constant
    torch.manual_seed(4)
    enc = AudioEncoder(n_freq_bins=16, n_time_steps=48, t_frames=6,
                       feature_dim=12, hidden=16).eval()
    spec = torch.full((2, 16, 48), -4.0)
    with torch.no_grad():
        out = enc(spec)
    assert torch.equal(out, out[:, :1].expand_as(out))


def test_audio_stem_sees_one_frame_window():
    # stride equals kernel width, so step t reads exactly columns
    # [t*k_w, (t+1)*k_w) and nothing else
    torch.manual_seed(5)
    rng = np.random.default_rng(5)
    enc = AudioEncoder(n_freq_bins=16, n_time_steps=40, t_frames=5,
                       feature_dim=12, hidden=16).eval()
    spec = _rand_spec(rng, 1, 16, 40)
    with torch.no_grad():
        base = enc.stem_output(spec)
        assert base.shape == (1, 5, 16)
        for step in range(5):
            bumped = spec.clone()
            bumped[:, :, step * 8:(step + 1) * 8] += torch.from_numpy(
                rng.uniform(0.5, 1.0, size=(1, 16, 8))).float()
            out = enc.stem_output(bumped)
            changed = (out != base).any(dim=-1)[0]
            assert changed[step]
            assert not changed[torch.arange(5) != step].any()


def test_audio_forward_mixes_time():
    # after the temporal stack a local bump is no longer local
    torch.manual_seed(6)
    rng = np.random.default_rng(6)
    enc = AudioEncoder(n_freq_bins=16, n_time_steps=40, t_frames=5,
                       feature_dim=12, hidden=16).eval()
    spec = _rand_spec(rng, 1, 16, 40)
    bumped = spec.clone()
    bumped[:, :, 16:24] += 1.0
    with torch.no_grad():
        delta = (enc(bumped) - enc(spec)).abs().amax(dim=-1)[0]
    assert delta[2] > 0
    assert (delta[torch.arange(5) != 2] > 0).any()


# ---------------------------------------------------------------------------
# Positional encodings
# ---------------------------------------------------------------------------

def test_sinusoidal_table_values():
    table = sinusoidal_positions(10, 8, dtype=torch.float64)
    assert table.shape == (10, 8)
    assert torch.equal(table[0, 0::2], torch.zeros(4, dtype=torch.float64))
    assert torch.equal(table[0, 1::2], torch.ones(4, dtype=torch.float64))
    for pos in (1, 5, 9):
        for pair in range(4):
            freq = math.exp(-math.log(10000.0) * (2 * pair) / 8)
            assert table[pos, 2 * pair] == pytest.approx(math.sin(pos * freq), abs=1e-12)
            assert table[pos, 2 * pair + 1] == pytest.approx(math.cos(pos * freq), abs=1e-12)
    with pytest.raises(ConfigError, match="even"):
        sinusoidal_positions(4, 7)


def test_spatial_table_is_x_then_y():
    table = spatial_sinusoidal_positions(3, 5, 8)
    x_tab = sinusoidal_positions(5, 4)
    y_tab = sinusoidal_positions(3, 4)
    for y in range(3):
        for x in range(5):
            assert torch.equal(table[y, x, :4], x_tab[x])
            assert torch.equal(table[y, x, 4:], y_tab[y])
    with pytest.raises(ConfigError, match="dim % 4"):
        spatial_sinusoidal_positions(3, 5, 6)


def test_apply_positional_layout():
    torch.manual_seed(7)
    pos = PositionalEncodings(t_frames=3, grid_h=2, grid_w=2,
                              feature_dim=8, temporal_dim=4)
    v = torch.rand(2, 3, 2, 2, 8)
    a = torch.rand(2, 3, 8)
    pair = apply_positional(v, a, pos)
    assert pair.v_tilde.shape == (2, 3, 2, 2, 12)
    assert pair.a_tilde.shape == (2, 3, 12)
    assert pair.dim == 12
    assert torch.equal(pair.v_tilde[..., :8], v + pos.pos_s)
    assert torch.equal(pair.a_tilde[..., :8], a)
    for t in range(3):
        assert torch.equal(pair.a_tilde[:, t, 8:],
                           pos.pos_t[t].expand(2, 4))
        # the temporal code is shared verbatim between the two streams
        assert torch.equal(pair.v_tilde[:, t, :, :, 8:],
                           pos.pos_t[t].expand(2, 2, 2, 4))


def test_apply_positional_rejects_mismatches():
    pos = PositionalEncodings(t_frames=3, grid_h=2, grid_w=2,
                              feature_dim=8, temporal_dim=4)
    v = torch.rand(1, 3, 2, 2, 8)
    with pytest.raises(ConfigError, match="model.feature_dim"):
        apply_positional(v, torch.rand(1, 3, 4), pos)
    with pytest.raises(ConfigError, match="positional tables"):
        apply_positional(torch.rand(1, 4, 2, 2, 8), torch.rand(1, 4, 8), pos)


def test_learned_positions_are_trainable():
    fixed = PositionalEncodings(2, 2, 2, 8, 4, learned=False)
    learned = PositionalEncodings(2, 2, 2, 8, 4, learned=True)
    assert len(list(fixed.parameters())) == 0
    names = {name for name, _ in learned.named_parameters()}
    assert names == {"pos_s", "pos_t"}
    assert torch.equal(fixed.pos_s, learned.pos_s.detach())
    assert torch.equal(fixed.pos_t, learned.pos_t.detach())


# ---------------------------------------------------------------------------
# Unbatched helpers and numerics
# ---------------------------------------------------------------------------

def test_encode_helpers_match_batched_forward():
    torch.manual_seed(8)
    rng = np.random.default_rng(8)
    venc = VisualEncoder(feature_dim=16, downsample_factor=8).eval()
    aenc = AudioEncoder(n_freq_bins=16, n_time_steps=32, t_frames=4,
                        feature_dim=16, hidden=16).eval()
    frames = rng.random((4, 32, 32, 3))
    spec_values = rng.uniform(SILENCE, 0.0, size=(16, 32))
    fs = FrameSequence(frames=frames, fps=4.0)
    spec = Spectrogram(values=spec_values, frame_hop_seconds=0.03125)
    with torch.no_grad():
        v = encode_visual(fs, venc)
        a = encode_audio(spec, aenc)
        v_ref = venc(torch.from_numpy(frames).float().unsqueeze(0))[0]
        a_ref = aenc(torch.from_numpy(spec_values).float().unsqueeze(0))[0]
    assert torch.equal(v, v_ref)
    assert torch.equal(a, a_ref)
    assert v.shape == (4, 4, 4, 16)
    assert a.shape == (4, 16)


def test_encoders_stay_finite_on_extreme_inputs():
    torch.manual_seed(9)
    venc = VisualEncoder(feature_dim=16, downsample_factor=8).eval()
    aenc = AudioEncoder(n_freq_bins=16, n_time_steps=32, t_frames=4,
                        feature_dim=16, hidden=16).eval()
    with torch.no_grad():
        v = venc(torch.randn(1, 2, 32, 32, 3) * 1e3)
        a = aenc(torch.randn(1, 16, 32) * 1e3)
    assert torch.isfinite(v).all()
    assert torch.isfinite(a).all()
