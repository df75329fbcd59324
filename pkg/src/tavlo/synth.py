"""Synthetic disc-and-tone scenes with exact ground truth.

Each scene is a handful of colored discs drifting over a textured
background. A disc's category fixes both its color and the frequency band
of its sine tone, so the audio identifies which disc sounds at each moment.
Sounding discs pulse their radius in sync with the tone's tremolo; that
motion cue is what makes the look-alike (multi-entity) scenario solvable.

Scenario vocabulary: single (one sounding disc), mixed (two concurrent
categories), multi_entity (one sounder next to a silent same-look twin),
off_screen (audible tone of a category with no visible disc), cross_event
(the sounding category switches mid-clip).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidInputError
from .ingest import (
    FrameSequence,
    MediaClip,
    SamplingConfig,
    Waveform,
    detect_audio_events,
    sample_frames,
)
from . import tensorio

SCENARIOS = ("single", "mixed", "multi_entity", "off_screen", "cross_event")

# category -> (RGB color in [0,1], tone band in Hz)
CATEGORIES: dict[str, tuple[tuple[float, float, float], tuple[float, float]]] = {
    "chime": ((0.90, 0.15, 0.15), (400.0, 700.0)),
    "horn": ((0.15, 0.35, 0.90), (900.0, 1400.0)),
    "bell": ((0.15, 0.80, 0.25), (1800.0, 2600.0)),
    "whistle": ((0.92, 0.85, 0.15), (3200.0, 4400.0)),
}

PULSE_RATE_HZ = 1.0  # shared by the radius pulse and the tone tremolo
TONE_AMPLITUDE = 0.3
NOISE_SIGMA = 0.003  # keeps silent intervals under the 0.01 RMS gate
RADIUS_PULSE_FRACTION = 0.2

# Background texture sharing (None: per-scene textures). The base level is
# drawn per scene either way, so no single feature direction stands in for
# "background" across the suite; sharing one texture additionally pins every
# cell's micro-pattern, handing the contrastive objective a fixed reference
# grid it can rank without ever looking at the discs. Per-scene textures
# keep the only clip-predictable pixels on the discs themselves.
BACKGROUND_SEED: int | None = None
BACKGROUND_LEVEL_RANGE = (0.22, 0.55)

SPLIT_FRACTIONS = {"train": 0.7, "val": 0.15, "test": 0.15}


@dataclass
class EntityTrack:
    """One disc: per-frame centers, look (category), and sound schedule."""

    entity_id: int
    category: str
    centers: np.ndarray  # T x 2 array of (x, y) pixel coordinates
    radius: float
    tone_frequency: float
    active_spans: list[tuple[int, int]] = field(default_factory=list)  # [start, end) frames

    def is_active(self, frame: int) -> bool:
        return any(s <= frame < e for s, e in self.active_spans)


@dataclass
class SceneSpec:
    entities: list[EntityTrack]
    duration_frames: int = 16
    image_size: tuple[int, int] = (64, 64)  # H_v, W_v
    fps: float = 4.0
    sample_rate: int = 16000
    seed: int = 0
    offscreen_spans: list[tuple[int, int]] = field(default_factory=list)
    offscreen_frequency: float | None = None
    offscreen_category: str | None = None

    def __post_init__(self):
        t = self.duration_frames
        for ent in self.entities:
            if ent.category not in CATEGORIES:
                raise InvalidInputError(f"unknown category {ent.category!r}")
            if np.asarray(ent.centers).shape != (t, 2):
                raise InvalidInputError(
                    f"entity {ent.entity_id}: need one (x, y) center per frame")
            for s, e in ent.active_spans:
                if not (0 <= s < e <= t):
                    raise InvalidInputError(
                        f"entity {ent.entity_id}: active span ({s}, {e}) outside [0, {t})")
        freqs = [ent.tone_frequency for ent in self.entities]
        if len(set(freqs)) != len(freqs):
            raise InvalidInputError("entities must have distinct tone frequencies")
        if self.offscreen_spans and self.offscreen_frequency is None:
            raise InvalidInputError("offscreen spans need an offscreen frequency")


@dataclass
class Instance:
    """Ground truth for one visible entity on one frame.

    box is (x_min, y_min, x_max, y_max) with exclusive max, x = column.
    """

    entity_id: int
    category: str
    box: tuple[int, int, int, int]
    mask: np.ndarray  # H_v x W_v bool, exactly the rendered support
    is_sounding: bool


@dataclass
class LabeledClip:
    clip_id: str
    clip: MediaClip
    instances: list[list[Instance]]  # per frame
    frame_tags: list[frozenset[str]]
    cross_event: bool
    scenario: str = ""
    split: str = ""

    def sounding_mask(self, frame: int) -> np.ndarray:
        """Union of sounding-entity masks; empty for off-screen frames."""
        h, w = self.clip.frames.frames.shape[1:3]
        out = np.zeros((h, w), dtype=bool)
        for inst in self.instances[frame]:
            if inst.is_sounding:
                out |= inst.mask
        return out


def derive_frame_tags(n_sounding_visible: int, n_silent_lookalikes: int,
                      offscreen_active: bool) -> frozenset[str]:
    """Scenario tags as a pure function of per-frame source counts."""
    if n_sounding_visible == 0:
        return frozenset({"off_screen"}) if offscreen_active else frozenset()
    tags = set()
    if n_sounding_visible >= 2 or offscreen_active:
        tags.add("mixed")
    else:
        tags.add("single")
    if n_silent_lookalikes > 0:
        tags.add("multi_entity")
        tags.discard("single")
    return frozenset(tags)


def _pulse_radius(base: float, time_seconds: float) -> float:
    return base * (1.0 + RADIUS_PULSE_FRACTION * math.sin(2.0 * math.pi * PULSE_RATE_HZ * time_seconds))


def _disc_mask(h: int, w: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2


def _smooth_noise(rng: np.random.Generator, h: int, w: int, coarse: int = 8,
                  amplitude: float = 0.08) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, size=(coarse + 1, coarse + 1))
    ys = np.linspace(0.0, coarse, h, endpoint=False)
    xs = np.linspace(0.0, coarse, w, endpoint=False)
    y0 = np.minimum(ys.astype(int), coarse - 1)
    x0 = np.minimum(xs.astype(int), coarse - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = (grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
         + grid[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
         + grid[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
         + grid[np.ix_(y0 + 1, x0 + 1)] * fy * fx)
    return amplitude * g


def _tone(n_samples: int, sample_rate: float, frequency: float, phase: float,
          spans_seconds: list[tuple[float, float]]) -> np.ndarray:
    t = np.arange(n_samples) / sample_rate
    gate = np.zeros(n_samples)
    for s, e in spans_seconds:
        gate[int(round(s * sample_rate)) : int(round(e * sample_rate))] = 1.0
    ramp = max(1, int(round(0.005 * sample_rate)))
    gate = np.convolve(gate, np.ones(ramp) / ramp, mode="same")
    tremolo = 0.75 + 0.25 * np.sin(2.0 * np.pi * PULSE_RATE_HZ * t)
    return TONE_AMPLITUDE * gate * tremolo * np.sin(2.0 * np.pi * frequency * t + phase)


def render_scene(spec: SceneSpec) -> LabeledClip:
    """Rasterize frames, synthesize the waveform, and derive exact labels.

    Discs may not overlap on any frame: ground-truth masks are defined as
    the rendered supports, and occlusion would break that equality.
    """
    rng = np.random.default_rng(spec.seed)
    t_frames = spec.duration_frames
    h, w = spec.image_size
    level = rng.uniform(*BACKGROUND_LEVEL_RANGE)
    bg_rng = rng if BACKGROUND_SEED is None else np.random.default_rng(BACKGROUND_SEED)
    background = np.clip(level + _smooth_noise(bg_rng, h, w), 0.0, 1.0)

    frames = np.empty((t_frames, h, w, 3))
    instances: list[list[Instance]] = []
    for k in range(t_frames):
        time_s = k / spec.fps
        frame = np.repeat(background[:, :, None], 3, axis=2).copy()
        frame_instances: list[Instance] = []
        masks = []
        for ent in spec.entities:
            cx, cy = ent.centers[k]
            radius = _pulse_radius(ent.radius, time_s) if ent.is_active(k) else ent.radius
            mask = _disc_mask(h, w, float(cx), float(cy), radius)
            if not mask.any():
                raise InvalidInputError(
                    f"entity {ent.entity_id} fully outside the frame at frame {k}")
            for other in masks:
                if (mask & other).any():
                    raise InvalidInputError(f"discs overlap at frame {k}")
            masks.append(mask)
            color = np.array(CATEGORIES[ent.category][0])
            frame[mask] = color
            cols = np.flatnonzero(mask.any(axis=0))
            rows = np.flatnonzero(mask.any(axis=1))
            box = (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
            frame_instances.append(Instance(
                entity_id=ent.entity_id, category=ent.category, box=box,
                mask=mask, is_sounding=ent.is_active(k)))
        frames[k] = frame
        instances.append(frame_instances)

    n_samples = int(round(t_frames / spec.fps * spec.sample_rate))
    samples = rng.normal(0.0, NOISE_SIGMA, n_samples)
    for ent in spec.entities:
        if not ent.active_spans:
            continue
        spans_s = [(s / spec.fps, e / spec.fps) for s, e in ent.active_spans]
        samples += _tone(n_samples, spec.sample_rate, ent.tone_frequency,
                         rng.uniform(0, 2 * np.pi), spans_s)
    if spec.offscreen_spans:
        spans_s = [(s / spec.fps, e / spec.fps) for s, e in spec.offscreen_spans]
        samples += _tone(n_samples, spec.sample_rate, spec.offscreen_frequency,
                         rng.uniform(0, 2 * np.pi), spans_s)
    samples = np.clip(samples, -1.0, 1.0)

    frame_tags = []
    active_category_sets = []
    for k in range(t_frames):
        off_active = any(s <= k < e for s, e in spec.offscreen_spans)
        sounding = [i for i in instances[k] if i.is_sounding]
        sounding_cats = {i.category for i in sounding}
        n_lookalike = sum(1 for i in instances[k]
                          if not i.is_sounding and i.category in sounding_cats)
        frame_tags.append(derive_frame_tags(len(sounding), n_lookalike, off_active))
        cats = set(sounding_cats)
        if off_active and spec.offscreen_category:
            cats.add(spec.offscreen_category)
        active_category_sets.append(frozenset(cats))

    nonempty = {s for s in active_category_sets if s}
    clip = MediaClip(
        frames=FrameSequence(frames=frames, fps=spec.fps),
        audio=Waveform(samples=samples, sample_rate=spec.sample_rate),
    )
    return LabeledClip(
        clip_id=f"scene{spec.seed:08x}",
        clip=clip,
        instances=instances,
        frame_tags=frame_tags,
        cross_event=len(nonempty) > 1,
        scenario="",
    )


# ---------------------------------------------------------------------------
# Scenario construction
# ---------------------------------------------------------------------------


def _random_track(rng: np.random.Generator, t_frames: int, radius: float,
                  x_bounds: tuple[float, float], y_bounds: tuple[float, float]) -> np.ndarray:
    """A bouncing linear drift whose disc (with pulse headroom) stays inside
    the given pixel region, so discs in disjoint regions never overlap."""
    margin = radius * (1.0 + RADIUS_PULSE_FRACTION) + 1.0
    lo = np.array([x_bounds[0] + margin, y_bounds[0] + margin])
    hi = np.array([x_bounds[1] - 1 - margin, y_bounds[1] - 1 - margin])
    if np.any(hi < lo):
        raise DataError(f"region {x_bounds}x{y_bounds} too small for radius {radius:.1f}")
    p = rng.uniform(lo, hi)
    v = rng.uniform(-1.6, 1.6, size=2)
    centers = np.empty((t_frames, 2))
    for k in range(t_frames):
        centers[k] = p
        p = p + v
        for axis in (0, 1):
            if p[axis] < lo[axis]:
                p[axis] = 2 * lo[axis] - p[axis]
                v[axis] = -v[axis]
            elif p[axis] > hi[axis]:
                p[axis] = 2 * hi[axis] - p[axis]
                v[axis] = -v[axis]
    return centers


def _pick_frequency(rng: np.random.Generator, category: str, taken: list[float]) -> float:
    lo, hi = CATEGORIES[category][1]
    for _ in range(100):
        f = float(rng.integers(int(lo), int(hi) + 1))
        if all(abs(f - t) >= 25.0 for t in taken):
            return f
    raise DataError(f"could not pick a distinct frequency in band {category}")


def make_scene_spec(scenario: str, seed: int, t_frames: int = 16,
                    image_size: tuple[int, int] = (64, 64), fps: float = 4.0,
                    sample_rate: int = 16000) -> SceneSpec:
    """Draw one randomized scene layout for the named scenario."""
    if scenario not in SCENARIOS:
        raise InvalidInputError(f"unknown scenario {scenario!r} (choose from {SCENARIOS})")
    rng = np.random.default_rng(seed)
    cats = list(CATEGORIES)
    entities: list[EntityTrack] = []
    freqs: list[float] = []
    offscreen_spans: list[tuple[int, int]] = []
    offscreen_frequency = None
    offscreen_category = None
    h, w = image_size
    scale = min(h, w) / 64.0
    r_lo, r_hi = 9.0 * scale, 11.0 * scale

    # Up to two discs per scene: each gets one half of the frame (split on
    # a random axis) so non-overlap is guaranteed by construction. Optional
    # second discs (single/off_screen distractors) are dropped when the
    # half-frame cannot hold a disc with pulse headroom.
    want_two = {
        "single": rng.random() < 0.5,
        "mixed": True, "multi_entity": True,
        "off_screen": rng.random() < 0.5,
        "cross_event": True,
    }[scenario]
    fits_two = min(h, w) / 2 >= 2 * (r_hi * (1.0 + RADIUS_PULSE_FRACTION) + 2.0)
    if scenario in ("single", "off_screen"):
        want_two = want_two and fits_two
    elif want_two and not fits_two:
        raise DataError(
            f"image size {image_size} too small for two non-overlapping discs")
    n_discs = 2 if want_two else 1
    if n_discs == 1:
        regions = [((0.0, float(w)), (0.0, float(h)))]
    elif rng.random() < 0.5:
        regions = [((0.0, w / 2), (0.0, float(h))), ((w / 2, float(w)), (0.0, float(h)))]
    else:
        regions = [((0.0, float(w)), (0.0, h / 2)), ((0.0, float(w)), (h / 2, float(h)))]
    rng.shuffle(regions)

    def add_entity(category: str, spans: list[tuple[int, int]], radius: float | None = None):
        r = float(rng.uniform(r_lo, r_hi)) if radius is None else radius
        x_bounds, y_bounds = regions[len(entities)]
        centers = _random_track(rng, t_frames, r, x_bounds, y_bounds)
        f = _pick_frequency(rng, category, freqs)
        freqs.append(f)
        entities.append(EntityTrack(
            entity_id=len(entities), category=category, centers=centers,
            radius=r, tone_frequency=f, active_spans=spans))

    full = [(0, t_frames)]
    if scenario == "single":
        cat = cats[rng.integers(len(cats))]
        add_entity(cat, full)
        if n_discs == 2:
            other = cats[(cats.index(cat) + 1 + rng.integers(len(cats) - 1)) % len(cats)]
            add_entity(other, [])
    elif scenario == "mixed":
        a, b = rng.choice(len(cats), size=2, replace=False)
        add_entity(cats[a], full)
        add_entity(cats[b], full)
    elif scenario == "multi_entity":
        cat = cats[rng.integers(len(cats))]
        add_entity(cat, full)
        add_entity(cat, [], radius=entities[0].radius)
    elif scenario == "off_screen":
        visible = rng.choice(len(cats), size=n_discs, replace=False)
        for idx in visible:
            add_entity(cats[idx], [])
        hidden = [c for i, c in enumerate(cats) if i not in visible]
        offscreen_category = hidden[rng.integers(len(hidden))]
        offscreen_frequency = _pick_frequency(rng, offscreen_category, freqs)
        offscreen_spans = full
    elif scenario == "cross_event":
        a, b = rng.choice(len(cats), size=2, replace=False)
        half = t_frames // 2
        add_entity(cats[a], [(0, half)])
        add_entity(cats[b], [(half, t_frames)])

    return SceneSpec(
        entities=entities, duration_frames=t_frames, image_size=image_size,
        fps=fps, sample_rate=sample_rate, seed=seed,
        offscreen_spans=offscreen_spans, offscreen_frequency=offscreen_frequency,
        offscreen_category=offscreen_category)


def make_suite(seed: int, counts: dict[str, int], t_frames: int = 16,
               image_size: tuple[int, int] = (64, 64), fps: float = 4.0,
               sample_rate: int = 16000) -> list[LabeledClip]:
    """Generate clips per scenario with seed-derived disjoint splits.

    Split fractions are 70/15/15 per scenario via largest-remainder
    rounding, then shuffled deterministically within each scenario.
    """
    unknown = set(counts) - set(SCENARIOS)
    if unknown:
        raise InvalidInputError(f"unknown scenario counts: {sorted(unknown)}")
    if any(v < 0 for v in counts.values()):
        raise InvalidInputError("scenario counts must be >= 0")
    root = np.random.default_rng(seed)
    clips: list[LabeledClip] = []
    for scenario in SCENARIOS:
        n = int(counts.get(scenario, 0))
        if n == 0:
            continue
        quotas = {name: n * frac for name, frac in SPLIT_FRACTIONS.items()}
        alloc = {name: int(q) for name, q in quotas.items()}
        short = n - sum(alloc.values())
        for name in sorted(quotas, key=lambda s: quotas[s] - alloc[s], reverse=True)[:short]:
            alloc[name] += 1
        labels = [name for name in ("train", "val", "test") for _ in range(alloc[name])]
        root.shuffle(labels)
        for k in range(n):
            scene_seed = int(root.integers(0, 2**31 - 1))
            clip = render_scene(make_scene_spec(
                scenario, scene_seed, t_frames=t_frames, image_size=image_size,
                fps=fps, sample_rate=sample_rate))
            clip.clip_id = f"{scenario}-{seed:04d}-{k:03d}"
            clip.scenario = scenario
            clip.split = labels[k]
            clips.append(clip)
    return clips


# ---------------------------------------------------------------------------
# On-disk format: per-clip directory + manifest + ground-truth records
# ---------------------------------------------------------------------------

def suite_sampling(duration_seconds: float = 4.0) -> SamplingConfig:
    """Sampling knobs for generated clips.

    The 0.5 s RMS interval puts peak times exactly on frame timestamps at
    4 fps, so every audio event window contains one frame.
    """
    n_intervals = max(1, int(round(duration_seconds / 0.5)))
    return SamplingConfig(rms_interval=0.5, window_length=duration_seconds,
                          min_active_intervals=min(5, n_intervals))


SUITE_SAMPLING = suite_sampling(4.0)


def write_suite(clips: list[LabeledClip], out_dir: str | Path) -> Path:
    """Write clips to {out_dir}/clips/* and one manifest per split.

    Frame selection in the manifest comes from the real audio-event
    sampler running on the generated waveform, not from the labels.
    """
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    per_split: dict[str, list[dict]] = {}
    for clip in clips:
        clip_dir = out / "clips" / clip.clip_id
        clip_dir.mkdir(exist_ok=True)
        frames_u8 = np.clip(clip.clip.frames.frames * 255.0, 0, 255).round().astype(np.uint8)
        tensorio.save_tensor(clip_dir / "frames.t4", frames_u8)
        tensorio.write_wav(clip_dir / "audio.wav", clip.clip.audio.samples,
                           clip.clip.audio.sample_rate)

        sampling = suite_sampling(clip.clip.audio.duration)
        events = detect_audio_events(clip.clip.audio, sampling)
        selected = sample_frames(clip.clip.frames, events, sampling)

        gt_records: list[dict] = [{
            "clip_id": clip.clip_id,
            "cross_event": clip.cross_event,
            "scenario": clip.scenario,
            "fps": clip.clip.frames.fps,
        }]
        for k, frame_instances in enumerate(clip.instances):
            tags = sorted(clip.frame_tags[k])
            for inst in frame_instances:
                gt_records.append({
                    "frame_index": k,
                    "entity_id": inst.entity_id,
                    "box": list(inst.box),
                    "mask": tensorio.mask_to_rle(inst.mask),
                    "is_sounding": inst.is_sounding,
                    "tags": tags,
                })
            if not frame_instances:
                gt_records.append({
                    "frame_index": k, "entity_id": -1, "box": None, "mask": None,
                    "is_sounding": False, "tags": tags,
                })
        tensorio.write_jsonl(clip_dir / "gt.jsonl", gt_records)

        per_split.setdefault(clip.split or "train", []).append({
            "clip_id": clip.clip_id,
            "media_path": str(clip_dir.relative_to(out)),
            "start_seconds": 0.0,
            "selected_frame_indices": selected,
            "event_peak_times": [ev.peak_time for ev in events],
        })
    for split, records in per_split.items():
        tensorio.write_manifest(out / f"manifest_{split}.jsonl", records)
    return out


def load_clip_dir(clip_dir: str | Path, fps: float = 4.0) -> MediaClip:
    """Load one written clip directory back into memory."""
    clip_dir = Path(clip_dir)
    frames = tensorio.load_tensor(clip_dir / "frames.t4").astype(np.float64) / 255.0
    samples, sr = tensorio.read_wav(clip_dir / "audio.wav")
    return MediaClip(frames=FrameSequence(frames=frames, fps=fps),
                     audio=Waveform(samples=samples, sample_rate=sr))


def load_ground_truth(clip_dir: str | Path) -> tuple[dict, list[dict]]:
    """Read a clip's ground-truth file; returns (clip header, frame records)."""
    records = tensorio.read_jsonl(Path(clip_dir) / "gt.jsonl")
    if not records or "frame_index" in records[0]:
        raise DataError(f"{clip_dir}: ground-truth file missing its clip header")
    return records[0], records[1:]
