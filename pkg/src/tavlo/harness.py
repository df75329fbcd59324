"""Training loop, checkpointing, dataset plumbing, evaluation, and export.

A checkpoint is one keyed-tensor container holding model weights,
optimizer state, the full run config (JSON bytes), the step counter, and
the loss history; loading it reproduces forward outputs bit-exactly on
the same platform.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .config import EvalConfig, RunConfig
from .errors import ConfigError, DataError, NumericalError
from .evaluation import EvalRecord, MetricsReport, scenario_report
from .ingest import compute_spectrogram, detect_audio_events, sample_frames
from .model import ModelConfig, TavloModel
from .objective import loss_total
from .synth import LabeledClip, load_clip_dir, load_ground_truth, make_suite, suite_sampling


@dataclass
class ClipExample:
    """One clip prepared for the model: tensors plus per-frame labels."""

    clip_id: str
    frames_u8: torch.Tensor  # (T, H, W, 3) uint8
    spec: torch.Tensor  # (H_a, W_a) float32
    labeled_frames: list[int]
    gt_masks: dict[int, np.ndarray]
    tags: dict[int, frozenset]
    boxes: dict[int, list] = field(default_factory=dict)  # frame -> [(box, is_sounding)]
    cross_event: bool = False
    split: str = "train"
    scenario: str = ""

    def frames_float(self) -> torch.Tensor:
        return self.frames_u8.to(torch.float32) / 255.0


def _check_geometry(cfg: ModelConfig, t: int, h: int, w: int, clip_id: str) -> None:
    if t != cfg.t_frames:
        raise ConfigError(
            f"model.t_frames: config expects T={cfg.t_frames} but clip "
            f"{clip_id} has {t} frames")
    if (h, w) != (cfg.frame_size, cfg.frame_size):
        raise ConfigError(
            f"model.frame_size: config expects {cfg.frame_size}x{cfg.frame_size} "
            f"frames but clip {clip_id} is {h}x{w}")


def example_from_labeled(clip: LabeledClip, cfg: ModelConfig) -> ClipExample:
    """Prepare an in-memory synthetic clip; labeled frames come from the
    real audio-event sampler, restricted to frames that carry tags."""
    frames = clip.clip.frames.frames
    t, h, w, _ = frames.shape
    _check_geometry(cfg, t, h, w, clip.clip_id)
    audio = clip.clip.audio
    spec = compute_spectrogram(audio, cfg.n_freq_bins, audio.duration / cfg.n_time_steps)
    sampling = suite_sampling(audio.duration)
    events = detect_audio_events(audio, sampling)
    selected = sample_frames(clip.clip.frames, events, sampling)
    labeled = [f for f in selected if clip.frame_tags[f]]
    return ClipExample(
        clip_id=clip.clip_id,
        frames_u8=torch.from_numpy(
            np.clip(frames * 255.0, 0, 255).round().astype(np.uint8)),
        spec=torch.from_numpy(spec.values).to(torch.float32),
        labeled_frames=labeled,
        gt_masks={f: clip.sounding_mask(f) for f in labeled},
        tags={f: clip.frame_tags[f] for f in labeled},
        boxes={f: [(inst.box, inst.is_sounding) for inst in clip.instances[f]]
               for f in labeled},
        cross_event=clip.cross_event,
        split=clip.split or "train",
        scenario=clip.scenario,
    )


def example_from_disk(root: Path, record: dict, cfg: ModelConfig, fps: float,
                      split: str) -> ClipExample:
    clip_dir = root / record["media_path"]
    media = load_clip_dir(clip_dir, fps=fps)
    t, h, w, _ = media.frames.frames.shape
    _check_geometry(cfg, t, h, w, record["clip_id"])
    header, gt_rows = load_ground_truth(clip_dir)
    spec = compute_spectrogram(media.audio, cfg.n_freq_bins,
                               media.audio.duration / cfg.n_time_steps)
    by_frame: dict[int, list[dict]] = {}
    for row in gt_rows:
        by_frame.setdefault(int(row["frame_index"]), []).append(row)

    labeled, gt_masks, tags, boxes = [], {}, {}, {}
    for f in record["selected_frame_indices"]:
        rows = by_frame.get(int(f), [])
        frame_tags = frozenset(rows[0]["tags"]) if rows else frozenset()
        if not frame_tags:
            continue
        union = np.zeros((h, w), dtype=bool)
        frame_boxes = []
        for row in rows:
            if row["entity_id"] < 0:
                continue
            if row["is_sounding"]:
                union |= tensorio.rle_to_mask(row["mask"])
            frame_boxes.append((tuple(row["box"]), bool(row["is_sounding"])))
        labeled.append(int(f))
        gt_masks[int(f)] = union
        tags[int(f)] = frame_tags
        boxes[int(f)] = frame_boxes
    return ClipExample(
        clip_id=record["clip_id"],
        frames_u8=torch.from_numpy(
            np.clip(media.frames.frames * 255.0, 0, 255).round().astype(np.uint8)),
        spec=torch.from_numpy(spec.values).to(torch.float32),
        labeled_frames=labeled,
        gt_masks=gt_masks,
        tags=tags,
        boxes=boxes,
        cross_event=bool(header.get("cross_event", False)),
        split=split,
        scenario=header.get("scenario", ""),
    )


def build_examples(cfg: RunConfig) -> dict[str, list[ClipExample]]:
    """Materialize the configured dataset, grouped by split."""
    out: dict[str, list[ClipExample]] = {"train": [], "val": [], "test": []}
    if cfg.data.suite_counts is not None:
        clips = make_suite(cfg.data.suite_seed, cfg.data.suite_counts,
                           t_frames=cfg.model.t_frames,
                           image_size=(cfg.model.frame_size, cfg.model.frame_size),
                           fps=cfg.data.fps)
        for clip in clips:
            out[clip.split].append(example_from_labeled(clip, cfg.model))
        return out
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise DataError(f"data root {root} is not a directory")
    found = False
    for split in out:
        manifest = root / f"manifest_{split}.jsonl"
        if not manifest.exists():
            continue
        found = True
        for record in tensorio.read_manifest(manifest):
            out[split].append(example_from_disk(root, record, cfg.model,
                                                cfg.data.fps, split))
    if not found:
        raise DataError(f"no manifest_*.jsonl files under {root}")
    return out


def _batch_tensors(batch: list[ClipExample]) -> tuple[torch.Tensor, torch.Tensor]:
    frames = torch.stack([ex.frames_float() for ex in batch])
    specs = torch.stack([ex.spec for ex in batch])
    return frames, specs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _json_tensor(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8).copy()


def _json_from_tensor(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))


def save_checkpoint(path: str | Path, model: TavloModel,
                    optimizer: torch.optim.Optimizer | None,
                    run_config: RunConfig, step: int, history: list[dict]) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        tensors[f"model/{name}"] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        state = optimizer.state_dict()
        for pid, entry in state["state"].items():
            for key, val in entry.items():
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                tensors[f"optim/{pid}/{key}"] = arr
        tensors["meta/param_groups"] = _json_tensor(state["param_groups"])
    tensors["meta/config"] = _json_tensor(run_config.to_dict())
    tensors["meta/step"] = np.asarray(step, dtype=np.int64)
    tensors["meta/history"] = _json_tensor(history)
    tensorio.save_tensor_dict(path, tensors)


@dataclass
class Checkpoint:
    model: TavloModel
    run_config: RunConfig
    step: int
    history: list[dict]
    optimizer_state: dict | None = None


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors = tensorio.load_tensor_dict(path)
    if "meta/config" not in tensors:
        raise DataError(f"{path}: not a checkpoint (missing meta/config)")
    run_config = RunConfig.from_dict(_json_from_tensor(tensors["meta/config"]))
    model = TavloModel(run_config.model)
    state = {key[len("model/"):]: torch.from_numpy(arr.copy())
             for key, arr in tensors.items() if key.startswith("model/")}
    model.load_state_dict(state)
    model.eval()  # inference default; train() re-enables dropout explicitly

    optimizer_state = None
    optim_entries: dict[int, dict] = {}
    for key, arr in tensors.items():
        if key.startswith("optim/"):
            _, pid, name = key.split("/", 2)
            optim_entries.setdefault(int(pid), {})[name] = torch.from_numpy(arr.copy())
    if "meta/param_groups" in tensors:
        optimizer_state = {
            "state": optim_entries,
            "param_groups": _json_from_tensor(tensors["meta/param_groups"]),
        }
    return Checkpoint(
        model=model,
        run_config=run_config,
        step=int(tensors["meta/step"]),
        history=_json_from_tensor(tensors["meta/history"]),
        optimizer_state=optimizer_state,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TavloModel
    history: list[dict]
    checkpoint_path: Path | None
    examples: dict[str, list[ClipExample]]


def train(cfg: RunConfig, out_dir: str | Path | None = None,
          deterministic: bool = False,
          examples: dict[str, list[ClipExample]] | None = None) -> TrainResult:
    """Run the configured optimization; deterministic given the seed.

    A non-finite loss aborts with the last good checkpoint written and a
    diagnostic dump naming the offending batch.
    """
    if deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.optimizer.seed)
    rng = np.random.default_rng(cfg.optimizer.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if examples is None:
        examples = build_examples(cfg)
    train_set = examples["train"]
    if not train_set and cfg.optimizer.epochs > 0:
        raise DataError("training split is empty")

    model = TavloModel(cfg.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.optimizer.learning_rate,
                                 weight_decay=cfg.optimizer.weight_decay)
    batch_size = cfg.optimizer.batch_size
    n_batches = max(1, math.ceil(len(train_set) / batch_size)) if train_set else 0
    planned = cfg.optimizer.epochs * n_batches
    if cfg.optimizer.max_steps is not None:
        planned = min(planned, cfg.optimizer.max_steps)

    history: list[dict] = []
    step = 0
    last_good: dict | None = None
    done = planned == 0
    model.train()
    for _ in range(cfg.optimizer.epochs):
        if done:
            break
        order = rng.permutation(len(train_set))
        for b in range(n_batches):
            idx = order[b * batch_size : (b + 1) * batch_size]
            if len(idx) < 2:
                continue  # a singleton batch has no negatives, loss is zero
            batch = [train_set[i] for i in idx]
            if cfg.optimizer.schedule == "cosine":
                scale = 0.5 * (1.0 + math.cos(math.pi * step / max(1, planned)))
                for group in optimizer.param_groups:
                    group["lr"] = cfg.optimizer.learning_rate * scale
            frames, specs = _batch_tensors(batch)
            loss = loss_total(model(frames, specs))
            if not torch.isfinite(loss):
                if out is not None:
                    (out / "diagnostic.json").write_text(json.dumps({
                        "step": step,
                        "loss": str(loss.item()),
                        "batch_clip_ids": [ex.clip_id for ex in batch],
                    }, indent=2))
                    if last_good is not None:
                        model.load_state_dict(last_good)
                        save_checkpoint(out / "last_good.ckpt", model, optimizer,
                                        cfg, step, history)
                raise NumericalError(
                    f"non-finite loss at step {step} "
                    f"(batch {[ex.clip_id for ex in batch]})")
            optimizer.zero_grad()
            loss.backward()
            if cfg.optimizer.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optimizer.grad_clip)
            optimizer.step()
            step += 1
            entry = {"step": step, "loss": float(loss.item()),
                     "lr": float(optimizer.param_groups[0]["lr"])}
            if (cfg.optimizer.val_interval and examples["val"]
                    and step % cfg.optimizer.val_interval == 0):
                report = evaluate_examples(model, examples["val"], cfg.eval)
                if "total" in report.cells:
                    entry["val_ciou"] = report.cells["total"]["ciou"]
                model.train()
            history.append(entry)
            last_good = copy.deepcopy(model.state_dict())
            if (out is not None and cfg.optimizer.checkpoint_interval
                    and step % cfg.optimizer.checkpoint_interval == 0):
                save_checkpoint(out / f"step{step:06d}.ckpt", model, optimizer,
                                cfg, step, history)
            if step >= planned:
                done = True
                break

    model.eval()
    ckpt_path = None
    if out is not None:
        ckpt_path = out / "final.ckpt"
        save_checkpoint(ckpt_path, model, optimizer, cfg, step, history)
    return TrainResult(model=model, history=history, checkpoint_path=ckpt_path,
                       examples=examples)


# ---------------------------------------------------------------------------
# Evaluation and export
# ---------------------------------------------------------------------------


def _graded_mask(mask: np.ndarray) -> np.ndarray:
    """Erosion-depth grading of a binary mask, normalized to (0, 1].

    Interior pixels score higher than boundary pixels, so a global
    percentile cut trims the blob from the outside in instead of flipping
    between all-or-nothing.
    """
    depth = np.zeros(mask.shape, dtype=np.float64)
    cur = mask.copy()
    while cur.any():
        depth[cur] += 1.0
        nxt = cur.copy()
        nxt[1:] &= cur[:-1]
        nxt[:-1] &= cur[1:]
        nxt[:, 1:] &= cur[:, :-1]
        nxt[:, :-1] &= cur[:, 1:]
        nxt[0, :] = nxt[-1, :] = False
        nxt[:, 0] = nxt[:, -1] = False
        cur = nxt
    peak = depth.max()
    return depth / peak if peak > 0 else depth


def _records_for(model: TavloModel | None, examples: list[ClipExample],
                 oracle: bool = False) -> list[EvalRecord]:
    records = []
    for ex in examples:
        maps = None
        if not oracle:
            maps = model.localization(ex.frames_float().unsqueeze(0),
                                      ex.spec.unsqueeze(0))[0].numpy()
        for f in ex.labeled_frames:
            heat = _graded_mask(ex.gt_masks[f]) if oracle else maps[f]
            records.append(EvalRecord(
                clip_id=ex.clip_id, frame_index=f, heatmap=heat,
                gt_mask=ex.gt_masks[f], tags=ex.tags[f],
                cross_event=ex.cross_event))
    return records


def evaluate_examples(model: TavloModel | None, examples: list[ClipExample],
                      eval_cfg: EvalConfig | None = None,
                      oracle: bool = False) -> MetricsReport:
    """Score a list of prepared clips; oracle=True injects ground-truth
    masks as heatmaps (plumbing check, bypasses the model)."""
    eval_cfg = eval_cfg or EvalConfig()
    if not examples:
        raise DataError("evaluation set is empty")
    if model is not None:
        model.eval()
    with torch.no_grad():
        records = _records_for(model, examples, oracle=oracle)
    if not records:
        raise DataError("evaluation produced no labeled frames")
    report = scenario_report(records, eval_cfg.threshold_policy())
    if eval_cfg.scenarios is not None:
        keep = set(eval_cfg.scenarios)
        report.cells = {k: v for k, v in report.cells.items() if k in keep}
    return report


def evaluate(checkpoint: Checkpoint | TavloModel, cfg: RunConfig,
             split: str = "test", oracle: bool = False,
             examples: dict[str, list[ClipExample]] | None = None) -> MetricsReport:
    """Build the configured dataset and score one split."""
    model = checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint
    if examples is None:
        examples = build_examples(cfg)
    if split not in examples:
        raise DataError(f"unknown split {split!r}")
    return evaluate_examples(model, examples[split], cfg.eval, oracle=oracle)


def _draw_box(img: np.ndarray, box: tuple[int, int, int, int],
              color: tuple[int, int, int]) -> None:
    x0, y0, x1, y1 = box
    h, w = img.shape[:2]
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    img[y0, x0:x1] = color
    img[y1 - 1, x0:x1] = color
    img[y0:y1, x0] = color
    img[y0:y1, x1 - 1] = color


def export_heatmaps(model: TavloModel, examples: list[ClipExample],
                    out_dir: str | Path) -> list[Path]:
    """Write {clip_id}_{frame:02d}.png (16-bit heatmap, value scale [-1, 1])
    and an RGB overlay composite with ground-truth box outlines."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    written: list[Path] = []
    with torch.no_grad():
        for ex in examples:
            maps = model.localization(ex.frames_float().unsqueeze(0),
                                      ex.spec.unsqueeze(0))[0].numpy()
            for f in ex.labeled_frames:
                base = out / f"{ex.clip_id}_{f:02d}"
                tensorio.write_heatmap_png(base.with_suffix(".png"), maps[f])
                written.append(base.with_suffix(".png"))

                frame = ex.frames_u8[f].numpy().astype(np.float64)
                weight = np.clip((maps[f] + 1.0) / 2.0, 0.0, 1.0)[..., None]
                red = np.array([255.0, 32.0, 32.0])
                overlay = frame * (1.0 - 0.5 * weight) + red * (0.5 * weight)
                overlay = overlay.round().astype(np.uint8)
                for box, sounding in ex.boxes.get(f, []):
                    _draw_box(overlay, box, (0, 255, 0) if sounding else (255, 255, 255))
                path = out / f"{ex.clip_id}_{f:02d}_overlay.png"
                Image.fromarray(overlay, mode="RGB").save(path)
                written.append(path)
    return written
