"""Binary tensor container, manifests, masks, and media file helpers.

Tensor framing ("TAVLO-T4"): an 8-byte magic string, one dtype-code byte,
four little-endian uint32 dims, then the C-order little-endian payload.
Tensors of rank < 4 are stored with trailing singleton dims.

The keyed container used for checkpoints stores many framed tensors in one
file, each entry carrying its key and true rank so arbitrary-rank arrays
round-trip exactly.
"""

from __future__ import annotations

import json
import struct
import wave
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"TAVLO-T4"
CONTAINER_MAGIC = b"TAVLO-KV"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("uint8"): 4,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt == np.dtype(bool):
        dt = np.dtype("uint8")
    if dt not in _DTYPE_CODES:
        raise DataError(f"unsupported tensor dtype {arr.dtype}")
    return _DTYPE_CODES[dt]


def pack_tensor(arr: np.ndarray) -> bytes:
    """Serialize an array (rank <= 4) into a framed tensor block."""
    if arr.ndim > 4:
        raise DataError(f"tensor rank {arr.ndim} exceeds the 4-dim framing")
    code = _dtype_code(arr)
    arr4 = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code])
    dims = list(arr4.shape) + [1] * (4 - arr4.ndim)
    header = TENSOR_MAGIC + struct.pack("<B4I", code, *dims)
    return header + arr4.tobytes()


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Read one framed tensor starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 8] != TENSOR_MAGIC:
        raise DataError("bad tensor magic (expected TAVLO-T4)")
    code, d0, d1, d2, d3 = struct.unpack_from("<B4I", buf, offset + 8)
    if code not in _CODE_DTYPES:
        raise DataError(f"unknown tensor dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = d0 * d1 * d2 * d3
    start = offset + 8 + struct.calcsize("<B4I")
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise DataError("truncated tensor payload")
    arr = np.frombuffer(buf[start:end], dtype=dtype).reshape(d0, d1, d2, d3)
    return arr, end


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write one array to a standalone framed-tensor file."""
    Path(path).write_bytes(pack_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a standalone framed-tensor file (always rank 4)."""
    arr, _ = unpack_tensor(Path(path).read_bytes())
    return arr


def save_tensor_dict(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write a keyed-tensor container; keys are UTF-8, entries framed tensors."""
    parts = [CONTAINER_MAGIC, struct.pack("<I", len(tensors))]
    for key, arr in tensors.items():
        kb = key.encode("utf-8")
        if len(kb) > 0xFFFF:
            raise DataError(f"key too long: {key[:40]}...")
        arr = np.asarray(arr)
        parts.append(struct.pack("<HB", len(kb), arr.ndim))
        parts.append(kb)
        parts.append(pack_tensor(arr))
    Path(path).write_bytes(b"".join(parts))


def load_tensor_dict(path: str | Path) -> dict[str, np.ndarray]:
    """Read a keyed-tensor container, restoring each entry's original rank."""
    buf = Path(path).read_bytes()
    if buf[:8] != CONTAINER_MAGIC:
        raise DataError(f"{path}: bad container magic (expected TAVLO-KV)")
    (count,) = struct.unpack_from("<I", buf, 8)
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        klen, rank = struct.unpack_from("<HB", buf, offset)
        offset += 3
        key = buf[offset : offset + klen].decode("utf-8")
        offset += klen
        arr, offset = unpack_tensor(buf, offset)
        out[key] = arr.reshape(arr.shape[:rank] if rank > 0 else ())
    return out


# ---------------------------------------------------------------------------
# Line-delimited manifests and ground-truth records
# ---------------------------------------------------------------------------


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: bad record: {exc}") from exc
    return records


MANIFEST_FIELDS = (
    "clip_id",
    "media_path",
    "start_seconds",
    "selected_frame_indices",
    "event_peak_times",
)


def write_manifest(path: str | Path, records: Sequence[dict]) -> None:
    """Write clip manifest records, validating the required field set."""
    for rec in records:
        missing = [f for f in MANIFEST_FIELDS if f not in rec]
        if missing:
            raise DataError(f"manifest record {rec.get('clip_id')!r} missing {missing}")
    write_jsonl(path, records)


def read_manifest(path: str | Path) -> list[dict]:
    records = read_jsonl(path)
    for rec in records:
        missing = [f for f in MANIFEST_FIELDS if f not in rec]
        if missing:
            raise DataError(f"{path}: record {rec.get('clip_id')!r} missing {missing}")
    return records


# ---------------------------------------------------------------------------
# Run-length encoding for binary masks
# ---------------------------------------------------------------------------


def mask_to_rle(mask: np.ndarray) -> dict:
    """Encode a binary mask as alternating zero/one run lengths (row-major).

    The counts list always starts with the number of leading zeros (possibly
    zero) so decoding is unambiguous.
    """
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    counts: list[int] = []
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": counts}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    boundaries = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(boundaries).tolist()
    if flat[0]:
        counts.append(0)
    counts.extend(runs)
    return {"size": list(mask.shape), "counts": [int(c) for c in counts]}


def rle_to_mask(rle: dict) -> np.ndarray:
    """Decode a run-length record back to a boolean mask."""
    shape = tuple(rle["size"])
    total = int(np.prod(shape)) if shape else 0
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in rle["counts"]:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    if pos != total:
        raise DataError(f"run lengths cover {pos} of {total} pixels")
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# Media files: PCM audio, frame images, 16-bit heatmaps
# ---------------------------------------------------------------------------


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a single-channel PCM WAV file to float samples in [-1, 1]."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise DataError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        width = wf.getsampwidth()
        sr = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    if width == 2:
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 1:
        samples = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    else:
        raise DataError(f"{path}: unsupported sample width {width} bytes")
    return samples, sr


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1] to 16-bit mono PCM."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (clipped * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def load_frame_images(directory: str | Path) -> np.ndarray:
    """Load a directory of numbered images as a T x H x W x 3 float array in [0, 1]."""
    from PIL import Image

    paths = sorted(
        (p for p in Path(directory).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"}),
        key=lambda p: int("".join(ch for ch in p.stem if ch.isdigit()) or "0"),
    )
    if not paths:
        raise DataError(f"no frame images found in {directory}")
    frames = []
    for p in paths:
        with Image.open(p) as img:
            frames.append(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
    if any(f.shape != frames[0].shape for f in frames):
        raise DataError(f"{directory}: frame images disagree on size")
    return np.stack(frames)


def write_heatmap_png(path: str | Path, heatmap: np.ndarray, value_range: tuple[float, float] = (-1.0, 1.0)) -> None:
    """Write a heatmap as 16-bit grayscale; ``value_range`` maps to [0, 65535]."""
    from PIL import Image

    lo, hi = value_range
    scaled = (np.asarray(heatmap, dtype=np.float64) - lo) / (hi - lo)
    pix = np.clip(scaled * 65535.0, 0, 65535).round().astype(np.uint16)
    Image.fromarray(pix).save(str(path))


def read_heatmap_png(path: str | Path, value_range: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Read a 16-bit grayscale heatmap back to floats in ``value_range``."""
    from PIL import Image

    with Image.open(str(path)) as img:
        pix = np.asarray(img, dtype=np.float64)
    lo, hi = value_range
    return (pix / 65535.0) * (hi - lo) + lo
