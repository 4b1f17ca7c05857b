"""Video clips and their bit-exact binary container format.

Container layout (little-endian throughout):

    bytes 0..15   magic + version, ASCII ``COMUNI.CLIP.v01\\n``
    bytes 16..31  four uint32 dims: T, H, W, C
    bytes 32..    row-major float32 payload, T*H*W*C values

The same container is reused for latent tensors and attention maps by
reinterpreting the four dims, via :func:`write_array` / :func:`read_array`.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ClipFormatError, DimensionRangeError, ShapeError

MAGIC = b"COMUNI.CLIP.v01\n"
_HEADER = struct.Struct("<4I")
_MAX_DIM = 2**32 - 1
_MAX_ELEMENTS = 2**31  # refuse absurd payloads before allocating


@dataclass
class VideoClip:
    """A T x H x W x C stack of frames with values in [0, 1]."""

    frames: np.ndarray
    fps: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"frames must be 4-D (T,H,W,C), got shape {arr.shape}")
        t, h, w, c = arr.shape
        if t < 1:
            raise ShapeError("clip must contain at least one frame")
        if c != 3:
            raise ShapeError(f"clip must have 3 channels, got {c}")
        if not np.isfinite(arr).all():
            raise ShapeError("clip contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ShapeError("clip values must lie in [0, 1]")
        if self.fps is not None and self.fps <= 0:
            raise ShapeError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 4:
        raise ShapeError(f"container payload must be 4-D, got shape {arr.shape}")
    if any(d > _MAX_DIM for d in arr.shape):
        raise DimensionRangeError(f"dimension exceeds uint32 range: {arr.shape}")
    if arr.size > _MAX_ELEMENTS:
        raise DimensionRangeError(f"payload of {arr.size} elements exceeds limit")
    dims = _HEADER.pack(*arr.shape)
    payload = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
    return MAGIC + dims + payload


def decode_array(blob: bytes) -> np.ndarray:
    if len(blob) < len(MAGIC) + _HEADER.size:
        raise ClipFormatError("file too short for container header")
    if blob[: len(MAGIC)] != MAGIC:
        raise ClipFormatError("bad magic bytes; not a clip container")
    dims = _HEADER.unpack_from(blob, len(MAGIC))
    count = int(np.prod([int(d) for d in dims], dtype=np.int64))
    if count > _MAX_ELEMENTS:
        raise DimensionRangeError(f"header declares {count} elements, over limit")
    expected = len(MAGIC) + _HEADER.size + 4 * count
    if len(blob) != expected:
        raise ClipFormatError(
            f"payload size mismatch: expected {expected} bytes, got {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=len(MAGIC) + _HEADER.size)
    return flat.reshape(dims).astype(np.float32)


def write_array(arr: np.ndarray, path: str | Path) -> None:
    """Store any 4-D float array in the clip container (dims reinterpreted)."""
    atomic_write_bytes(path, encode_array(arr))


def read_array(path: str | Path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def write_clip(clip: VideoClip, path: str | Path) -> None:
    write_array(clip.frames, path)


def read_clip(path: str | Path) -> VideoClip:
    return VideoClip(frames=read_array(path))


# -- dataset directory layout ----------------------------------------------
#
#   <root>/<index:06d>.clip      one container per clip
#   <root>/manifest.txt          "<index> <key=value> <key=value> ..." lines

def clip_path(root: str | Path, index: int) -> Path:
    return Path(root) / f"{index:06d}.clip"


def save_dataset(root: str | Path, clips, params_lines) -> None:
    """Write clips plus a manifest mapping index -> scene parameter line."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (clip, params_text) in enumerate(zip(clips, params_lines)):
        write_clip(clip, clip_path(root, i))
        lines.append(f"{i:06d} {params_text}")
    atomic_write_bytes(root / "manifest.txt", ("\n".join(lines) + "\n").encode())


def load_dataset(root: str | Path) -> list[VideoClip]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise ClipFormatError(f"no manifest.txt under {root}")
    clips = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        index = int(line.split()[0])
        clips.append(read_clip(clip_path(root, index)))
    return clips


def load_manifest_params(root: str | Path) -> list[str]:
    """Raw parameter text per clip, in manifest order."""
    lines = []
    for line in (Path(root) / "manifest.txt").read_text().splitlines():
        if line.strip():
            lines.append(line.split(" ", 1)[1] if " " in line else "")
    return lines
