"""On-disk formats: flat binary tensors, PPM/PGM images, key=value configs and
attention-map dumps."""
from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .control import AttentionStore, max_normalize
from .scenegen import render_frame_image

TENSOR_MAGIC = b"VP2P"
TENSOR_VERSION = 1
MAX_RANK = 16
MAX_ELEMENTS = 1 << 40
# layout (little-endian): magic | u32 version | u32 rank | u64 dims[rank] | f64 payload
_PREFIX = struct.Struct("<4sII")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


class ConfigError(ValueError):
    pass


def encode_tensor(tensor) -> bytes:
    arr = np.array(tensor, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    if arr.ndim > MAX_RANK:
        raise DimOverflowError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    head = _PREFIX.pack(TENSOR_MAGIC, TENSOR_VERSION, arr.ndim)
    return head + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()


def decode_tensor(raw: bytes) -> np.ndarray:
    if len(raw) < 4 or raw[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"bad magic {bytes(raw[:4])!r}, expected {TENSOR_MAGIC!r}")
    if len(raw) < _PREFIX.size:
        raise TruncatedError("header shorter than the fixed prefix")
    _, version, rank = _PREFIX.unpack_from(raw)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if rank > MAX_RANK:
        raise DimOverflowError(f"rank {rank} exceeds {MAX_RANK}")
    end = _PREFIX.size + 8 * rank
    if len(raw) < end:
        raise TruncatedError("header ends inside the dimension list")
    dims = struct.unpack_from(f"<{rank}Q", raw, _PREFIX.size)
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimOverflowError(f"dims {dims} describe more than {MAX_ELEMENTS} elements")
    if len(raw) - end != 8 * count:
        raise TruncatedError(f"payload holds {len(raw) - end} bytes, dims {dims} need {8 * count}")
    return np.reshape(np.frombuffer(raw, dtype="<f8", offset=end).astype(np.float64), dims)


def write_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- images ------------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) uint8 image, got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise FormatError(f"PGM needs an (H, W) uint8 image, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def write_clip_images(directory, video: np.ndarray, stem: str) -> list[str]:
    """One PPM per frame; returns the file names."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(video):
        name = f"{stem}_{i:03d}.ppm"
        write_ppm(out / name, render_frame_image(frame))
        names.append(name)
    return names


# -- configs -----------------------------------------------------------------

def _parse_value(key: str, text: str, kind: type):
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def parse_config_text(text: str, types: dict[str, type]) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Unknown or repeated
    keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, value, types[key])
    return out


def load_config(path, cls):
    """Build a dataclass ``cls`` from a key=value file."""
    types = {f.name: type(f.default) for f in fields(cls)}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        return cls(**parse_config_text(text, types))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def format_config(config) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


# -- attention dumps -----------------------------------------------------------

def decile_steps(steps: list[int]) -> list[int]:
    """Ten (or fewer) recorded steps spread evenly over denoising order."""
    ordered = sorted(steps, reverse=True)
    picks = np.linspace(0, len(ordered) - 1, min(10, len(ordered)))
    return sorted({ordered[int(round(p))] for p in picks}, reverse=True)


def export_attention(directory, store: AttentionStore, words: list[str]) -> Path:
    """Write max-normalized maps as PGM images, one per (word, frame, decile
    step), plus ``index.tsv`` listing them."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["word_index\tword\tframe\tt\tfile"]
    for t in decile_steps(store.steps()):
        for frame in store.frames():
            maps = store.get(t, frame)  # (S, L)
            grid = maps.T.reshape(len(words), *store.grid)
            norm = max_normalize(grid, 2)
            for wi, word in enumerate(words):
                name = f"w{wi:02d}_{word}_f{frame:03d}_t{t:03d}.pgm"
                write_pgm(out / name, np.rint(255 * norm[wi]).astype(np.uint8))
                rows.append(f"{wi}\t{word}\t{frame}\t{t}\t{name}")
    index = out / "index.tsv"
    index.write_text("\n".join(rows) + "\n")
    return index
