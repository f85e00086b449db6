"""Named weight checkpoints and inference-input loading.

The container is a small versioned binary format: magic "FALC", u32
version, u32 entry count, then per entry a u32 name length, the UTF-8
name, a u32 rank, u32 extents, and raw little-endian float32 data. Round
trips are byte exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .ops import as_f32

__all__ = [
    "StoreError",
    "WeightStore",
    "save_weights",
    "load_weights",
    "read_ppm",
    "load_input_tensor",
]

MAGIC = b"FALC"
VERSION = 1
_MAX_RANK = 8


class StoreError(ValueError):
    """Malformed weight file or missing/duplicate entry."""


class WeightStore:
    """Ordered mapping of dotted names to float32 arrays."""

    def __init__(self, entries=None):
        self._entries: dict[str, np.ndarray] = {}
        if entries is not None:
            for name, arr in (entries.items() if hasattr(entries, "items") else entries):
                self.put(name, arr)

    def put(self, name: str, array) -> None:
        if name in self._entries:
            raise StoreError(f"duplicate entry name '{name}'")
        arr = np.ascontiguousarray(as_f32(array))
        if arr.ndim > _MAX_RANK:
            raise StoreError(f"entry '{name}' has rank {arr.ndim}, maximum is {_MAX_RANK}")
        self._entries[name] = arr

    def get(self, name: str) -> np.ndarray:
        try:
            return self._entries[name]
        except KeyError:
            raise StoreError(f"missing weight entry '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def equals_bitwise(self, other: "WeightStore") -> bool:
        if self.names() != other.names():
            return False
        return all(a.shape == other.get(n).shape and a.tobytes() == other.get(n).tobytes()
                   for n, a in self.items())


def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(store)))
        for name, arr in store.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_weights(path) -> WeightStore:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise StoreError("truncated weight file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic = take(4)
    if magic != MAGIC:
        raise StoreError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise StoreError(f"unsupported weight file version {version}")
    store = WeightStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        if name_len > 1 << 16:
            raise StoreError(f"implausible name length {name_len}")
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise StoreError(f"undecodable entry name: {e}") from None
        (rank,) = struct.unpack("<I", take(4))
        if rank > _MAX_RANK:
            raise StoreError(f"entry '{name}' has rank {rank}, maximum is {_MAX_RANK}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = 1
        for d in shape:
            size *= d
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
        if name in store:
            raise StoreError(f"duplicate entry name '{name}'")
        store.put(name, arr)
    if pos != len(data):
        raise StoreError(f"{len(data) - pos} trailing bytes after last entry")
    return store


def _read_ppm_tokens(data: bytes, count: int, pos: int):
    """Read whitespace-separated header tokens, skipping # comments."""
    tokens = []
    while len(tokens) < count:
        if pos >= len(data):
            raise StoreError("truncated image header")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    return tokens, pos


def read_ppm(path) -> np.ndarray:
    """Decode an 8-bit PPM (binary P6 or ASCII P3) into (H, W, 3) uint8."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] not in (b"P6", b"P3"):
        raise StoreError(f"not a PPM image (magic {data[:2]!r})")
    binary = data[:2] == b"P6"
    tokens, pos = _read_ppm_tokens(data, 3, 2)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise StoreError("malformed PPM header") from None
    if width <= 0 or height <= 0:
        raise StoreError(f"bad PPM extents {width}x{height}")
    if not 0 < maxval <= 255:
        raise StoreError(f"only 8-bit PPM supported, maxval={maxval}")
    n = width * height * 3
    if binary:
        pos += 1  # single whitespace after maxval
        if len(data) - pos < n:
            raise StoreError("truncated PPM pixel data")
        pixels = np.frombuffer(data[pos:pos + n], dtype=np.uint8)
    else:
        values, _ = _read_ppm_tokens(data, n, pos)
        pixels = np.array([int(v) for v in values], dtype=np.uint8)
    return pixels.reshape(height, width, 3)


def _nearest_resize(img: np.ndarray, resolution: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(resolution) * h) // resolution
    cols = (np.arange(resolution) * w) // resolution
    return img[rows][:, cols]


def load_input_tensor(path, resolution: int) -> np.ndarray:
    """Load a (1, 3, resolution, resolution) float32 input.

    PPM images are scaled to [0, 1] and resized by nearest neighbor; weight
    containers must hold a single rank-4 entry named "input" that already
    matches the target shape.
    """
    with open(path, "rb") as f:
        head = f.read(2)
    if head in (b"P6", b"P3"):
        img = read_ppm(path).astype(np.float32) / 255.0
        img = _nearest_resize(img, resolution)
        return np.ascontiguousarray(img.transpose(2, 0, 1)[None])
    store = load_weights(path)
    if "input" not in store:
        raise StoreError('input container must hold an entry named "input"')
    x = store.get("input")
    if x.ndim != 4 or x.shape[1] != 3:
        raise StoreError(f'"input" entry must be rank 4 with 3 channels, got shape {x.shape}')
    if x.shape[2] != resolution or x.shape[3] != resolution:
        raise StoreError(
            f'"input" entry is {x.shape[2]}x{x.shape[3]}, model expects '
            f"{resolution}x{resolution}")
    return x
