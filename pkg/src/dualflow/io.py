"""On-disk formats: O4D tensors, named-record checkpoints, TUM trajectories, ASCII PLY
and flat ``key=value`` text.

O4D layout: magic ``b"O4DT"``, one version byte, four little-endian uint32 dims
``(channels, frames, height, width)`` then the payload in that order. Version 1
stores float32 values. Version 2 is identical except for float64 values; it is
what 64-bit checkpoints use so that resuming is bit-exact.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np
import torch

MAGIC = b"O4DT"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEADER = struct.Struct("<4sB4I")


class FormatError(ValueError):
    pass


def _as_4d(t) -> np.ndarray:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if a.ndim > 4:
        raise FormatError(f"O4D tensors hold at most 4 dims, got {a.ndim}")
    return a.reshape((1,) * (4 - a.ndim) + a.shape)


def write_tensor(f: BinaryIO, t, version: int = 1) -> None:
    a = _as_4d(t)
    f.write(_HEADER.pack(MAGIC, version, *a.shape))
    f.write(np.ascontiguousarray(a, dtype=_DTYPES[version]).tobytes())


def read_tensor(f: BinaryIO) -> torch.Tensor:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated O4D header")
    magic, version, *dims = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version not in _DTYPES:
        raise FormatError(f"unsupported O4D version {version}")
    dtype = _DTYPES[version]
    n = int(np.prod(dims))
    raw = f.read(n * dtype.itemsize)
    if len(raw) != n * dtype.itemsize:
        raise FormatError("truncated O4D payload")
    a = np.frombuffer(raw, dtype=dtype).reshape(dims)
    return torch.from_numpy(a.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(path, t, version: int = 1) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t, version)


def load_tensor(path) -> torch.Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_records(path, records: Mapping[str, torch.Tensor], version: int = 1) -> None:
    """Checkpoint: per record a uint32 byte length, the UTF-8 name, then one O4D tensor.

    The original tensor shape is kept by the caller; records are restored with
    ``reshape`` against the live parameter they belong to.
    """
    with open(path, "wb") as f:
        for name, t in records.items():
            key = name.encode("utf-8")
            f.write(struct.pack("<I", len(key)))
            f.write(key)
            write_tensor(f, t, version)


def load_records(path) -> dict[str, torch.Tensor]:
    out = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated record name length")
            (n,) = struct.unpack("<I", head)
            name = f.read(n).decode("utf-8")
            out[name] = read_tensor(f)
    return out


def write_tum(path, centers, quats_xyzw) -> None:
    """One line per frame: ``index o_x o_y o_z q_x q_y q_z q_w``.

    Quaternions are camera-to-world, as TUM expects.
    """
    centers = np.asarray(centers, dtype=np.float64)
    quats_xyzw = np.asarray(quats_xyzw, dtype=np.float64)
    with open(path, "w") as f:
        for i, (o, q) in enumerate(zip(centers, quats_xyzw)):
            vals = " ".join(repr(float(v)) for v in (*o, *q))
            f.write(f"{i} {vals}\n")


def read_tum(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = [line.split() for line in Path(path).read_text().splitlines()
            if line.strip() and not line.lstrip().startswith("#")]
    a = np.array(rows, dtype=np.float64).reshape(-1, 8)
    return a[:, 0], a[:, 1:4], a[:, 4:8]


def write_ply(path, points, colors) -> None:
    """ASCII PLY with float xyz and uchar rgb per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors).reshape(-1, 3)
    colors = np.clip(np.rint(colors), 0, 255).astype(np.uint8)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for p, c in zip(points, colors):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    data = np.array([l.split() for l in lines[end + 1:]], dtype=np.float64).reshape(-1, 6)
    return data[:, :3], data[:, 3:].astype(np.uint8)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(items: Iterable[tuple[str, object]]) -> str:
    return "".join(f"{k}={v}\n" for k, v in items)
