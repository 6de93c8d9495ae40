"""Binary tensor container and CSV export.

Single tensor record::

    b"TAPE" | version u16 | rank u16 | dims u64 * rank | payload f64 * prod(dims)

all little endian. A named archive (checkpoints, dataset caches) is::

    b"TAPA" | version u16 | header_len u32 | header utf-8 (key=value lines)
    | count u32 | count * (name_len u16 | name utf-8 | tensor record)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"TAPE"
ARCHIVE_MAGIC = b"TAPA"
VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote rank 0 to rank 1
    fh.write(MAGIC)
    fh.write(struct.pack("<HH", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<HH", _read_exact(fh, 4))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated tensor file")
    return data


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_archive(path, tensors: Mapping[str, np.ndarray], header: Mapping[str, str] | None = None) -> None:
    text = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode()
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            write_tensor(fh, arr)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        if fh.read(4) != ARCHIVE_MAGIC:
            raise FormatError(f"{path}: not a tensor archive")
        version, hlen = struct.unpack("<HI", _read_exact(fh, 6))
        if version != VERSION:
            raise FormatError(f"unsupported archive version {version}")
        header = {}
        for line in _read_exact(fh, hlen).decode().splitlines():
            key, _, value = line.partition("=")
            header[key] = value
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode()
            tensors[name] = read_tensor(fh)
    return tensors, header


def write_csv(path, arr: np.ndarray, row_labels=None, col_labels=None, fmt: str = "%.17g") -> None:
    """Write a rank <= 2 array as CSV, optionally with a header row/column."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 2:
        raise ValueError(f"CSV export supports rank <= 2, got rank {arr.ndim}")
    arr = np.atleast_2d(arr)
    lines = []
    if col_labels is not None:
        head = ([""] if row_labels is not None else []) + [str(c) for c in col_labels]
        lines.append(",".join(head))
    for i, row in enumerate(arr):
        cells = [fmt % v for v in row]
        if row_labels is not None:
            cells.insert(0, str(row_labels[i]))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv_grid(path) -> tuple[list[str], list[str], np.ndarray]:
    """Inverse of :func:`write_csv` with both label sets present."""
    rows = [line.split(",") for line in Path(path).read_text().strip().splitlines()]
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    values = np.array([[float(c) for c in r[1:]] for r in rows[1:]])
    return labels, cols, values
