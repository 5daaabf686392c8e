"""File formats: SGT1 tensors, binary PGM masks and npz checkpoints.

SGT1 layout (little endian): magic ``b"SGT1"``, ``u32`` rank, ``rank`` x ``u32``
dims, then the float32 payload in C order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGT1"


class FormatError(ValueError):
    pass


def encode_sgt(array) -> bytes:
    a = np.asarray(array, dtype="<f4", order="C")
    if not np.isfinite(a).all():
        raise FormatError("SGT1 payload must be finite")
    return MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def decode_sgt(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError("missing SGT1 magic")
    if len(blob) < 8:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * rank
    if len(blob) < head:
        raise FormatError("truncated shape")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != head + 4 * count:
        raise FormatError(f"payload has {len(blob) - head} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(shape).copy()


def write_sgt(path, array) -> None:
    Path(path).write_bytes(encode_sgt(array))


def read_sgt(path) -> np.ndarray:
    return decode_sgt(Path(path).read_bytes())


def write_pgm(path, mask) -> None:
    """Binary mask as 8-bit P5 with values 0/255."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise FormatError("PGM masks are 2D")
    h, w = m.shape
    data = np.where(m.astype(bool), 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 image; returns a boolean mask (value >= 128)."""
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise FormatError("only binary P5 PGM is supported")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported")
    pos += 1
    if len(blob) - pos < w * h:
        raise FormatError("truncated PGM payload")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w) >= (maxval + 1) // 2


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Parameters in an uncompressed npz; ``meta`` is stored as a JSON string."""
    arrays = {f"p/{k}": np.asarray(v, np.float64) for k, v in params.items()}
    arrays["meta"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
        meta = json.loads(str(z["meta"])) if "meta" in z.files else {}
    return params, meta
