"""Binary wire formats shared with the training artifact.

RCPTS1: magic "RCPTS1", u32 LE point count, N x 3 float32 LE coordinates.
RCEMB1: magic "RCEMB1", u32 LE dim, u32 LE record count, then per record
        [u16 LE id byte length, UTF-8 id, dim x float32 LE].

Implemented here independently; the byte layout is the contract.
"""

import struct

import numpy as np

RCPTS_MAGIC = b"RCPTS1"
RCEMB_MAGIC = b"RCEMB1"


class FormatError(Exception):
    pass


def read_rcpts(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != RCPTS_MAGIC:
        raise FormatError(f"{path}: bad RCPTS1 magic")
    if len(blob) < 10:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", blob, 6)
    payload = blob[10:]
    if len(payload) != n * 12:
        raise FormatError(f"{path}: expected {n * 12} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, 3).copy()


def write_rcemb(path, dim: int, records):
    """records: iterable of (id, vector); written in input order."""
    records = list(records)
    with open(path, "wb") as f:
        f.write(RCEMB_MAGIC)
        f.write(struct.pack("<II", dim, len(records)))
        for rid, vec in records:
            raw = rid.encode("utf-8")
            arr = np.ascontiguousarray(vec, dtype="<f4")
            if arr.shape != (dim,):
                raise FormatError(f"record {rid!r}: shape {arr.shape} != ({dim},)")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(arr.tobytes())


def read_rcemb(path):
    """Parse RCEMB1 back into (dim, ordered list of (id, vector)); used by
    the exporter's own round-trip tests."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != RCEMB_MAGIC:
        raise FormatError(f"{path}: bad RCEMB1 magic")
    dim, count = struct.unpack_from("<II", blob, 6)
    off = 14
    out = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        rid = blob[off : off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
        off += dim * 4
        out.append((rid, vec))
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return dim, out
