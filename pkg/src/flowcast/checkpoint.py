"""Flat binary checkpoints: a plain-text header followed by raw float64 data.

Layout::

    FLOWCAST-CKPT 1
    meta <key>=<value>          (zero or more)
    array <name> <shape> <offset>
    ...
    end
    <little-endian float64 payload>

``shape`` is comma separated (``-`` for a scalar) and ``offset`` counts bytes
from the start of the payload.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "FLOWCAST-CKPT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        if "\n" in f"{k}{v}" or "=" in str(k):
            raise CheckpointError(f"bad meta entry {k!r}")
        lines.append(f"meta {k}={v}")
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"bad array name {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f8")
        shape = ",".join(map(str, a.shape)) or "-"
        lines.append(f"array {name} {shape} {offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return (arrays, meta)."""
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = raw[:cut].decode("utf-8").split("\n")[1:]
    payload = memoryview(raw)[cut + len(marker):]
    arrays, meta = {}, {}
    for lineno, line in enumerate(header, start=2):
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            k, _, v = rest.partition("=")
            meta[k] = v
            continue
        if kind != "array":
            raise CheckpointError(f"{path}: line {lineno}: unexpected {line!r}")
        name, shape_s, off_s = rest.split(" ")
        shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
        off = int(off_s)
        count = int(np.prod(shape, dtype=np.int64))
        if off + 8 * count > len(payload):
            raise CheckpointError(f"{path}: array {name} runs past the end of the file")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
    return arrays, meta
