"""Versioned binary container for parameter groups.

Layout (all integers little-endian):
    magic "SLMF" | u32 format version | u16 digest len + digest utf8
    | u32 meta len + meta JSON utf8 | u32 entry count | entries.
Each entry: u16 name len + name utf8 | u8 ndim | ndim * u32 dims
    | float32 payload. Entry names are "group/param"; optimizer moments
    are stored under the reserved "__opt__/" prefix so checkpoints resume
    mid-training. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .numerics import ParamGroup, Tensor

MAGIC = b"SLMF"
FORMAT_VERSION = 1
OPT_PREFIX = "__opt__"


def config_digest(config_dict: dict) -> str:
    """Stable sha256 over a canonical JSON rendering of a config."""
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _encode_entry(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<B", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b""
    return head + data.tobytes()


def serialize_group(group: ParamGroup) -> bytes:
    """Byte-level rendering of one group; used by freeze bit-identity checks."""
    return b"".join(
        _encode_entry(f"{group.name}/{pname}", t.data) for pname, t in group.tensors.items()
    )


def save_checkpoint(
    path,
    groups: list[ParamGroup],
    digest: str,
    meta: dict | None = None,
    include_optimizer: bool = True,
) -> None:
    meta = dict(meta or {})
    meta["frozen"] = {g.name: g.frozen for g in groups}
    meta["adam_t"] = {
        f"{g.name}/{p}": t.adam_t for g in groups for p, t in g.tensors.items() if t.adam_t
    }
    entries: list[tuple[str, np.ndarray]] = []
    for g in groups:
        for pname, t in g.tensors.items():
            entries.append((f"{g.name}/{pname}", t.data))
            if include_optimizer and t.adam_m is not None:
                entries.append((f"{OPT_PREFIX}/{g.name}/{pname}/m", t.adam_m))
                entries.append((f"{OPT_PREFIX}/{g.name}/{pname}/v", t.adam_v))

    digest_b = digest.encode("utf-8")
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<H", len(digest_b)),
        digest_b,
        struct.pack("<I", len(meta_b)),
        meta_b,
        struct.pack("<I", len(entries)),
    ]
    blob.extend(_encode_entry(n, a) for n, a in entries)
    Path(path).write_bytes(b"".join(blob))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Return (digest, meta, entries). Entries map 'group/param' -> float32 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (dlen,) = struct.unpack_from("<H", raw, off)
    off += 2
    digest = raw[off : off + dlen].decode("utf-8")
    off += dlen
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off : off + mlen].decode("utf-8"))
    off += mlen
    (n_entries,) = struct.unpack_from("<I", raw, off)
    off += 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        entries[name] = arr.copy()
    return digest, meta, entries


def restore_groups(groups: list[ParamGroup], entries: dict[str, np.ndarray], meta: dict) -> None:
    """Load weights (and optimizer moments, if present) into existing groups."""
    frozen = meta.get("frozen", {})
    adam_t = meta.get("adam_t", {})
    for g in groups:
        for pname, t in g.tensors.items():
            key = f"{g.name}/{pname}"
            if key not in entries:
                raise CheckpointError(f"checkpoint missing entry {key!r}")
            arr = entries[key]
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {key}: checkpoint {arr.shape} vs model {t.data.shape}"
                )
            t.data = arr.astype(np.float32)
            mkey = f"{OPT_PREFIX}/{key}/m"
            if mkey in entries:
                t.adam_m = entries[mkey].astype(np.float32)
                t.adam_v = entries[f"{OPT_PREFIX}/{key}/v"].astype(np.float32)
            t.adam_t = int(adam_t.get(key, 0))
        if g.name in frozen:
            g.set_frozen(frozen[g.name])
