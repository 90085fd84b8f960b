"""
Binary persistence for checkpoints and embedding dumps, plus table export.

Checkpoint layout:
    header    magic "TFCK", u32 format version, u64 metadata length
    metadata  YAML: config snapshot, epoch, optimizer step counts, extra
              state, and the name/shape of every blob in payload order
    payload   float64 little-endian blobs (parameters, then Adam moments)

Embedding layout:
    header    magic "TFEM", u32 version, u64 N, u64 d
    payload   N x d recipe rows, N x d image rows (float64), N pair ids (int64)
"""
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from modules.errors import FormatError
from modules.tensor import Tensor

CHECKPOINT_MAGIC = b"TFCK"
CHECKPOINT_VERSION = 1
EMBEDDING_MAGIC = b"TFEM"
EMBEDDING_VERSION = 1

_CHECKPOINT_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("meta_length", "<u8")])
_EMBEDDING_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("n", "<u8"), ("d", "<u8")])

_GROUPS = ("param", "adam_first", "adam_second")


@dataclass
class Checkpoint:
    format_version: int
    config: dict
    params: dict
    epoch: int
    optimizer: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def plain(value):
    """numpy scalars/arrays and tuples to YAML-safe builtins."""
    if isinstance(value, dict):
        return {str(k) if not isinstance(k, (int, str)) else k: plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def _write_atomic(path, chunks):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp_path, path)


# ==============================
#  Checkpoints
# ==============================
def save_checkpoint(path, params, optimizer, epoch, config, extra=None):
    blobs = [(f"param/{name}", p.data) for name, p in params.items()]
    state = optimizer.state() if optimizer is not None else {"first": {}, "second": {}, "steps": {}}
    blobs += [(f"adam_first/{name}", m) for name, m in state["first"].items()]
    blobs += [(f"adam_second/{name}", v) for name, v in state["second"].items()]

    meta = {
        "config": plain(config),
        "epoch": int(epoch),
        "optimizer_steps": plain(state["steps"]),
        "extra": plain(extra or {}),
        "tensors": [{"name": name, "shape": list(array.shape)} for name, array in blobs],
    }
    meta_bytes = yaml.safe_dump(meta, sort_keys=False).encode("utf-8")
    header = np.zeros(1, dtype=_CHECKPOINT_HEADER)
    header["magic"], header["version"], header["meta_length"] = CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta_bytes)

    _write_atomic(path, [header.tobytes(), meta_bytes] + [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blobs])
    logging.info(f"Saved checkpoint for epoch {epoch} ({len(params)} parameter tensors) to {path}")
    return path


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    header_size = _CHECKPOINT_HEADER.itemsize
    if len(raw) < header_size:
        raise FormatError(f"{path} is too short for a checkpoint header", len(raw))
    header = np.frombuffer(raw, dtype=_CHECKPOINT_HEADER, count=1)[0]
    if header["magic"] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint (magic {header['magic']!r})", 0)
    if header["version"] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {int(header['version'])}", 4)

    meta_end = header_size + int(header["meta_length"])
    if meta_end > len(raw):
        raise FormatError("checkpoint metadata block is truncated", len(raw))
    try:
        meta = yaml.safe_load(raw[header_size:meta_end].decode("utf-8"))
        entries = meta["tensors"]
    except (yaml.YAMLError, UnicodeDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable checkpoint metadata: {e}", header_size)

    groups = {group: {} for group in _GROUPS}
    offset = meta_end
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > len(raw):
            raise FormatError(f"tensor {entry['name']} is truncated", offset)
        array = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        group, _, name = entry["name"].partition("/")
        if group not in groups:
            raise FormatError(f"unknown tensor group {group!r}", offset)
        groups[group][name] = array
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after the last tensor", offset)

    return Checkpoint(
        format_version=int(header["version"]),
        config=meta.get("config") or {},
        params=groups["param"],
        epoch=int(meta.get("epoch", 0)),
        optimizer={
            "first": groups["adam_first"],
            "second": groups["adam_second"],
            "steps": meta.get("optimizer_steps") or {},
        },
        extra=meta.get("extra") or {},
    )


def params_from_checkpoint(checkpoint):
    return {name: Tensor(array, requires_grad=True) for name, array in checkpoint.params.items()}


# ==============================
#  Embedding dumps
# ==============================
def write_embeddings(path, E_R, E_I, pair_ids):
    E_R, E_I = np.asarray(E_R, dtype="<f8"), np.asarray(E_I, dtype="<f8")
    pair_ids = np.asarray(pair_ids, dtype="<i8")
    if E_R.shape != E_I.shape or E_R.ndim != 2 or len(pair_ids) != E_R.shape[0]:
        raise FormatError(f"inconsistent embedding shapes {E_R.shape}, {E_I.shape} and {len(pair_ids)} ids")
    header = np.zeros(1, dtype=_EMBEDDING_HEADER)
    header["magic"], header["version"] = EMBEDDING_MAGIC, EMBEDDING_VERSION
    header["n"], header["d"] = E_R.shape
    _write_atomic(path, [header.tobytes(), E_R.tobytes(), E_I.tobytes(), pair_ids.tobytes()])
    logging.info(f"Exported {E_R.shape[0]} embedding pairs (d={E_R.shape[1]}) to {path}")
    return path


def read_embeddings(path):
    with open(path, "rb") as f:
        raw = f.read()
    header_size = _EMBEDDING_HEADER.itemsize
    if len(raw) < header_size:
        raise FormatError(f"{path} is too short for an embedding header", len(raw))
    header = np.frombuffer(raw, dtype=_EMBEDDING_HEADER, count=1)[0]
    if header["magic"] != EMBEDDING_MAGIC:
        raise FormatError(f"{path} is not an embedding file (magic {header['magic']!r})", 0)
    if header["version"] != EMBEDDING_VERSION:
        raise FormatError(f"unsupported embedding file version {int(header['version'])}", 4)
    n, d = int(header["n"]), int(header["d"])
    expected = header_size + 2 * n * d * 8 + n * 8
    if len(raw) != expected:
        raise FormatError(f"embedding payload has {len(raw) - header_size} bytes, header promises {expected - header_size}",
                          min(len(raw), expected))
    offset = header_size
    E_R = np.frombuffer(raw, dtype="<f8", count=n * d, offset=offset).reshape(n, d).copy()
    offset += n * d * 8
    E_I = np.frombuffer(raw, dtype="<f8", count=n * d, offset=offset).reshape(n, d).copy()
    offset += n * d * 8
    pair_ids = np.frombuffer(raw, dtype="<i8", count=n, offset=offset).copy()
    return E_R, E_I, pair_ids


# ==============================
#  Tables
# ==============================
def write_table(df, path):
    """xlsx via openpyxl, .json as records, anything else as CSV."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if path.endswith(".xlsx"):
        df.to_excel(path, index=False, engine="openpyxl")
    elif path.endswith(".json"):
        df.to_json(path, orient="records", lines=True)
    else:
        df.to_csv(path, index=False)
    logging.info(f"Exported {len(df)} rows to {path}")
    return path
