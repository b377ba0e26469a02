"""Binary checkpoints with embedded JSON metadata and a trailing CRC.

Layout (all integers little-endian):

    8 bytes   magic ``TRAITCK1``
    u32       metadata length, then that many bytes of UTF-8 JSON
    u32       record count
    records   u16 name length, name bytes, u8 ndim, ndim x u32 dims,
              float64 payload in C order
    u32       CRC-32 of everything before it

Records are sorted by name so identical state always produces identical
bytes. The metadata carries the model configuration plus whatever the
caller adds (normalization statistics, split spec, training provenance),
which is what lets evaluation and visualization rebuild the exact
pipeline from one file.

Loading a checkpoint that lacks ``offset_conv`` parameters into a model
that has them zero-fills those - that is the weight transplant from a
standard-convolution model into its deformable counterpart.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CheckpointError
from .layers import Module

MAGIC = b"TRAITCK1"


def save_checkpoint(path: Path, model: Module, meta: Optional[dict] = None) -> None:
    doc = dict(meta or {})
    doc.setdefault("format_version", 1)
    meta_bytes = json.dumps(doc, sort_keys=True).encode("utf-8")
    state = model.state_arrays()
    parts = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(state)))
    for name in sorted(state):
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        # and would break shape round-tripping. 0-d arrays are always
        # contiguous; tobytes(order="C") handles the rest.
        arr = np.asarray(state[name], dtype="<f8")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob))
    Path(path).write_bytes(blob)


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: Path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Parse and CRC-verify a checkpoint into (meta, name -> array)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"truncated checkpoint: {path} holds {len(blob)} bytes")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    body, tail = blob[:-4], blob[-4:]
    stored_crc = struct.unpack("<I", tail)[0]
    if zlib.crc32(body) != stored_crc:
        raise CheckpointError(f"corrupt checkpoint {path}: CRC mismatch")
    cur = _Cursor(body)
    cur.take(len(MAGIC))
    meta_len = cur.u32()
    try:
        meta = json.loads(cur.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint metadata in {path}: {e}") from e
    n_records = cur.u32()
    state: Dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name = cur.take(cur.u16()).decode("utf-8")
        ndim = cur.u8()
        shape = tuple(cur.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(cur.take(count * 8), dtype="<f8").reshape(shape)
        state[name] = arr.astype(np.float64)
    if cur.pos != len(body):
        raise CheckpointError(
            f"checkpoint {path} has {len(body) - cur.pos} undeclared trailing bytes"
        )
    return meta, state


def apply_state(model: Module, state: Dict[str, np.ndarray]) -> None:
    """Copy a loaded state into a model, in place.

    Offset branches (``offset_conv.*``) are the one permitted asymmetry:
    absent from the state they zero-fill, which is the rigid-to-deformable
    transplant, and present without a target they are dropped, which is
    the lossy reverse conversion. Anything else missing, extra, or
    shape-mismatched raises with the offending names listed.
    """

    def _offset_branch(name: str) -> bool:
        return ".offset_conv." in name or name.startswith("offset_conv.")

    targets = model.state_arrays()
    missing, mismatched = [], []
    for name, arr in targets.items():
        if name in state:
            if state[name].shape != arr.shape:
                mismatched.append(
                    f"{name}: checkpoint {state[name].shape} vs model {arr.shape}"
                )
        elif _offset_branch(name):
            continue
        else:
            missing.append(name)
    extra = sorted(n for n in set(state) - set(targets) if not _offset_branch(n))
    problems = []
    if missing:
        problems.append(f"missing from checkpoint: {sorted(missing)}")
    if extra:
        problems.append(f"unknown in checkpoint: {extra}")
    if mismatched:
        problems.append(f"shape mismatches: {mismatched}")
    if problems:
        raise CheckpointError("; ".join(problems))
    for name, arr in targets.items():
        if name in state:
            arr[:] = state[name]
        else:
            arr[:] = 0.0


def save_model(path: Path, model, extra_meta: Optional[dict] = None) -> None:
    """Checkpoint a trait regressor together with its configuration."""
    meta = dict(extra_meta or {})
    meta["model"] = model.config.to_dict()
    save_checkpoint(path, model, meta)


def load_model(path: Path, conv_kind: Optional[str] = None):
    """Rebuild the model a checkpoint describes and load its state.

    ``conv_kind`` overrides the stored kind; loading a standard
    checkpoint with ``conv_kind="deformable"`` performs the weight
    transplant (offset branches start at zero).
    """
    from .models import ModelConfig, build_model

    meta, state = load_checkpoint(path)
    cfg_dict = meta.get("model")
    if not isinstance(cfg_dict, dict):
        raise CheckpointError(f"checkpoint {path} carries no model configuration")
    if conv_kind is not None:
        cfg_dict = {**cfg_dict, "conv_kind": conv_kind}
    model = build_model(ModelConfig.from_dict(cfg_dict))
    apply_state(model, state)
    return model, meta
