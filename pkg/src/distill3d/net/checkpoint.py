"""CKPT checkpoint files.

Layout: ``b"CKPT"``, u32 entry count, then per entry a u16 name length, the
UTF-8 name, u8 rank, ``rank`` u32 dimensions and the float64 values in
row-major order. Everything is little-endian.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, FormatError, MissingFileError
from .model import CLS_HEAD, PRE_HEAD, SEG_HEAD, NetConfig, SparseUNet

Checkpoint = "OrderedDict[str, np.ndarray]"


def encode_checkpoint(state) -> bytes:
    parts = [b"CKPT", struct.pack("<I", len(state))]
    for name, value in state.items():
        value = np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.astype("<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> "OrderedDict[str, np.ndarray]":
    if raw[:4] != b"CKPT":
        raise FormatError("not a CKPT file")
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        pos = 8
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            data = raw[pos:pos + 8 * size]
            if len(data) != 8 * size:
                raise FormatError(f"truncated values for {name}")
            pos += 8 * size
            out[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    except struct.error as exc:
        raise FormatError("truncated CKPT file") from exc
    if pos != len(raw):
        raise FormatError("trailing bytes after CKPT entries")
    return out


def save_checkpoint(path, state) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such checkpoint: {path}")
    return decode_checkpoint(path.read_bytes())


def infer_config(state, teacher_classes: int | None = None, task_classes: int | None = None) -> NetConfig:
    """Recover the network shape from checkpoint entry shapes."""
    try:
        w0 = state["enc0.conv.weight"]
    except KeyError as exc:
        raise CheckpointError("checkpoint has no encoder") from exc
    levels = sum(1 for k in state if k.startswith("enc") and k.endswith(".conv.weight"))
    base = w0.shape[2]
    if f"{PRE_HEAD}.weight" in state:
        teacher_classes = state[f"{PRE_HEAD}.weight"].shape[1]
    for head in (SEG_HEAD, CLS_HEAD):
        if f"{head}.weight" in state:
            task_classes = state[f"{head}.weight"].shape[1]
    kwargs = {}
    if teacher_classes is not None:
        kwargs["teacher_classes"] = teacher_classes
    if task_classes is not None:
        kwargs["task_classes"] = task_classes
    return NetConfig(levels=levels, base_channels=base, in_channels=w0.shape[1], **kwargs)


def model_from_state(state, seed: int = 0, **overrides) -> SparseUNet:
    """Build a model holding exactly the heads present in ``state``."""
    cfg = infer_config(state, **overrides)
    heads = [h for h in (SEG_HEAD, CLS_HEAD, PRE_HEAD) if f"{h}.weight" in state]
    model = SparseUNet(cfg, heads=heads, seed=seed)
    model.load_state(state)
    return model
