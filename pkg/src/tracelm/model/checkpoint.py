"""Binary model checkpoints.

Layout (all little-endian): magic ``ALCK``, u32 version, u32 length-prefixed
UTF-8 JSON header (config + vocab hash), u64 tensor count, then per tensor:
u16 name length, name bytes, u8 dtype code (0 = f32, 1 = f64), u8 rank,
rank x u64 dims, raw tensor data.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import IO

import numpy as np

from .config import ModelConfig
from .transformer import ModelState, VocabMismatchError

CHECKPOINT_MAGIC = b"ALCK"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint data."""


def write_container(sink: IO[bytes], header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Low-level writer shared by model and training checkpoints."""
    encoded_header = json.dumps(header, sort_keys=True).encode("utf-8")
    sink.write(CHECKPOINT_MAGIC)
    sink.write(struct.pack("<I", CHECKPOINT_VERSION))
    sink.write(struct.pack("<I", len(encoded_header)))
    sink.write(encoded_header)
    names = sorted(tensors)
    sink.write(struct.pack("<Q", len(names)))
    for name in names:
        tensor = np.ascontiguousarray(tensors[name])
        dtype = tensor.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {tensor.dtype}")
        encoded = name.encode("utf-8")
        sink.write(struct.pack("<H", len(encoded)))
        sink.write(encoded)
        sink.write(struct.pack("<BB", _DTYPE_CODES[dtype], tensor.ndim))
        sink.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        sink.write(tensor.astype(dtype, copy=False).tobytes())


def save_checkpoint(state: ModelState, sink: IO[bytes] | str | Path) -> None:
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as handle:
            save_checkpoint(state, handle)
        return
    header = {"config": asdict(state.config), "vocab_hash": f"{state.vocab_hash:016x}"}
    write_container(sink, header, state.params)


def _read_exact(source: IO[bytes], n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def read_container(
    source: IO[bytes] | str | Path | bytes,
) -> tuple[dict, dict[str, np.ndarray]]:
    """Low-level reader; returns the JSON header and every tensor."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as handle:
            return read_container(handle)
    if isinstance(source, bytes):
        return read_container(io.BytesIO(source))

    if _read_exact(source, 4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a model checkpoint")
    (version,) = struct.unpack("<I", _read_exact(source, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", _read_exact(source, 4, "header length"))
    try:
        header = json.loads(_read_exact(source, header_len, "header"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    (n_tensors,) = struct.unpack("<Q", _read_exact(source, 8, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", _read_exact(source, 2, "tensor name length"))
        name = _read_exact(source, name_len, "tensor name").decode("utf-8")
        code, rank = struct.unpack("<BB", _read_exact(source, 2, "tensor dtype/rank"))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", _read_exact(source, 8 * rank, "tensor dims"))
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        raw = _read_exact(source, n_bytes, f"tensor {name} data")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return header, tensors


def state_from_container(
    header: dict,
    tensors: dict[str, np.ndarray],
    expected_vocab_hash: int | None = None,
) -> ModelState:
    try:
        config = ModelConfig(**header["config"])
        vocab_hash = int(header["vocab_hash"], 16)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
        raise VocabMismatchError(
            f"checkpoint built for vocab {vocab_hash:016x}, expected {expected_vocab_hash:016x}"
        )
    params = {name: t for name, t in tensors.items() if not name.startswith("optim.")}
    if not all(np.isfinite(p).all() for p in params.values()):
        raise CheckpointError("checkpoint contains non-finite parameters")
    return ModelState(config=config, params=params, vocab_hash=vocab_hash)


def load_checkpoint(
    source: IO[bytes] | str | Path | bytes,
    expected_vocab_hash: int | None = None,
) -> ModelState:
    """Load a model checkpoint; no partial state escapes on error.

    With ``expected_vocab_hash`` set, a mismatching checkpoint is refused.
    Optimizer tensors inside a training checkpoint are ignored here.
    """
    header, tensors = read_container(source)
    return state_from_container(header, tensors, expected_vocab_hash)
