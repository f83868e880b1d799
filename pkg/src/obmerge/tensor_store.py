"""Checkpoint container I/O and elementwise tensor math.

Container layout (safetensors-compatible):

* bytes 0..7   unsigned 64-bit little-endian header length N
* bytes 8..8+N UTF-8 JSON header mapping tensor names to
  ``{"dtype": "F32"|"F16"|"BF16", "shape": [...], "data_offsets": [begin, end]}``,
  plus an optional ``"__metadata__"`` string-to-string map
* remainder    concatenated little-endian payloads; ``data_offsets`` are
  relative to the end of the header and must be non-overlapping and in bounds

Everything is widened to float32 on load and all arithmetic runs in
float32; the dtype a tensor had on disk is kept as provenance. The writer
is canonical (sorted names, compact JSON, payloads packed in name order),
so serializing a checkpoint value twice yields byte-identical files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ContainerError, ShapeMismatch

HEADER_LIMIT = 100_000_000  # bytes of JSON header a file may declare

_DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}


def _widen(dtype: str, raw: bytes) -> np.ndarray:
    """Decode a little-endian payload to the float32 values it denotes."""
    if dtype == "F32":
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if dtype == "F16":
        return np.frombuffer(raw, dtype="<f2").astype(np.float32)
    if dtype == "BF16":
        # bfloat16 is the top half of the float32 bit pattern
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
        return bits.view(np.float32).astype(np.float32)
    raise ContainerError(f"unsupported dtype '{dtype}'")


@dataclass(eq=False)
class Tensor:
    """A named row-major float32 array plus the dtype it was stored as."""

    name: str
    data: np.ndarray
    source_dtype: str = "F32"

    def __post_init__(self) -> None:
        # asarray (not ascontiguousarray) so scalar tensors stay 0-d
        self.data = np.asarray(self.data, dtype=np.float32, order="C")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={self.shape}, source={self.source_dtype})"


class Checkpoint:
    """Ordered name-to-Tensor map with free-form string metadata.

    Iteration is always lexicographic by name, regardless of insertion or
    file order. Names are unique. Tensors are treated as immutable after
    load, so a checkpoint may be shared read-only across worker threads;
    writing is single-owner.
    """

    def __init__(
        self,
        tensors: Iterable[Tensor] | Mapping[str, Tensor] | None = None,
        metadata: Mapping[str, str] | None = None,
    ) -> None:
        self._tensors: dict[str, Tensor] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        if tensors is not None:
            values = tensors.values() if isinstance(tensors, Mapping) else tensors
            for t in values:
                self.add(t)

    def add(self, tensor: Tensor) -> None:
        if tensor.name in self._tensors:
            raise ContainerError(f"duplicate tensor name '{tensor.name}'")
        self._tensors[tensor.name] = tensor

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self._tensors))

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.names()]

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no tensor named '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.metadata == other.metadata and self.items() == other.items()

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, {len(self.metadata)} metadata keys)"


def _parse_header(blob: bytes) -> dict:
    def no_duplicates(pairs):
        seen = set()
        for key, _ in pairs:
            if key in seen:
                raise ContainerError(f"duplicate tensor name '{key}' in header")
            seen.add(key)
        return dict(pairs)

    try:
        header = json.loads(blob.decode("utf-8"), object_pairs_hook=no_duplicates)
    except ContainerError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError("header must be a JSON object")
    return header


def _check_entry(name: str, desc: object, payload_len: int) -> tuple[str, list[int], int, int]:
    if not isinstance(desc, dict):
        raise ContainerError(f"malformed entry for tensor '{name}'")
    unknown = set(desc) - {"dtype", "shape", "data_offsets"}
    if unknown:
        raise ContainerError(f"unknown field {sorted(unknown)[0]!r} for tensor '{name}'")
    dtype = desc.get("dtype")
    if dtype not in _DTYPE_SIZES:
        raise ContainerError(f"unsupported dtype {dtype!r} for tensor '{name}'")
    shape = desc.get("shape")
    if not isinstance(shape, list) or any(
        isinstance(d, bool) or not isinstance(d, int) or d < 0 for d in shape
    ):
        raise ContainerError(f"invalid shape for tensor '{name}'")
    offsets = desc.get("data_offsets")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or any(isinstance(o, bool) or not isinstance(o, int) for o in offsets)
    ):
        raise ContainerError(f"invalid data_offsets for tensor '{name}'")
    begin, end = offsets
    if begin < 0 or end < begin or end > payload_len:
        raise ContainerError(f"out-of-bounds tensor '{name}'")
    expected = math.prod(shape) * _DTYPE_SIZES[dtype]
    if end - begin != expected:
        raise ContainerError(
            f"tensor '{name}' declares {end - begin} payload bytes, expected {expected}"
        )
    return dtype, shape, begin, end


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Parse a container file into an all-float32 Checkpoint.

    Half-precision tensors are widened on load; their on-disk dtype is
    recorded both on the Tensor and as ``source_dtype.<name>`` metadata.
    """
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ContainerError(f"'{path}': file too short for a header length")
    (header_len,) = struct.unpack("<Q", data[:8])
    if header_len > HEADER_LIMIT:
        raise ContainerError(f"'{path}': declared header length {header_len} exceeds limit")
    if 8 + header_len > len(data):
        raise ContainerError(f"'{path}': header extends past end of file")
    header = _parse_header(data[8 : 8 + header_len])
    payload = data[8 + header_len :]

    raw_meta = header.pop("__metadata__", {})
    if not isinstance(raw_meta, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in raw_meta.items()
    ):
        raise ContainerError("__metadata__ must map strings to strings")

    entries = []
    for name, desc in header.items():
        dtype, shape, begin, end = _check_entry(name, desc, len(payload))
        entries.append((name, dtype, shape, begin, end))

    occupied = sorted((b, e, n) for n, _, _, b, e in entries if e > b)
    for (_, prev_end, prev_name), (next_begin, _, next_name) in zip(occupied, occupied[1:]):
        if next_begin < prev_end:
            raise ContainerError(f"overlapping tensors '{prev_name}' and '{next_name}'")

    ckpt = Checkpoint(metadata=raw_meta)
    for name, dtype, shape, begin, end in entries:
        values = _widen(dtype, payload[begin:end]).reshape(shape)
        ckpt.add(Tensor(name, values, source_dtype=dtype))
        if dtype != "F32":
            ckpt.metadata.setdefault(f"source_dtype.{name}", dtype)
    return ckpt


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize canonically; a pure function of the checkpoint value."""
    header: dict[str, object] = {}
    if ckpt.metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in ckpt.metadata.items()}
    payloads = []
    offset = 0
    for name, tensor in ckpt.items():
        raw = tensor.data.astype("<f4", copy=False).tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(tensor.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(blob) > HEADER_LIMIT:
        raise ContainerError(f"header of {len(blob)} bytes exceeds container limit")
    return struct.pack("<Q", len(blob)) + blob + b"".join(payloads)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _binary_check(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b)
    return Tensor(a.name, a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b)
    return Tensor(a.name, a.data - b.data)


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor(a.name, a.data * np.float32(factor))


def absolute(a: Tensor) -> Tensor:
    return Tensor(a.name, np.abs(a.data))


def sign(a: Tensor) -> Tensor:
    # np.sign maps +-0 to 0, matching the merge pipelines' convention
    return Tensor(a.name, np.sign(a.data))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b)
    return Tensor(a.name, a.data * b.data)
