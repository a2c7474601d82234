"""EmbeddingTable persistence in the "EMB1" binary layout.

Layout: magic ``EMB1``, u32 little-endian rows, u32 little-endian dim, then
rows*dim little-endian float32 values in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mmgbench.errors import MalformedEmbeddingFile, ShapeMismatch

MAGIC = b"EMB1"
HEADER = struct.Struct("<4sII")
_DTYPE = np.dtype("<f4")


@dataclass(slots=True, frozen=True)
class EmbeddingTable:
    modality: str
    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", np.array(self.data, dtype=np.float32))
        if self.data.ndim != 2:
            raise ShapeMismatch(f"{self.modality} table must be 2-D, got shape {self.data.shape}")
        if self.data.shape[1] == 0:
            raise ShapeMismatch(f"{self.modality} table must have dim > 0")
        self.data.setflags(write=False)

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def row(self, index: int) -> np.ndarray:
        return self.data[index]


def encode_matrix(matrix: np.ndarray) -> bytes:
    array = np.asarray(matrix)
    if array.ndim != 2:
        raise ShapeMismatch(f"EMB1 stores 2-D matrices, got shape {array.shape}")
    rows, dim = array.shape
    return HEADER.pack(MAGIC, rows, dim) + np.ascontiguousarray(array, dtype=_DTYPE).tobytes()


def decode_matrix(payload: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < HEADER.size:
        raise MalformedEmbeddingFile(
            f"{source}: truncated header ({len(payload)} of {HEADER.size} bytes)"
        )
    magic, rows, dim = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise MalformedEmbeddingFile(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if dim == 0:
        raise MalformedEmbeddingFile(f"{source}: dim must be > 0")
    expected = rows * dim * _DTYPE.itemsize
    body = len(payload) - HEADER.size
    if body < expected:
        raise MalformedEmbeddingFile(
            f"{source}: truncated payload ({body} of {expected} bytes for {rows}x{dim})"
        )
    if body > expected:
        raise MalformedEmbeddingFile(f"{source}: {body - expected} trailing bytes after {rows}x{dim} payload")
    values = np.frombuffer(payload, dtype=_DTYPE, count=rows * dim, offset=HEADER.size)
    return values.reshape(rows, dim).astype(np.float32)


def write_matrix(matrix: np.ndarray, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_matrix(matrix))
    return path


def read_matrix(path: Path) -> np.ndarray:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise MalformedEmbeddingFile(f"{path}: {exc}") from exc
    return decode_matrix(payload, source=str(path))


def write_embedding_table(table: EmbeddingTable, path: Path) -> Path:
    return write_matrix(table.data, path)


def read_embedding_table(path: Path, modality: str) -> EmbeddingTable:
    return EmbeddingTable(modality=modality, data=read_matrix(path))
