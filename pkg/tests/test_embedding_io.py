from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from mmgbench.embedding_io import (
    HEADER,
    EmbeddingTable,
    read_embedding_table,
    read_matrix,
    write_embedding_table,
    write_matrix,
)
from mmgbench.errors import MalformedEmbeddingFile, ShapeMismatch


def test_table_round_trips_through_emb1(tmp_path: Path) -> None:
    data = np.arange(12, dtype=np.float32).reshape(3, 4) / 7.0
    table = EmbeddingTable("image", data)
    path = write_embedding_table(table, tmp_path / "image.emb")
    loaded = read_embedding_table(path, "image")
    assert loaded.rows == 3 and loaded.dim == 4
    assert np.array_equal(loaded.data, table.data)
    assert path.stat().st_size == HEADER.size + 3 * 4 * 4


def test_layout_is_little_endian_header_then_row_major_floats(tmp_path: Path) -> None:
    path = write_matrix(np.array([[1.0, 2.0], [3.0, 4.0]]), tmp_path / "m.emb")
    payload = path.read_bytes()
    assert payload[:4] == b"EMB1"
    assert struct.unpack_from("<II", payload, 4) == (2, 2)
    assert struct.unpack_from("<4f", payload, 12) == (1.0, 2.0, 3.0, 4.0)


def test_table_does_not_freeze_caller_array() -> None:
    source = np.zeros((2, 2), dtype=np.float32)
    table = EmbeddingTable("text", source)
    source[0, 0] = 5.0
    assert table.data[0, 0] == 0.0
    assert not table.data.flags.writeable


def test_truncated_payload_names_file_and_shortfall(tmp_path: Path) -> None:
    path = write_matrix(np.ones((4, 3)), tmp_path / "t.emb")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(MalformedEmbeddingFile, match=r"t\.emb: truncated payload \(43 of 48 bytes for 4x3\)"):
        read_matrix(path)


def test_truncated_header_is_reported(tmp_path: Path) -> None:
    path = tmp_path / "h.emb"
    path.write_bytes(b"EMB1\x01\x00")
    with pytest.raises(MalformedEmbeddingFile, match=r"truncated header \(6 of 12 bytes\)"):
        read_matrix(path)


def test_bad_magic_and_zero_dim_are_rejected(tmp_path: Path) -> None:
    bad_magic = tmp_path / "magic.emb"
    bad_magic.write_bytes(struct.pack("<4sII", b"EMB2", 1, 1) + struct.pack("<f", 1.0))
    with pytest.raises(MalformedEmbeddingFile, match="bad magic"):
        read_matrix(bad_magic)
    zero_dim = tmp_path / "zero.emb"
    zero_dim.write_bytes(struct.pack("<4sII", b"EMB1", 3, 0))
    with pytest.raises(MalformedEmbeddingFile, match="dim must be > 0"):
        read_matrix(zero_dim)


def test_trailing_bytes_are_rejected(tmp_path: Path) -> None:
    path = write_matrix(np.ones((1, 2)), tmp_path / "extra.emb")
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(MalformedEmbeddingFile, match="trailing"):
        read_matrix(path)


def test_missing_file_is_malformed(tmp_path: Path) -> None:
    with pytest.raises(MalformedEmbeddingFile):
        read_matrix(tmp_path / "absent.emb")


def test_only_matrices_are_stored(tmp_path: Path) -> None:
    with pytest.raises(ShapeMismatch):
        write_matrix(np.ones(3), tmp_path / "vector.emb")
    with pytest.raises(ShapeMismatch):
        EmbeddingTable("text", np.ones((2, 0)))
