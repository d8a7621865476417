import math
import struct
import time

import numpy as np
import pytest

from core_model import Chunk
from embedding_provider import DimensionMismatch, EmbeddingVector, normalize
import vector_index
from vector_index import (
    BadMagic,
    ChecksumMismatch,
    DuplicateChunkRef,
    NotNormalized,
    SidecarMismatch,
    TrailingData,
    TruncatedFile,
    UnsupportedVersion,
    build,
    decode_index,
    encode_index,
)


def chunks_for(n, doc_id="d1"):
    return [Chunk(chunk_id=f"c{i:04d}", doc_id=doc_id, page_start=1 + i // 10, page_end=1 + i // 10,
                  section_title=None, text=f"chunk {i}", char_len=len(f"chunk {i}")) for i in range(n)]


def random_index(n=200, dim=32, seed=11):
    rng = np.random.default_rng(seed)
    vectors = [normalize(rng.normal(size=dim)) for _ in range(n)]
    return build(vectors, chunks_for(n)), rng


def brute_force(ix, q, k):
    scored = []
    for row in range(ix.n):
        r = ix.matrix[row].astype(np.float64)
        r = r / math.sqrt(math.fsum(x * x for x in r))
        s = math.fsum(float(a) * float(b) for a, b in zip(r, q.values))
        scored.append((row, max(-1.0, min(1.0, s))))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


def test_basis_vectors():
    basis = [normalize(np.eye(3)[i]) for i in range(3)]
    ix = build(basis, chunks_for(3))
    assert (ix.n, ix.dim) == (3, 3)
    assert ix.search_rows(basis[1], 1) == [(1, 1.0)]
    assert len(ix.search(basis[0], 10)) == 3


def test_ties_break_by_row_id():
    v = normalize([1.0, 0.0])
    ix = build([v, v, v], chunks_for(3))
    assert [row for row, _ in ix.search_rows(v, 3)] == [0, 1, 2]


def test_not_normalized():
    with pytest.raises(NotNormalized):
        build([EmbeddingVector(np.array([0.9, 0.0]))], chunks_for(1))


def test_duplicate_chunk_ref():
    v = normalize([1.0, 0.0])
    chunks = chunks_for(1) * 2
    with pytest.raises(DuplicateChunkRef):
        build([v, v], chunks)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        build([normalize([1.0, 0.0]), normalize([1.0, 0.0, 0.0])], chunks_for(2))
    ix = build([normalize([1.0, 0.0])], chunks_for(1))
    with pytest.raises(DimensionMismatch):
        ix.search_rows(normalize([1.0, 0.0, 0.0]), 1)


def test_empty_index_returns_nothing():
    ix = build([], [])
    assert ix.search_rows(normalize([1.0]), 5) == []


def test_stored_rows_unit_norm():
    ix, _ = random_index()
    norms = np.linalg.norm(ix.matrix.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-6)


def test_matches_brute_force():
    ix, rng = random_index()
    queries = [normalize(rng.normal(size=32)) for _ in range(20)]
    started = time.perf_counter()
    results = [ix.search_rows(q, 10) for q in queries]
    assert time.perf_counter() - started < 1.0
    for q, got in zip(queries, results):
        expected = brute_force(ix, q, 10)
        assert [row for row, _ in got] == [row for row, _ in expected]
        for (_, s1), (_, s2) in zip(got, expected):
            assert abs(s1 - s2) <= 1e-9


def test_identical_vector_scores_one():
    ix, _ = random_index()
    original = ix.matrix[17].astype(np.float64)
    (row, score), = ix.search_rows(normalize(original), 1)
    assert row == 17
    assert abs(score - 1.0) <= 1e-9


def test_save_load_round_trip(tmp_path):
    ix, rng = random_index(n=50, dim=16)
    vector_index.save(ix, tmp_path)
    loaded = vector_index.load(tmp_path, chunks=chunks_for(50))
    assert (tmp_path / "index.bin").read_bytes() == encode_index(loaded)
    assert np.array_equal(loaded.matrix, ix.matrix)
    assert loaded.row_meta == ix.row_meta
    for _ in range(5):
        q = normalize(rng.normal(size=16))
        assert loaded.search(q, 5) == ix.search(q, 5)


def test_header_layout():
    ix, _ = random_index(n=4, dim=8)
    data = encode_index(ix)
    magic, version, dim, n = struct.unpack_from("<4sIIQ", data, 0)
    assert (magic, version, dim, n) == (b"CIRX", 1, 8, 4)
    assert len(data) == 20 + 4 * 8 * 4 + 4


def test_flipped_byte_is_checksum_mismatch():
    ix, _ = random_index(n=4, dim=8)
    data = bytearray(encode_index(ix))
    data[20 + 13] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        decode_index(bytes(data))


def test_unsupported_version():
    ix, _ = random_index(n=4, dim=8)
    data = bytearray(encode_index(ix))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(UnsupportedVersion):
        decode_index(bytes(data))


def test_bad_magic_truncation_trailing():
    data = encode_index(random_index(n=4, dim=8)[0])
    with pytest.raises(BadMagic):
        decode_index(b"XXXX" + data[4:])
    with pytest.raises(TruncatedFile):
        decode_index(data[:-5])
    with pytest.raises(TruncatedFile):
        decode_index(data[:2])
    with pytest.raises(TrailingData):
        decode_index(data + b"\x00")


def test_empty_index_round_trip(tmp_path):
    vector_index.save(build([], []), tmp_path)
    loaded = vector_index.load(tmp_path, chunks=[])
    assert loaded.n == 0


def test_sidecar_must_match(tmp_path):
    ix, _ = random_index(n=3, dim=4)
    vector_index.save(ix, tmp_path)
    lines = (tmp_path / "rows.jsonl").read_text().splitlines()
    (tmp_path / "rows.jsonl").write_text("\n".join(lines[:2]) + "\n")
    with pytest.raises(SidecarMismatch):
        vector_index.load(tmp_path)
