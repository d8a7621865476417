import json
from pathlib import Path
from typing import Dict, List, Optional

import pytest

from core_model import Chunk
from embedding_provider import mock_embed
import vector_index

# One short single-block document per authority: each becomes exactly one chunk,
# so a query equal to a document's text retrieves it with cosine 1.0.
FIXTURE_TEXTS = {
    "ftb-540": "Use Form 540 to file a California resident income tax return when gross income exceeds the filing threshold.",
    "irs-1040-instr": "The standard deduction for a single filer is 13,850 dollars for tax year 2023.",
    "nys-it201": "New York residents report wages and pension income on Form IT-201 and attach the required schedules.",
}

FIXTURE_META = {
    "ftb-540": ("CA-FTB", "instructions", "California Resident Income Tax Return Instructions"),
    "irs-1040-instr": ("IRS", "instructions", "Instructions for Form 1040"),
    "nys-it201": ("NY-Tax", "form", "Resident Income Tax Return"),
}

OUT_OF_CORPUS = "zebra migration across the savanna during monsoon season"


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("CITEGUARD_EMBED_URL", "CITEGUARD_LLM_URL", "CITEGUARD_API_KEY"):
        monkeypatch.delenv(name, raising=False)


def dif(doc_id: str, pages: List[List[Dict]], authority: str = "IRS", doc_type: str = "instructions",
        title: Optional[str] = None) -> Dict:
    return {
        "doc_id": doc_id,
        "authority": authority,
        "doc_type": doc_type,
        "title": title or doc_id,
        "pages": [{"page_number": i + 1, "blocks": blocks} for i, blocks in enumerate(pages)],
    }


@pytest.fixture
def make_dif():
    return dif


@pytest.fixture
def write_dif():
    def _write(directory: Path, doc: Dict, name: Optional[str] = None) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / (name or f"{doc['doc_id']}.json")
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path
    return _write


@pytest.fixture
def corpus_dir(tmp_path, write_dif) -> Path:
    directory = tmp_path / "corpus"
    for doc_id, text in FIXTURE_TEXTS.items():
        authority, doc_type, title = FIXTURE_META[doc_id]
        write_dif(directory, dif(doc_id, [[{"kind": "text", "text": text}]], authority, doc_type, title))
    return directory


@pytest.fixture
def indexed_store(tmp_path, corpus_dir) -> Path:
    from chunking import ChunkingConfig
    from embedding_provider import ProviderConfig
    import store

    root = tmp_path / "store"
    store.ingest_store(corpus_dir, root, ChunkingConfig(), workers=2)
    store.index_store(root, ProviderConfig.from_url("mock", mock_dim=64))
    return root


@pytest.fixture
def make_chunk():
    def _make(doc_id: str, chunk_id: str, text: str, page_start: int = 1, page_end: int = 1,
              section: Optional[str] = None) -> Chunk:
        return Chunk(chunk_id=chunk_id, doc_id=doc_id, page_start=page_start, page_end=page_end,
                     section_title=section, text=text, char_len=len(text))
    return _make


@pytest.fixture
def mock_index():
    """Index over chunks embedded with the deterministic mock"""
    def _build(chunks: List[Chunk], dim: int = 64) -> vector_index.VectorIndex:
        return vector_index.build([mock_embed(c.text, dim) for c in chunks], chunks)
    return _build
