"""
CiteGuard Store
===============

On-disk layout of an indexed corpus:

    <store>/docs/<doc_id>.json   validated DIF copies
    <store>/chunks.jsonl         chunk store ordered by (doc_id, chunk_id)
    <store>/index.bin            flat vector index (after `index`)
    <store>/rows.jsonl           index row sidecar (after `index`)
    <store>/store.json           manifest

Every mutation is staged in a sibling directory and swapped in with a rename,
so a failed ingest or index leaves the prior store untouched.
"""

import json
import logging
import os
import shutil
import uuid
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import pandas as pd

from chunking import ChunkingConfig, chunk_documents, read_chunks, write_chunks
from core_model import SCHEMA_VERSION, Chunk, CiteGuardError, DocumentRecord
from embedding_provider import ProviderConfig, ProviderKind, ZeroVector, embed_texts, tokenize
from generation import GenConfig, make_generator
from ingestion import IngestStats, load_corpus
from provider_http import ProviderClient
from rag_engine import CiteGuardEngine
from retrieval_abstention import RetrievalConfig
import vector_index
from vector_index import VectorIndex

logger = logging.getLogger(__name__)

EMBED_URL_ENV = "CITEGUARD_EMBED_URL"
LLM_URL_ENV = "CITEGUARD_LLM_URL"

MANIFEST_FILE = "store.json"
CHUNKS_FILE = "chunks.jsonl"
DOCS_DIR = "docs"


class StoreError(CiteGuardError):
    pass


class NoDocuments(StoreError):
    pass


class RebuildRequired(StoreError):
    pass


class StoreIncomplete(StoreError):
    pass


class StoreLayout:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @property
    def docs_dir(self) -> Path:
        return self.root / DOCS_DIR

    @property
    def chunks_path(self) -> Path:
        return self.root / CHUNKS_FILE

    @property
    def index_path(self) -> Path:
        return self.root / vector_index.INDEX_FILE

    @property
    def rows_path(self) -> Path:
        return self.root / vector_index.ROWS_FILE

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_FILE

    def read_manifest(self) -> Dict:
        """Load store.json, rejecting other schema versions"""
        if not self.manifest_path.exists():
            raise StoreIncomplete(f"{self.root}: no {MANIFEST_FILE}; run `citeguard ingest` first")
        manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        if manifest.get("schema") != SCHEMA_VERSION:
            raise StoreIncomplete(f"{self.root}: manifest schema {manifest.get('schema')!r} != {SCHEMA_VERSION!r}")
        return manifest

    def write_manifest(self, manifest: Dict):
        text = json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
        tmp = self.manifest_path.with_name(MANIFEST_FILE + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, self.manifest_path)

    def load_chunks(self) -> List[Chunk]:
        if not self.chunks_path.exists():
            raise StoreIncomplete(f"{self.root}: no {CHUNKS_FILE}")
        return read_chunks(self.chunks_path)

    def load_index(self, chunks: Optional[List[Chunk]] = None) -> VectorIndex:
        """Index plus sidecar, resolved against the chunk store"""
        if not (self.index_path.exists() and self.rows_path.exists()):
            raise StoreIncomplete(f"{self.root}: no index; run `citeguard index` first")
        return vector_index.load(self.root, chunks=chunks)

    def check(self, manifest: Dict, chunks: List[Chunk], ix: Optional[VectorIndex] = None):
        """Manifest counts must match the files; manifest dim must match the index header"""
        counts = manifest["counts"]
        n_docs = len(list(self.docs_dir.glob("*.json")))
        if counts["docs"] != n_docs:
            raise StoreIncomplete(f"manifest lists {counts['docs']} docs, found {n_docs}")
        if counts["chunks"] != len(chunks):
            raise StoreIncomplete(f"manifest lists {counts['chunks']} chunks, found {len(chunks)}")
        if ix is not None:
            embedding = manifest.get("embedding") or {}
            if counts.get("rows") != ix.n:
                raise StoreIncomplete(f"manifest lists {counts.get('rows')} index rows, found {ix.n}")
            if embedding.get("dim") != ix.dim:
                raise StoreIncomplete(f"manifest dim {embedding.get('dim')} != index dim {ix.dim}")


# ---------------------------------------------------------------------------
# Atomic replacement
# ---------------------------------------------------------------------------

def staging_dir(target: Path) -> Path:
    target.parent.mkdir(parents=True, exist_ok=True)
    return target.with_name(f".{target.name}.staging-{uuid.uuid4().hex[:8]}")


def swap_in(staging: Path, target: Path):
    """Replace target with staging by rename; the old store is restored on failure"""
    backup = None
    if target.exists():
        backup = target.with_name(f".{target.name}.old-{uuid.uuid4().hex[:8]}")
        os.replace(target, backup)
    try:
        os.replace(staging, target)
    except OSError:
        if backup is not None:
            os.replace(backup, target)
        raise
    if backup is not None:
        shutil.rmtree(backup, ignore_errors=True)


# ---------------------------------------------------------------------------
# Corpus composition
# ---------------------------------------------------------------------------

def composition(docs: Iterable[DocumentRecord], chunks: Iterable[Chunk]) -> pd.DataFrame:
    """Per-authority document and chunk counts with the document types present"""
    per_doc = pd.Series([c.doc_id for c in chunks], dtype=object).value_counts()
    frame = pd.DataFrame([{"doc_id": d.doc_id, "authority": d.authority, "doc_type": d.doc_type}
                          for d in docs], columns=["doc_id", "authority", "doc_type"])
    frame["chunks"] = frame["doc_id"].map(per_doc).fillna(0).astype(int)
    table = frame.groupby("authority", sort=True).agg(
        docs=("doc_id", "count"),
        chunks=("chunks", "sum"),
        doc_types=("doc_type", lambda s: ", ".join(sorted(set(s)))),
    ).reset_index()
    return table


def composition_rows(table: pd.DataFrame) -> List[Dict]:
    return [{"authority": str(r.authority), "docs": int(r.docs), "chunks": int(r.chunks),
             "doc_types": str(r.doc_types)} for r in table.itertuples(index=False)]


def format_composition(rows: List[Dict]) -> str:
    lines = [f"{'Authority':<12} {'Docs':>6} {'Chunks':>8}  Types"]
    for r in rows:
        lines.append(f"{r['authority']:<12} {r['docs']:>6} {r['chunks']:>8}  {r['doc_types']}")
    lines.append(f"{'Total':<12} {sum(r['docs'] for r in rows):>6} {sum(r['chunks'] for r in rows):>8}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Store operations
# ---------------------------------------------------------------------------

def ingest_store(input_dir: Union[str, Path], root: Union[str, Path], cfg: ChunkingConfig,
                 lenient: bool = False, workers: int = 4) -> Tuple[Dict, IngestStats]:
    """Validate, copy and chunk a DIF directory into a fresh store (no index yet)"""
    target = Path(root)
    docs = load_corpus(input_dir, lenient=lenient, workers=workers)
    if not docs:
        raise NoDocuments(f"no documents found in {input_dir}")

    stats = IngestStats()
    chunks = chunk_documents(docs.values(), cfg, workers=workers, stats=stats)

    staging = staging_dir(target)
    try:
        layout = StoreLayout(staging)
        layout.docs_dir.mkdir(parents=True)
        for path, doc in docs.items():
            shutil.copyfile(path, layout.docs_dir / f"{doc.doc_id}.json")
        write_chunks(layout.chunks_path, chunks)
        manifest = {
            "schema": SCHEMA_VERSION,
            "chunk_config": cfg.to_dict(),
            "counts": {"docs": len(docs), "chunks": len(chunks), "rows": None},
            "embedding": None,
            "composition": composition_rows(composition(docs.values(), chunks)),
        }
        layout.write_manifest(manifest)
        swap_in(staging, target)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    logger.info(f"Ingested {len(docs)} documents into {target}: {len(chunks)} chunks, "
                f"{stats.dropped_blocks} dropped blocks, {stats.empty_documents} empty documents")
    return manifest, stats


def check_mock_embeddable(chunks: List[Chunk], shown: int = 5):
    """The mock embedder needs at least one letter or digit per chunk"""
    empty = [c for c in chunks if not tokenize(c.text)]
    if empty:
        names = ", ".join(f"{c.doc_id}/{c.chunk_id}" for c in empty[:shown])
        more = f" and {len(empty) - shown} more" if len(empty) > shown else ""
        raise ZeroVector(f"{len(empty)} chunk(s) have no letters or digits to embed: {names}{more}; "
                         f"fix the source text or index with a remote embedding provider")


def index_store(root: Union[str, Path], provider: ProviderConfig, force: bool = False,
                client: Optional[ProviderClient] = None) -> Dict:
    """Embed every chunk and persist the index; nothing is written unless all of it succeeds"""
    target = Path(root)
    layout = StoreLayout(target)
    manifest = layout.read_manifest()
    chunks = layout.load_chunks()

    if chunks:
        if provider.kind == ProviderKind.DETERMINISTIC_MOCK:
            check_mock_embeddable(chunks)
        vectors = embed_texts([c.text for c in chunks], provider, client=client)
        ix = vector_index.build(vectors, chunks)
    else:
        logger.warning(f"{target}: store has no chunks; writing an empty index")
        ix = vector_index.build([], [])

    prior = manifest.get("embedding")
    if prior and prior.get("dim") not in (None, ix.dim) and not force:
        raise RebuildRequired(f"provider dimension {ix.dim} differs from the indexed dimension {prior['dim']}; "
                              f"re-run with --force to rebuild")

    manifest = dict(manifest)
    manifest["counts"] = dict(manifest["counts"], rows=ix.n)
    manifest["embedding"] = {
        "provider": provider.base_url if provider.kind == ProviderKind.REMOTE else "mock",
        "model_id": provider.model_id,
        "dim": ix.dim,
    }

    staging = staging_dir(target)
    try:
        shutil.copytree(target, staging)
        vector_index.save(ix, staging)
        StoreLayout(staging).write_manifest(manifest)
        swap_in(staging, target)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    logger.info(f"Indexed {ix.n} chunks at dim {ix.dim} with {manifest['embedding']['model_id']}")
    return manifest


# ---------------------------------------------------------------------------
# Settings and engine
# ---------------------------------------------------------------------------

def resolve_settings(config: Dict, manifest: Optional[Dict] = None, flags: Optional[Dict] = None,
                     environ: Optional[Dict[str, str]] = None) -> Dict:
    """Precedence: flags > environment > store.json > CONFIG"""
    environ = os.environ if environ is None else environ
    settings = dict(config)

    embedding = (manifest or {}).get("embedding") or {}
    if embedding.get("provider"):
        settings["embed_url"] = embedding["provider"]
    if embedding.get("model_id"):
        settings["embed_model"] = embedding["model_id"]
    if embedding.get("provider") == "mock" and embedding.get("dim"):
        settings["mock_dim"] = embedding["dim"]
    if manifest and manifest.get("chunk_config"):
        cc = manifest["chunk_config"]
        settings.update({f"chunk_{key}": value for key, value in cc.items()})

    if environ.get(EMBED_URL_ENV):
        settings["embed_url"] = environ[EMBED_URL_ENV]
    if environ.get(LLM_URL_ENV):
        settings["llm_url"] = environ[LLM_URL_ENV]

    for key, value in (flags or {}).items():
        if value is not None:
            settings[key] = value
    return settings


def embed_provider_from(settings: Dict) -> ProviderConfig:
    return ProviderConfig.from_url(
        settings.get("embed_url"),
        model_id=settings["embed_model"],
        mock_dim=settings["mock_dim"],
        timeout_ms=settings["timeout_ms"],
        max_batch=settings["max_batch"],
        max_retries=settings["max_retries"],
        backoff_ms=settings["backoff_ms"],
    )


def llm_provider_from(settings: Dict) -> ProviderConfig:
    return ProviderConfig.from_url(
        settings.get("llm_url"),
        model_id=settings["llm_model"],
        timeout_ms=settings["timeout_ms"],
        max_retries=settings["max_retries"],
        backoff_ms=settings["backoff_ms"],
    )


def open_engine(root: Union[str, Path], settings: Dict) -> CiteGuardEngine:
    """Load an indexed store and wire providers from already-resolved settings"""
    layout = StoreLayout(root)
    manifest = layout.read_manifest()
    if not manifest.get("embedding"):
        raise StoreIncomplete(f"{layout.root}: no index; run `citeguard index` first")
    chunks = layout.load_chunks()
    ix = layout.load_index(chunks)
    layout.check(manifest, chunks, ix)

    embed = embed_provider_from(settings)
    if embed.kind == ProviderKind.DETERMINISTIC_MOCK and ix.n and embed.mock_dim != ix.dim:
        raise RebuildRequired(f"mock dimension {embed.mock_dim} != index dimension {ix.dim}")
    embed_client = embed.client() if embed.kind == ProviderKind.REMOTE else None
    generator = make_generator(llm_provider_from(settings))

    return CiteGuardEngine(
        index=ix,
        embed_provider=embed,
        generator=generator,
        retrieval=RetrievalConfig(k=settings["k"], tau=settings["tau"]),
        generation=GenConfig(
            max_attempts=settings["max_attempts"],
            max_tokens=settings["max_tokens"],
            temperature=settings["temperature"],
            enforce_citations=settings.get("enforce_citations", True),
        ),
        embed_client=embed_client,
    )


def health(root: Union[str, Path]) -> Dict:
    counts = StoreLayout(root).read_manifest()["counts"]
    return {"status": "ok", "docs": counts["docs"], "chunks": counts["chunks"]}
