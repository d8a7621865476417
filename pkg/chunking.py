"""
CiteGuard Chunking
==================

Segments a flattened document into provenance-stamped chunks.

Cut preference inside the window [start + min_len, start + max_len]:
    1. section-title change (earliest; no overlap after it)
    2. page break          (closest to start + target_len)
    3. sentence boundary   (closest to start + target_len)
    4. hard cut at max_len
The next chunk restarts overlap_len characters before a non-section cut.
"""

import json
import logging
import re
from bisect import bisect_left, bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from core_model import Chunk, CiteGuardError, ConfigError, DocumentRecord
from ingestion import FlatSegment, IngestStats, flatten_document

logger = logging.getLogger(__name__)

MAX_CHUNKS_PER_DOC = 9999
SENTENCE_END_RE = re.compile(r"[.?!] |\n")


class ChunkIdOverflow(CiteGuardError):
    pass


@dataclass(frozen=True)
class ChunkingConfig:
    target_len: int = 1000
    max_len: int = 1400
    overlap_len: int = 150
    min_len: int = 200

    def __post_init__(self):
        if not (0 <= self.overlap_len < self.min_len <= self.target_len <= self.max_len):
            raise ConfigError(
                "chunking requires 0 <= overlap_len < min_len <= target_len <= max_len, got "
                f"overlap={self.overlap_len} min={self.min_len} target={self.target_len} max={self.max_len}"
            )

    def to_dict(self) -> dict:
        return {
            "target_len": self.target_len,
            "max_len": self.max_len,
            "overlap_len": self.overlap_len,
            "min_len": self.min_len,
        }


@dataclass(frozen=True)
class WorkingStream:
    """Segments joined by single newlines, with per-segment character spans"""
    text: str
    starts: Tuple[int, ...]
    ends: Tuple[int, ...]
    pages: Tuple[int, ...]
    sections: Tuple[Optional[str], ...]

    def segment_at(self, pos: int) -> int:
        """Index of the segment containing stream offset pos"""
        i = max(bisect_right(self.starts, pos) - 1, 0)
        # a separator newline belongs to the segment that follows it
        if pos >= self.ends[i] and i + 1 < len(self.starts):
            i += 1
        return i

    def page_range(self, a: int, b: int) -> Tuple[int, int]:
        first = bisect_right(self.ends, a)
        last = bisect_left(self.starts, b) - 1
        if first > last:
            i = self.segment_at(a)
            return self.pages[i], self.pages[i]
        return self.pages[first], self.pages[last]


def build_stream(segments: Sequence[FlatSegment]) -> WorkingStream:
    """Join segments with newlines into one working stream, recording each segment's span"""
    starts, ends = [], []
    pos = 0
    for seg in segments:
        starts.append(pos)
        pos += len(seg.text)
        ends.append(pos)
        pos += 1
    return WorkingStream(
        text="\n".join(seg.text for seg in segments),
        starts=tuple(starts),
        ends=tuple(ends),
        pages=tuple(seg.page_number for seg in segments),
        sections=tuple(seg.section_title for seg in segments),
    )


def _closest(cands: List[int], lo: int, hi: int, target: int) -> Optional[int]:
    i = bisect_left(cands, lo)
    j = bisect_right(cands, hi)
    if i >= j:
        return None
    k = bisect_left(cands, target, i, j)
    best = None
    for idx in (k - 1, k):
        if i <= idx < j:
            c = cands[idx]
            if best is None or abs(c - target) < abs(best - target) or (
                    abs(c - target) == abs(best - target) and c > best):
                best = c
    return best


class _Cutter:
    def __init__(self, stream: WorkingStream, cfg: ChunkingConfig):
        self.cfg = cfg
        self.n = len(stream.text)
        seg_count = len(stream.starts)
        self.section_cuts = [stream.starts[i] for i in range(1, seg_count)
                             if stream.sections[i] != stream.sections[i - 1]]
        self.page_cuts = [stream.starts[i] for i in range(1, seg_count)
                          if stream.pages[i] != stream.pages[i - 1]]
        self.sentence_cuts = [m.end() for m in SENTENCE_END_RE.finditer(stream.text)
                              if m.end() < self.n]

    def next_cut(self, start: int) -> Tuple[int, str]:
        cfg = self.cfg
        lo = start + cfg.min_len
        hi = min(start + cfg.max_len, self.n)

        i = bisect_left(self.section_cuts, lo)
        if i < len(self.section_cuts) and self.section_cuts[i] <= hi:
            return self.section_cuts[i], "section"
        if self.n - start <= cfg.max_len:
            return self.n, "end"

        target = start + cfg.target_len
        cut = _closest(self.page_cuts, lo, hi, target)
        if cut is not None:
            return cut, "page"
        cut = _closest(self.sentence_cuts, lo, hi, target)
        if cut is not None:
            return cut, "sentence"
        return start + cfg.max_len, "hard"


def assign_chunk_ids(chunks: List[Chunk]) -> List[Chunk]:
    """c0000, c0001, ... in emission order"""
    if len(chunks) > MAX_CHUNKS_PER_DOC:
        doc_id = chunks[0].doc_id if chunks else "?"
        raise ChunkIdOverflow(f"{doc_id}: {len(chunks)} chunks exceeds {MAX_CHUNKS_PER_DOC} per document")
    return [replace(chunk, chunk_id=f"c{i:04d}") for i, chunk in enumerate(chunks)]


def chunk_document(segments: List[FlatSegment], cfg: ChunkingConfig,
                   stats: Optional[IngestStats] = None) -> List[Chunk]:
    """Cut one document's segments into overlapping chunks with page provenance"""
    if not segments:
        logger.warning("empty document: no segments to chunk")
        if stats is not None:
            stats.empty_documents += 1
            stats.warnings.append("empty document skipped")
        return []

    doc_id = segments[0].doc_id
    if any(seg.doc_id != doc_id for seg in segments):
        raise ValueError("chunk_document expects the segments of a single document")

    stream = build_stream(segments)
    cutter = _Cutter(stream, cfg)
    chunks: List[Chunk] = []
    start = 0
    while True:
        cut, kind = cutter.next_cut(start)
        page_start, page_end = stream.page_range(start, cut)
        text = stream.text[start:cut]
        chunks.append(Chunk(
            chunk_id="",
            doc_id=doc_id,
            page_start=page_start,
            page_end=page_end,
            section_title=stream.sections[stream.segment_at(start)],
            text=text,
            char_len=len(text),
            stream_offset=start,
        ))
        if cut >= cutter.n:
            break
        start = cut if kind == "section" else max(cut - cfg.overlap_len, 0)

    logger.debug(f"{doc_id}: {len(stream.text)} chars -> {len(chunks)} chunks")
    return assign_chunk_ids(chunks)


def chunk_documents(docs: Iterable[DocumentRecord], cfg: ChunkingConfig, workers: int = 4,
                    stats: Optional[IngestStats] = None) -> List[Chunk]:
    """Flatten and chunk documents in parallel; output ordered by (doc_id, chunk_id)"""
    docs = list(docs)

    def _one(doc: DocumentRecord) -> Tuple[List[Chunk], IngestStats]:
        local = IngestStats()
        chunks = chunk_document(flatten_document(doc, local), cfg, local)
        return chunks, local

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(executor.map(_one, docs))

    out: List[Chunk] = []
    for chunks, local in results:
        out.extend(chunks)
        if stats is not None:
            stats.documents += local.documents
            stats.segments += local.segments
            stats.dropped_blocks += local.dropped_blocks
            stats.empty_documents += local.empty_documents
            stats.warnings.extend(local.warnings)
    out.sort(key=lambda c: (c.doc_id, c.chunk_id))
    return out


def write_chunks(path: Union[str, Path], chunks: Iterable[Chunk]):
    """One JSON object per line, in the order given"""
    ordered = sorted(chunks, key=lambda c: (c.doc_id, c.chunk_id))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for chunk in ordered:
            f.write(json.dumps(chunk.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_chunks(path: Union[str, Path]) -> List[Chunk]:
    """Inverse of write_chunks"""
    chunks = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                chunks.append(Chunk.from_dict(json.loads(line)))
    return chunks
