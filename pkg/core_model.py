"""
CiteGuard Core Model
====================

Shared domain types, the error hierarchy and the canonical citation grammar:

    [doc:<doc_id>|p:<page_start>-<page_end>|c:<chunk_id>]

Identifiers are restricted to [A-Za-z0-9._-] so citations never need escaping.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union


IDENTIFIER_RE = re.compile(r"[A-Za-z0-9._-]+")
IDENTIFIER_CHARS = frozenset("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789._-")

# Anything shaped like a citation; exact grammar is checked by parse_citation
CITATION_TOKEN_RE = re.compile(r"\[doc:[^\[\]\n]*\]")

SCHEMA_VERSION = "citeguard/v1"


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class CiteGuardError(Exception):
    """Root of every domain error raised by the engine"""


class ConfigError(CiteGuardError):
    pass


class ParseError(CiteGuardError):
    def __init__(self, position: int, expected: str):
        self.position = position
        self.expected = expected
        super().__init__(f"citation parse error at {position}: expected {expected}")


# ---------------------------------------------------------------------------
# Documents
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextBlock:
    text: str
    section_title: Optional[str] = None


@dataclass(frozen=True)
class TableBlock:
    headers: Tuple[str, ...]
    rows: Tuple[Tuple[str, ...], ...]
    caption: Optional[str] = None


@dataclass(frozen=True)
class ImageTextBlock:
    ocr_text: str
    descriptor: Optional[str] = None


ContentBlock = Union[TextBlock, TableBlock, ImageTextBlock]


class BlockOrigin(str, Enum):
    TEXT = "Text"
    TABLE = "Table"
    IMAGE_TEXT = "ImageText"


@dataclass(frozen=True)
class PageRecord:
    page_number: int
    blocks: Tuple[ContentBlock, ...]


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    authority: str
    doc_type: str
    title: str
    pages: Tuple[PageRecord, ...]


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    page_start: int
    page_end: int
    section_title: Optional[str]
    text: str
    char_len: int
    stream_offset: int = 0

    def to_dict(self) -> Dict:
        return {
            "doc_id": self.doc_id,
            "chunk_id": self.chunk_id,
            "page_start": self.page_start,
            "page_end": self.page_end,
            "section_title": self.section_title,
            "stream_offset": self.stream_offset,
            "char_len": self.char_len,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Chunk":
        return cls(
            chunk_id=data["chunk_id"],
            doc_id=data["doc_id"],
            page_start=int(data["page_start"]),
            page_end=int(data["page_end"]),
            section_title=data.get("section_title"),
            text=data["text"],
            char_len=int(data["char_len"]),
            stream_offset=int(data.get("stream_offset", 0)),
        )


@dataclass(frozen=True)
class ScoredChunk:
    chunk: Chunk
    score: float


# ---------------------------------------------------------------------------
# Citations and responses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Citation:
    doc_id: str
    page_start: int
    page_end: int
    chunk_id: str


@dataclass(frozen=True)
class AnswerParagraph:
    text: str
    citations: Tuple[Citation, ...]


class AbstainReason(str, Enum):
    LOW_SIMILARITY = "LowSimilarity"
    NO_EVIDENCE = "NoEvidence"
    CITATION_VALIDATION_FAILED = "CitationValidationFailed"


@dataclass(frozen=True)
class Answered:
    paragraphs: Tuple[AnswerParagraph, ...]
    evidence: Tuple[ScoredChunk, ...]
    top1_score: float
    attempts_used: int


@dataclass(frozen=True)
class Abstained:
    reason: AbstainReason
    message: str
    partial_evidence: Tuple[ScoredChunk, ...] = field(default_factory=tuple)
    top1_score: Optional[float] = None
    attempts_used: int = 0


SystemResponse = Union[Answered, Abstained]


def is_safe_identifier(value: str) -> bool:
    return bool(value) and IDENTIFIER_RE.fullmatch(value) is not None


def citation_for(chunk: Chunk) -> Citation:
    """Citation covering a chunk's full page range"""
    return Citation(chunk.doc_id, chunk.page_start, chunk.page_end, chunk.chunk_id)


def render_citation(c: Citation) -> str:
    """Canonical long form; short page ranges are always expanded"""
    return f"[doc:{c.doc_id}|p:{c.page_start}-{c.page_end}|c:{c.chunk_id}]"


class _CitationScanner:
    """Single-pass scanner over one candidate citation string"""

    def __init__(self, s: str):
        self.s = s
        self.pos = 0

    def literal(self, lit: str):
        if not self.s.startswith(lit, self.pos):
            raise ParseError(self.pos, repr(lit))
        self.pos += len(lit)

    def identifier(self, what: str) -> str:
        start = self.pos
        while self.pos < len(self.s) and self.s[self.pos] in IDENTIFIER_CHARS:
            self.pos += 1
        if self.pos == start:
            raise ParseError(start, what)
        return self.s[start:self.pos]

    def page(self) -> int:
        start = self.pos
        while self.pos < len(self.s) and self.s[self.pos] in "0123456789":
            self.pos += 1
        digits = self.s[start:self.pos]
        if not digits:
            raise ParseError(start, "page number")
        if digits[0] == "0":
            raise ParseError(start, "page number >= 1 without leading zeros")
        return int(digits)

    def peek(self) -> str:
        return self.s[self.pos] if self.pos < len(self.s) else ""


def parse_citation(s: str) -> Citation:
    """Parse one citation token; the short page form `p:N` expands to N-N."""
    scan = _CitationScanner(s)
    scan.literal("[doc:")
    doc_id = scan.identifier("document identifier")
    scan.literal("|p:")
    range_pos = scan.pos
    page_start = scan.page()
    page_end = page_start
    if scan.peek() == "-":
        scan.pos += 1
        page_end = scan.page()
    scan.literal("|c:")
    chunk_id = scan.identifier("chunk identifier")
    scan.literal("]")
    if scan.pos != len(s):
        raise ParseError(scan.pos, "end of citation")
    if page_start > page_end:
        raise ParseError(range_pos, "page_start <= page_end")
    return Citation(doc_id, page_start, page_end, chunk_id)


def find_citation_tokens(text: str) -> List[str]:
    """Every bracketed [doc:...] token in text, left to right, parsed or not"""
    return CITATION_TOKEN_RE.findall(text)


def split_paragraphs(text: str) -> List[str]:
    """Paragraph = maximal run of non-blank lines."""
    paragraphs: List[str] = []
    current: List[str] = []
    for line in text.splitlines():
        if line.strip():
            current.append(line)
        elif current:
            paragraphs.append("\n".join(current))
            current = []
    if current:
        paragraphs.append("\n".join(current))
    return paragraphs
