"""
CiteGuard Ingestion
===================

Loads Document Interchange Format (DIF) files produced by an external
extraction/OCR stack, linearizes tables and image-OCR blocks into text and
flattens each document into provenance-stamped segments.

Nothing here is generative: every segment is a pure function of the extractor
output.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core_model import (
    BlockOrigin,
    CiteGuardError,
    ContentBlock,
    DocumentRecord,
    ImageTextBlock,
    PageRecord,
    TableBlock,
    TextBlock,
    is_safe_identifier,
)

logger = logging.getLogger(__name__)

BLANK_CELL = "(blank)"


class IngestError(CiteGuardError):
    pass


class MalformedFile(IngestError):
    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"malformed DIF file: {detail}")


class DuplicatePage(IngestError):
    def __init__(self, page: int):
        self.page = page
        super().__init__(f"duplicate page number {page}")


class RowWiderThanHeader(IngestError):
    def __init__(self, page: int, row: int):
        self.page = page
        self.row = row
        super().__init__(f"table row {row} on page {page} is wider than its header")


class BadDocId(IngestError):
    pass


class DuplicateDocId(IngestError):
    pass


class EmptyHeaders(IngestError):
    pass


class IngestFailed(IngestError):
    """One or more corpus files failed to load"""

    def __init__(self, diagnostics: Dict[str, str]):
        self.diagnostics = diagnostics
        lines = [f"{name}: {msg}" for name, msg in sorted(diagnostics.items())]
        super().__init__("ingest failed:\n  " + "\n  ".join(lines))


@dataclass(frozen=True)
class FlatSegment:
    doc_id: str
    page_number: int
    section_title: Optional[str]
    text: str
    origin: BlockOrigin


@dataclass
class IngestStats:
    documents: int = 0
    segments: int = 0
    dropped_blocks: int = 0
    empty_documents: int = 0
    warnings: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# DIF schema (strict rejects unknown keys, lenient ignores them)
# ---------------------------------------------------------------------------

def _build_schema(extra: str):
    cfg = ConfigDict(extra=extra, strict=True)

    class TextIn(BaseModel):
        model_config = cfg
        kind: Literal["text"]
        text: str
        section_title: Optional[str] = None

    class TableIn(BaseModel):
        model_config = cfg
        kind: Literal["table"]
        headers: List[str]
        rows: List[List[str]]
        caption: Optional[str] = None

    class ImageTextIn(BaseModel):
        model_config = cfg
        kind: Literal["image_text"]
        ocr_text: str
        descriptor: Optional[str] = None

    class PageIn(BaseModel):
        model_config = cfg
        page_number: int
        blocks: List[Annotated[Union[TextIn, TableIn, ImageTextIn], Field(discriminator="kind")]]

    class DocumentIn(BaseModel):
        model_config = cfg
        doc_id: str
        authority: str
        doc_type: str
        title: str
        pages: List[PageIn]

    return DocumentIn


_STRICT_SCHEMA = _build_schema("forbid")
_LENIENT_SCHEMA = _build_schema("ignore")


def _convert_block(raw, page_number: int) -> ContentBlock:
    if raw.kind == "text":
        return TextBlock(text=raw.text, section_title=raw.section_title)
    if raw.kind == "image_text":
        return ImageTextBlock(ocr_text=raw.ocr_text, descriptor=raw.descriptor)
    if not raw.headers:
        raise MalformedFile(f"table on page {page_number} has no headers")
    width = len(raw.headers)
    rows = []
    for i, row in enumerate(raw.rows):
        if len(row) > width:
            raise RowWiderThanHeader(page_number, i)
        rows.append(tuple(row) + ("",) * (width - len(row)))
    return TableBlock(headers=tuple(raw.headers), rows=tuple(rows), caption=raw.caption)


def parse_dif(data: dict, lenient: bool = False) -> DocumentRecord:
    """Validate a decoded DIF object into a DocumentRecord"""
    schema = _LENIENT_SCHEMA if lenient else _STRICT_SCHEMA
    try:
        doc = schema.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise MalformedFile(f"{where}: {first['msg']} ({e.error_count()} error(s))") from e

    if not is_safe_identifier(doc.doc_id):
        raise BadDocId(f"doc_id {doc.doc_id!r} must match [A-Za-z0-9._-]+")

    pages = []
    previous = 0
    for page in doc.pages:
        if page.page_number < 1:
            raise MalformedFile(f"page number {page.page_number} must be >= 1")
        if page.page_number == previous:
            raise DuplicatePage(page.page_number)
        if page.page_number < previous:
            raise MalformedFile(f"page {page.page_number} out of order (previous {previous})")
        if not pages and page.page_number != 1:
            raise MalformedFile(f"pages must start at 1, found {page.page_number}")
        blocks = tuple(_convert_block(b, page.page_number) for b in page.blocks)
        pages.append(PageRecord(page_number=page.page_number, blocks=blocks))
        previous = page.page_number

    return DocumentRecord(
        doc_id=doc.doc_id,
        authority=doc.authority,
        doc_type=doc.doc_type,
        title=doc.title,
        pages=tuple(pages),
    )


def load_dif(path: Union[str, Path], lenient: bool = False) -> DocumentRecord:
    """Load and validate one DIF file; short table rows are padded"""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as e:
        raise MalformedFile(f"{path.name}: {e}") from e
    except json.JSONDecodeError as e:
        raise MalformedFile(f"{path.name}: invalid JSON at line {e.lineno} column {e.colno}") from e
    if not isinstance(data, dict):
        raise MalformedFile(f"{path.name}: top-level value must be an object")
    return parse_dif(data, lenient=lenient)


def load_corpus(input_dir: Union[str, Path], lenient: bool = False,
                workers: int = 4) -> Dict[Path, DocumentRecord]:
    """
    Load every *.json DIF file in a directory concurrently.

    Returns path -> document ordered by doc_id. All per-file failures are
    collected into a single IngestFailed.
    """
    files = sorted(Path(input_dir).glob("*.json"))
    diagnostics: Dict[str, str] = {}

    def _load(path: Path):
        try:
            return path, load_dif(path, lenient=lenient)
        except IngestError as e:
            diagnostics[path.name] = str(e)
            return path, None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        loaded = [(p, d) for p, d in executor.map(_load, files) if d is not None]

    seen: Dict[str, Path] = {}
    for path, doc in loaded:
        if doc.doc_id in seen:
            diagnostics[path.name] = str(DuplicateDocId(
                f"duplicate doc_id {doc.doc_id!r} (also in {seen[doc.doc_id].name})"))
        else:
            seen[doc.doc_id] = path
    if diagnostics:
        raise IngestFailed(diagnostics)

    loaded.sort(key=lambda item: item[1].doc_id)
    return {path: doc for path, doc in loaded}


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------

def linearize_table(t: TableBlock) -> str:
    """
    One self-contained sentence per row, restating the headers:

        <h1>: <v1>; <h2>: <v2>; ...; <hk>: <vk>.

    preceded by the caption line when present.
    """
    if not t.headers:
        raise EmptyHeaders("table has no headers")
    lines = []
    if t.caption and t.caption.strip():
        lines.append(t.caption)
    for row in t.rows:
        padded = tuple(row) + ("",) * (len(t.headers) - len(row))
        cells = [f"{h}: {v if v.strip() else BLANK_CELL}" for h, v in zip(t.headers, padded)]
        lines.append("; ".join(cells) + ".")
    return "\n".join(lines)


def linearize_block(b: ContentBlock) -> Optional[str]:
    """Text for one block, or None when the block is blank"""
    if isinstance(b, TextBlock):
        text = b.text
    elif isinstance(b, TableBlock):
        text = linearize_table(b)
    else:
        text = b.ocr_text
        if text.strip() and b.descriptor and b.descriptor.strip():
            text = f"{text} ({b.descriptor})"
    return text if text.strip() else None


def _origin(b: ContentBlock) -> BlockOrigin:
    if isinstance(b, TextBlock):
        return BlockOrigin.TEXT
    if isinstance(b, TableBlock):
        return BlockOrigin.TABLE
    return BlockOrigin.IMAGE_TEXT


def flatten_document(d: DocumentRecord, stats: Optional[IngestStats] = None) -> List[FlatSegment]:
    """
    In-order linearization of all non-empty blocks. Section titles carry
    forward across blocks within a page and reset at page boundaries.
    """
    segments: List[FlatSegment] = []
    dropped = 0
    for page in d.pages:
        section: Optional[str] = None
        for block in page.blocks:
            if isinstance(block, TextBlock) and block.section_title:
                section = block.section_title
            text = linearize_block(block)
            if text is None:
                dropped += 1
                continue
            segments.append(FlatSegment(
                doc_id=d.doc_id,
                page_number=page.page_number,
                section_title=section,
                text=text,
                origin=_origin(block),
            ))

    if dropped:
        logger.warning(f"{d.doc_id}: dropped {dropped} whitespace-only block(s)")
    if stats is not None:
        stats.documents += 1
        stats.segments += len(segments)
        stats.dropped_blocks += dropped
        if dropped:
            stats.warnings.append(f"{d.doc_id}: dropped {dropped} whitespace-only block(s)")
    return segments
