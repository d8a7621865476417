"""
CiteGuard Evaluation
====================

Runs a query set through the engine, persists per-query traces and computes
automatic metrics plus label-derived metrics from reviewer label files.

Files (UTF-8 JSON lines unless noted, each line tagged "schema": "citeguard/v1"):
    queries.jsonl   {query_id, text, jurisdiction?, category?}
    labels.jsonl    {query_id, citation_correct?, unsupported_claim?, abstention_correct?, helpfulness?}
    records.jsonl   one run record per query, in query-set order
    timings.jsonl   {query_id, wall_ms}; kept apart so records.jsonl is reproducible
    report.json     aggregate report (pretty-printed JSON object)
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core_model import SCHEMA_VERSION, CiteGuardError, ParseError, find_citation_tokens, parse_citation
from generation import ParsedParagraph, Valid, validate_against_refs
from rag_engine import CiteGuardEngine, response_payload

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 10
UNSPECIFIED = "unspecified"

STATUS_ANSWERED = "answered"
STATUS_ABSTAINED = "abstained"
STATUS_ERROR = "error"


class EvalError(CiteGuardError):
    pass


class DuplicateQueryId(EvalError):
    pass


class MissingLabel(EvalError):
    def __init__(self, query_id: str, field_name: str):
        self.query_id = query_id
        self.field = field_name
        super().__init__(f"query {query_id!r} is missing label field {field_name!r}")


class UnknownQueryId(EvalError):
    def __init__(self, query_id: str):
        self.query_id = query_id
        super().__init__(f"label references unknown query_id {query_id!r}")


class InvalidLabel(EvalError):
    pass


class SchemaMismatch(EvalError):
    pass


# ---------------------------------------------------------------------------
# Line schemas
# ---------------------------------------------------------------------------

class _QueryLine(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, strict=True)
    schema_version: Optional[str] = Field(default=None, alias="schema")
    query_id: str = Field(min_length=1)
    text: str = Field(min_length=1)
    jurisdiction: Optional[str] = None
    category: Optional[str] = None


class _LabelLine(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, strict=True)
    schema_version: Optional[str] = Field(default=None, alias="schema")
    query_id: str = Field(min_length=1)
    citation_correct: Optional[bool] = None
    unsupported_claim: Optional[bool] = None
    abstention_correct: Optional[bool] = None
    helpfulness: Optional[int] = Field(default=None, ge=1, le=5)


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    jurisdiction: Optional[str] = None
    category: Optional[str] = None


@dataclass(frozen=True)
class HumanLabel:
    query_id: str
    citation_correct: Optional[bool] = None
    unsupported_claim: Optional[bool] = None
    abstention_correct: Optional[bool] = None
    helpfulness: Optional[int] = None


@dataclass
class RunRecord:
    query_id: str
    status: str
    response: Optional[Dict]
    top1_score: Optional[float]
    attempts_used: int
    format_compliant: Optional[bool] = None
    error: Optional[str] = None
    jurisdiction: Optional[str] = None
    category: Optional[str] = None
    wall_ms: int = 0

    def to_dict(self) -> Dict:
        return {
            "schema": SCHEMA_VERSION,
            "query_id": self.query_id,
            "status": self.status,
            "response": self.response,
            "top1_score": self.top1_score,
            "attempts_used": self.attempts_used,
            "format_compliant": self.format_compliant,
            "error": self.error,
            "jurisdiction": self.jurisdiction,
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RunRecord":
        if data.get("schema") != SCHEMA_VERSION:
            raise SchemaMismatch(f"record schema {data.get('schema')!r} != {SCHEMA_VERSION!r}")
        return cls(
            query_id=data["query_id"],
            status=data["status"],
            response=data.get("response"),
            top1_score=data.get("top1_score"),
            attempts_used=int(data.get("attempts_used", 0)),
            format_compliant=data.get("format_compliant"),
            error=data.get("error"),
            jurisdiction=data.get("jurisdiction"),
            category=data.get("category"),
        )


@dataclass
class EvalReport:
    n_queries: int
    n_answered: int
    n_abstained: int
    n_errors: int
    abstention_rate: float
    format_compliance_rate: Optional[float]
    replay_consistent: bool
    top1_stats: Optional[Dict]
    abstention_by_jurisdiction: Dict[str, float] = field(default_factory=dict)
    abstention_by_category: Dict[str, float] = field(default_factory=dict)
    mean_top1_answered: Optional[float] = None
    mean_top1_abstained: Optional[float] = None
    n_labeled: Optional[int] = None
    citation_support_rate: Optional[float] = None
    hallucination_rate: Optional[float] = None
    abstention_accuracy: Optional[float] = None
    mean_helpfulness: Optional[float] = None

    def rendered(self) -> Dict[str, str]:
        out = {"abstention_rate": format_percent(self.abstention_rate)}
        if self.format_compliance_rate is not None:
            out["format_compliance"] = format_percent(self.format_compliance_rate)
        if self.citation_support_rate is not None:
            out["citation_support"] = format_percent(self.citation_support_rate)
        if self.hallucination_rate is not None:
            out["hallucination_rate"] = format_percent(self.hallucination_rate)
        if self.abstention_accuracy is not None:
            out["abstention_accuracy"] = format_percent(self.abstention_accuracy)
        if self.mean_helpfulness is not None:
            out["helpfulness"] = f"{self.mean_helpfulness:.1f} / 5.0"
        return out

    def to_dict(self) -> Dict:
        """Absent metrics are omitted rather than written as null"""
        data = {
            "schema": SCHEMA_VERSION,
            "n_queries": self.n_queries,
            "n_answered": self.n_answered,
            "n_abstained": self.n_abstained,
            "n_errors": self.n_errors,
            "abstention_rate": self.abstention_rate,
            "replay_consistent": self.replay_consistent,
            "abstention_by_jurisdiction": self.abstention_by_jurisdiction,
            "abstention_by_category": self.abstention_by_category,
            "rendered": self.rendered(),
        }
        optional = {
            "format_compliance_rate": self.format_compliance_rate,
            "top1_stats": self.top1_stats,
            "mean_top1_answered": self.mean_top1_answered,
            "mean_top1_abstained": self.mean_top1_abstained,
            "n_labeled": self.n_labeled,
            "citation_support_rate": self.citation_support_rate,
            "hallucination_rate": self.hallucination_rate,
            "abstention_accuracy": self.abstention_accuracy,
            "mean_helpfulness": self.mean_helpfulness,
        }
        data.update({key: value for key, value in optional.items() if value is not None})
        return data


def format_percent(rate: float) -> str:
    return f"{100.0 * rate:.1f}%"


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def _read_jsonl(path: Union[str, Path]) -> List[tuple]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append((lineno, json.loads(line)))
            except json.JSONDecodeError as e:
                raise EvalError(f"{Path(path).name}:{lineno}: invalid JSON ({e.msg})") from e
    return out


def _check_schema(name: str, lineno: int, version: Optional[str]):
    if version is not None and version != SCHEMA_VERSION:
        raise SchemaMismatch(f"{name}:{lineno}: schema {version!r} != {SCHEMA_VERSION!r}")


def load_queries(path: Union[str, Path]) -> List[QueryRecord]:
    """Read queries.jsonl; query ids must be unique"""
    name = Path(path).name
    queries: List[QueryRecord] = []
    seen = set()
    for lineno, raw in _read_jsonl(path):
        try:
            line = _QueryLine.model_validate(raw)
        except ValidationError as e:
            raise EvalError(f"{name}:{lineno}: {e.errors()[0]['msg']}") from e
        _check_schema(name, lineno, line.schema_version)
        if line.query_id in seen:
            raise DuplicateQueryId(f"{name}:{lineno}: duplicate query_id {line.query_id!r}")
        seen.add(line.query_id)
        queries.append(QueryRecord(line.query_id, line.text, line.jurisdiction, line.category))
    return queries


def load_labels(path: Union[str, Path]) -> List[HumanLabel]:
    """Read labels.jsonl; every label value is range-checked"""
    name = Path(path).name
    labels: List[HumanLabel] = []
    for lineno, raw in _read_jsonl(path):
        try:
            line = _LabelLine.model_validate(raw)
        except ValidationError as e:
            raise InvalidLabel(f"{name}:{lineno}: {e.errors()[0]['msg']}") from e
        _check_schema(name, lineno, line.schema_version)
        labels.append(HumanLabel(line.query_id, line.citation_correct, line.unsupported_claim,
                                 line.abstention_correct, line.helpfulness))
    return labels


def _dump_line(data: Dict) -> str:
    return json.dumps(data, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def write_records(path: Union[str, Path], records: Sequence[RunRecord]):
    """Deterministic records.jsonl: no timings, sorted keys"""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(_dump_line(record.to_dict()))


def write_timings(path: Union[str, Path], records: Sequence[RunRecord]):
    """Wall-clock sidecar, kept out of records.jsonl"""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(_dump_line({"schema": SCHEMA_VERSION, "query_id": record.query_id, "wall_ms": record.wall_ms}))


def read_records(path: Union[str, Path]) -> List[RunRecord]:
    return [RunRecord.from_dict(raw) for _, raw in _read_jsonl(path)]


def write_report(path: Union[str, Path], report: EvalReport):
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def payload_compliant(payload: Dict) -> bool:
    """Re-validate a stored answered payload against the evidence it lists"""
    refs = {}
    for item in payload.get("evidence", []):
        try:
            c = parse_citation(item["citation"])
        except (ParseError, KeyError, TypeError):
            return False
        refs[(c.doc_id, c.chunk_id)] = (c.page_start, c.page_end)
    paragraphs = [ParsedParagraph(p["text"], tuple(find_citation_tokens(p["text"])))
                  for p in payload.get("paragraphs", [])]
    return isinstance(validate_against_refs(paragraphs, refs), Valid)


def run_query(query: QueryRecord, engine: CiteGuardEngine) -> RunRecord:
    started = time.perf_counter()
    record = RunRecord(query_id=query.query_id, status=STATUS_ERROR, response=None, top1_score=None,
                       attempts_used=0, jurisdiction=query.jurisdiction, category=query.category)
    try:
        payload = response_payload(engine.answer(query.text))
        record.response = payload
        record.status = payload["status"]
        record.top1_score = payload.get("top1_score")
        record.attempts_used = payload.get("attempts_used", 0)
        if record.status == STATUS_ANSWERED:
            record.format_compliant = payload_compliant(payload)
    except Exception as e:
        logger.error(f"Query {query.query_id} failed: {e}")
        record.error = f"{type(e).__name__}: {e}"
    record.wall_ms = int(round((time.perf_counter() - started) * 1000))
    return record


def run_queries(queries: Sequence[QueryRecord], engine: CiteGuardEngine, parallelism: int = 1) -> List[RunRecord]:
    """One record per query in input order; failures are recorded, never raised"""
    logger.info(f"Running {len(queries)} queries (parallelism={parallelism})")
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as executor:
        records = list(executor.map(lambda q: run_query(q, engine), queries))
    n_abstained = sum(r.status == STATUS_ABSTAINED for r in records)
    n_errors = sum(r.status == STATUS_ERROR for r in records)
    logger.info(f"Run complete: {len(records) - n_abstained - n_errors} answered, "
                f"{n_abstained} abstained, {n_errors} errors")
    return records


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def top1_stats(scores: Sequence[float]) -> Optional[Dict]:
    """min/median/max and 10 equal bins over [0, 1]; out-of-range scores clip to the end bins"""
    if not len(scores):
        return None
    arr = np.asarray(scores, dtype=np.float64)
    counts, edges = np.histogram(np.clip(arr, 0.0, 1.0), bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return {
        "min": float(arr.min()),
        "median": float(np.median(arr)),
        "max": float(arr.max()),
        "histogram": [int(c) for c in counts],
        "bin_edges": [round(float(e), 2) for e in edges],
    }


def _abstention_breakdown(frame: pd.DataFrame, column: str) -> Dict[str, float]:
    if frame.empty:
        return {}
    rates = frame.groupby(column, sort=True)["abstained"].mean()
    return {str(key): float(value) for key, value in rates.items()}


def _mean_top1(frame: pd.DataFrame, abstained: bool) -> Optional[float]:
    if frame.empty:
        return None
    values = frame.loc[frame["abstained"] == abstained, "top1"]
    return float(values.astype(float).mean()) if len(values) else None


def auto_metrics(records: Sequence[RunRecord]) -> EvalReport:
    """Metrics that need no human labels"""
    if not records:
        raise EvalError("auto_metrics requires at least one record")
    answered = [r for r in records if r.status == STATUS_ANSWERED]
    n_abstained = sum(r.status == STATUS_ABSTAINED for r in records)
    n_errors = sum(r.status == STATUS_ERROR for r in records)

    replayed = [payload_compliant(r.response) for r in answered]
    live = [r.format_compliant for r in answered]
    compliance = sum(replayed) / len(answered) if answered else None

    scored = [r.top1_score for r in records if r.top1_score is not None]

    frame = pd.DataFrame([{
        "jurisdiction": r.jurisdiction or UNSPECIFIED,
        "category": r.category or UNSPECIFIED,
        "abstained": r.status == STATUS_ABSTAINED,
        "top1": r.top1_score,
    } for r in records if r.status != STATUS_ERROR], columns=["jurisdiction", "category", "abstained", "top1"])
    with_score = frame.dropna(subset=["top1"])

    return EvalReport(
        n_queries=len(records),
        n_answered=len(answered),
        n_abstained=n_abstained,
        n_errors=n_errors,
        abstention_rate=n_abstained / len(records),
        format_compliance_rate=compliance,
        replay_consistent=replayed == live,
        top1_stats=top1_stats(scored),
        abstention_by_jurisdiction=_abstention_breakdown(frame, "jurisdiction"),
        abstention_by_category=_abstention_breakdown(frame, "category"),
        mean_top1_answered=_mean_top1(with_score, False),
        mean_top1_abstained=_mean_top1(with_score, True),
    )


def _require(label: HumanLabel, name: str) -> bool:
    value = getattr(label, name)
    if value is None:
        raise MissingLabel(label.query_id, name)
    return value


def report_metrics(records: Sequence[RunRecord], labels: Sequence[HumanLabel]) -> EvalReport:
    """
    Automatic metrics plus label-derived rates. Answered-population rates divide
    by labeled answered records; abstention accuracy divides by labeled
    abstained records. A rate with an empty denominator is left absent.
    """
    report = auto_metrics(records)
    if not labels:
        return report

    by_id = {r.query_id: r for r in records}
    seen = set()
    citation_ok = unsupported = answered_labeled = 0
    abstention_ok = abstained_labeled = 0
    helpfulness: List[int] = []

    for label in labels:
        record = by_id.get(label.query_id)
        if record is None:
            raise UnknownQueryId(label.query_id)
        if label.query_id in seen:
            raise InvalidLabel(f"duplicate label for query {label.query_id!r}")
        seen.add(label.query_id)

        if record.status == STATUS_ANSWERED:
            if label.abstention_correct is not None:
                raise InvalidLabel(f"{label.query_id}: abstention_correct given for an answered query")
            answered_labeled += 1
            citation_ok += _require(label, "citation_correct")
            unsupported += _require(label, "unsupported_claim")
            if label.helpfulness is not None:
                helpfulness.append(label.helpfulness)
        elif record.status == STATUS_ABSTAINED:
            if label.helpfulness is not None:
                raise InvalidLabel(f"{label.query_id}: helpfulness given for an abstained query")
            if label.citation_correct is not None or label.unsupported_claim is not None:
                raise InvalidLabel(f"{label.query_id}: answer labels given for an abstained query")
            abstained_labeled += 1
            abstention_ok += _require(label, "abstention_correct")
        else:
            raise InvalidLabel(f"{label.query_id}: query failed during the run and cannot be labeled")

    report.n_labeled = len(seen)
    if answered_labeled:
        report.citation_support_rate = citation_ok / answered_labeled
        report.hallucination_rate = unsupported / answered_labeled
    if abstained_labeled:
        report.abstention_accuracy = abstention_ok / abstained_labeled
    if helpfulness:
        report.mean_helpfulness = float(np.mean(helpfulness))
    return report


# ---------------------------------------------------------------------------
# Label sampling
# ---------------------------------------------------------------------------

def sample_for_labeling(records: Sequence[RunRecord], per_stratum: int, seed: int = 0) -> List[Dict]:
    """
    Up to per_stratum records from every (status, jurisdiction) stratum, drawn
    with a seeded RNG, returned as label templates with empty fields.
    """
    if per_stratum < 1:
        raise ValueError("per_stratum must be >= 1")
    rng = np.random.default_rng(seed)
    strata: Dict[tuple, List[RunRecord]] = {}
    for r in records:
        if r.status == STATUS_ERROR:
            continue
        strata.setdefault((r.status, r.jurisdiction or UNSPECIFIED), []).append(r)

    chosen: List[RunRecord] = []
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda r: r.query_id)
        take = min(per_stratum, len(members))
        picks = rng.choice(len(members), size=take, replace=False)
        chosen.extend(members[i] for i in sorted(picks))

    templates = []
    for r in sorted(chosen, key=lambda r: r.query_id):
        row = {"schema": SCHEMA_VERSION, "query_id": r.query_id}
        if r.status == STATUS_ANSWERED:
            row.update({"citation_correct": None, "unsupported_claim": None, "helpfulness": None})
        else:
            row["abstention_correct"] = None
        templates.append(row)
    logger.info(f"Sampled {len(templates)} records from {len(strata)} strata for labeling")
    return templates


def write_label_templates(path: Union[str, Path], templates: Sequence[Dict]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in templates:
            f.write(_dump_line(row))
