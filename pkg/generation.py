"""
CiteGuard Generation
====================

Evidence-only prompting, paragraph-level citation validation and the
regenerate-then-abstain loop.

Generation wire contract:
    POST <base_url>/generate {"model", "prompt", "max_tokens", "temperature"} -> {"text"}
"""

import logging
import re
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

from core_model import (
    Abstained,
    AbstainReason,
    AnswerParagraph,
    Answered,
    CiteGuardError,
    ConfigError,
    ParseError,
    ScoredChunk,
    SystemResponse,
    citation_for,
    find_citation_tokens,
    parse_citation,
    render_citation,
    split_paragraphs,
)
from embedding_provider import ProviderConfig, ProviderKind
from provider_http import ProviderBadResponse, ProviderClient, ProviderError
from retrieval_abstention import MAX_PARTIAL_CITATIONS, Proceed, describe_closest

logger = logging.getLogger(__name__)

DEFAULT_LLM_MODEL = "meta-llama/Llama-3.2-3B-Instruct"

REINFORCEMENT_SUFFIX_V1 = (
    "REMINDER (v1): your previous answer was rejected because at least one paragraph lacked a valid "
    "citation. Every paragraph MUST end with one or more citations copied exactly from the evidence "
    "headers above. Cite only evidence blocks listed above. If the evidence does not answer the "
    "question, say so explicitly and cite the block you relied on."
)

INSTRUCTIONS = (
    "SYSTEM INSTRUCTIONS\n"
    "You answer questions about fiscal and regulatory documents for compliance analysts.\n"
    "- Use ONLY the evidence blocks below. Do not use prior knowledge, outside sources or assumptions.\n"
    "- Write short, clear paragraphs separated by one blank line.\n"
    "- Every paragraph must carry at least one citation of the form doc:ID|p:START-END|c:CHUNK "
    "wrapped in square brackets, copied exactly from the header of the evidence block it relies on.\n"
    "- If the evidence is partial or ambiguous, state the limitation explicitly instead of inferring "
    "missing details."
)

EVIDENCE_HEADER = "### EVIDENCE {index} {citation}"
EVIDENCE_END = "### END EVIDENCE"
_EVIDENCE_BLOCK_RE = re.compile(
    r"^### EVIDENCE \d+ (\[doc:[^\[\]\n]*\])\n(.*?)\n### END EVIDENCE$", re.MULTILINE | re.DOTALL)
_SENTENCE_RE = re.compile(r"(?<=[.?!])\s")


class EmptyEvidence(CiteGuardError):
    pass


@dataclass(frozen=True)
class GenConfig:
    max_attempts: int = 3
    max_tokens: int = 512
    temperature: float = 0.0
    reinforcement_suffix: str = REINFORCEMENT_SUFFIX_V1
    # False gives the unenforced baseline: one draft, returned without validation
    enforce_citations: bool = True

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")


class FailureReason(str, Enum):
    NO_CITATION = "NoCitation"
    UNPARSABLE_CITATION = "UnparsableCitation"
    CITATION_NOT_IN_EVIDENCE = "CitationNotInEvidence"
    PAGE_OUT_OF_CHUNK_RANGE = "PageOutOfChunkRange"
    EMPTY_ANSWER = "EmptyAnswer"


@dataclass(frozen=True)
class ValidationFailure:
    paragraph_index: int
    reason: FailureReason
    citation: Optional[str] = None


@dataclass(frozen=True)
class Valid:
    pass


@dataclass(frozen=True)
class Invalid:
    failures: Tuple[ValidationFailure, ...]


ValidationResult = Union[Valid, Invalid]


@dataclass(frozen=True)
class ParsedParagraph:
    text: str
    citation_strings: Tuple[str, ...]


# ---------------------------------------------------------------------------
# Prompting
# ---------------------------------------------------------------------------

def build_prompt(query: str, evidence: Sequence[ScoredChunk], attempt: int = 1,
                 cfg: Optional[GenConfig] = None) -> str:
    """Pure function of (query, evidence, attempt); evidence keeps retrieval order"""
    if not evidence:
        raise EmptyEvidence("cannot build a prompt without evidence")
    cfg = cfg or GenConfig()
    parts = [INSTRUCTIONS, "", "EVIDENCE"]
    for i, hit in enumerate(evidence, start=1):
        parts.append(EVIDENCE_HEADER.format(index=i, citation=render_citation(citation_for(hit.chunk))))
        parts.append(hit.chunk.text)
        parts.append(EVIDENCE_END)
    parts += ["", "QUESTION", query]
    if attempt >= 2:
        parts += ["", cfg.reinforcement_suffix]
    parts += ["", "ANSWER"]
    return "\n".join(parts) + "\n"


def extractive_answer(prompt: str, max_blocks: int = 2, max_chars: int = 240) -> str:
    """Deterministic offline answer: the leading sentence of the top evidence blocks, each cited"""
    paragraphs = []
    for match in _EVIDENCE_BLOCK_RE.finditer(prompt):
        citation, body = match.group(1), match.group(2)
        flat = " ".join(body.split())
        if not flat:
            continue
        sentence = _SENTENCE_RE.split(flat, maxsplit=1)[0][:max_chars]
        paragraphs.append(f"The cited guidance states: {sentence} {citation}")
        if len(paragraphs) >= max_blocks:
            break
    return "\n\n".join(paragraphs)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

class Generator:
    def generate(self, prompt: str, cfg: GenConfig) -> str:
        raise NotImplementedError


class RemoteGenerator(Generator):
    def __init__(self, provider: ProviderConfig, client: Optional[ProviderClient] = None):
        self.provider = provider
        self.client = client or provider.client()

    def generate(self, prompt: str, cfg: GenConfig) -> str:
        body = self.client.post_json("/generate", {
            "model": self.provider.model_id,
            "prompt": prompt,
            "max_tokens": cfg.max_tokens,
            "temperature": cfg.temperature,
        })
        text = body.get("text")
        if not isinstance(text, str):
            raise ProviderBadResponse("generate response lacks a string 'text' field")
        return text


class ExtractiveMockGenerator(Generator):
    def generate(self, prompt: str, cfg: GenConfig) -> str:
        return extractive_answer(prompt)


class ScriptedGenerator(Generator):
    """Replays fixed outputs by call ordinal; the last output repeats"""

    def __init__(self, outputs: Sequence[str]):
        if not outputs:
            raise ValueError("ScriptedGenerator needs at least one output")
        self.outputs = list(outputs)
        self.prompts: List[str] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.prompts)

    def generate(self, prompt: str, cfg: GenConfig) -> str:
        with self._lock:
            ordinal = len(self.prompts)
            self.prompts.append(prompt)
        return self.outputs[min(ordinal, len(self.outputs) - 1)]


def make_generator(provider: ProviderConfig, client: Optional[ProviderClient] = None) -> Generator:
    """Extractive mock for the mock provider, HTTP generator otherwise"""
    if provider.kind == ProviderKind.DETERMINISTIC_MOCK:
        return ExtractiveMockGenerator()
    return RemoteGenerator(provider, client=client)


def call_generator(prompt: str, provider: ProviderConfig, cfg: GenConfig,
                   client: Optional[ProviderClient] = None) -> str:
    """One generation call through the configured provider"""
    return make_generator(provider, client=client).generate(prompt, cfg)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def parse_paragraphs(raw: str) -> List[ParsedParagraph]:
    """Split raw model output into paragraphs and collect their citation tokens"""
    return [ParsedParagraph(text=p, citation_strings=tuple(find_citation_tokens(p)))
            for p in split_paragraphs(raw)]


def validate_against_refs(paragraphs: Sequence[ParsedParagraph],
                          refs: Dict[Tuple[str, str], Tuple[int, int]]) -> ValidationResult:
    """refs maps (doc_id, chunk_id) -> (page_start, page_end) of each evidence chunk"""
    if not paragraphs:
        return Invalid(failures=(ValidationFailure(0, FailureReason.EMPTY_ANSWER),))
    failures = []
    for idx, para in enumerate(paragraphs):
        if not para.citation_strings:
            failures.append(ValidationFailure(idx, FailureReason.NO_CITATION))
            continue
        for token in para.citation_strings:
            try:
                c = parse_citation(token)
            except ParseError:
                failures.append(ValidationFailure(idx, FailureReason.UNPARSABLE_CITATION, token))
                continue
            span = refs.get((c.doc_id, c.chunk_id))
            if span is None:
                failures.append(ValidationFailure(idx, FailureReason.CITATION_NOT_IN_EVIDENCE, token))
            elif not (span[0] <= c.page_start and c.page_end <= span[1]):
                failures.append(ValidationFailure(idx, FailureReason.PAGE_OUT_OF_CHUNK_RANGE, token))
    return Invalid(failures=tuple(failures)) if failures else Valid()


def evidence_refs(evidence: Sequence[ScoredChunk]) -> Dict[Tuple[str, str], Tuple[int, int]]:
    return {(h.chunk.doc_id, h.chunk.chunk_id): (h.chunk.page_start, h.chunk.page_end) for h in evidence}


def validate_answer(paragraphs: Sequence[ParsedParagraph], evidence: Sequence[ScoredChunk]) -> ValidationResult:
    """Valid only when every paragraph cites evidence within its page range"""
    return validate_against_refs(paragraphs, evidence_refs(evidence))


def _summarize(result: Invalid) -> str:
    counts: Dict[str, int] = {}
    for f in result.failures:
        counts[f.reason.value] = counts.get(f.reason.value, 0) + 1
    return ", ".join(f"{reason} x{n}" for reason, n in sorted(counts.items()))


def _ungrounded(evidence: Sequence[ScoredChunk], top1: float, attempts: int, note: str) -> Abstained:
    closest = tuple(evidence[:MAX_PARTIAL_CITATIONS])
    message = (f"No answer is given: {note}, so there is insufficient document support for "
               f"a grounded answer to this question.")
    if closest:
        message += ("\nThe passages that were considered are listed for reference:\n"
                    + "\n".join(describe_closest(closest)))
    return Abstained(
        reason=AbstainReason.CITATION_VALIDATION_FAILED,
        message=message,
        partial_evidence=closest,
        top1_score=top1,
        attempts_used=attempts,
    )


def unvalidated_answer(paragraphs: Sequence[ParsedParagraph], evidence: Sequence[ScoredChunk],
                       top1: float) -> Answered:
    """First draft as is; citation tokens that do not parse are dropped from the paragraph's list"""
    kept = []
    for p in paragraphs:
        citations = []
        for s in p.citation_strings:
            try:
                citations.append(parse_citation(s))
            except ParseError:
                continue
        kept.append(AnswerParagraph(p.text, tuple(citations)))
    return Answered(paragraphs=tuple(kept), evidence=tuple(evidence), top1_score=top1, attempts_used=1)


def answer_with_enforcement(query: str, outcome: Proceed, generator: Generator,
                            cfg: GenConfig) -> SystemResponse:
    """
    Generate, parse and validate up to cfg.max_attempts times. The first valid
    answer is returned; otherwise the query is abstained. With
    cfg.enforce_citations off the first draft is returned unvalidated.
    """
    evidence = list(outcome.evidence)
    if not evidence:
        raise EmptyEvidence("answer_with_enforcement requires a Proceed outcome with evidence")

    for attempt in range(1, cfg.max_attempts + 1):
        prompt = build_prompt(query, evidence, attempt, cfg)
        try:
            raw = generator.generate(prompt, cfg)
        except ProviderError as e:
            logger.error(f"Generator failed on attempt {attempt}: {e}")
            return _ungrounded(evidence, outcome.top1, attempt,
                               "the answer generator could not be reached to draft a cited answer")

        paragraphs = parse_paragraphs(raw)
        if not cfg.enforce_citations:
            return unvalidated_answer(paragraphs, evidence, outcome.top1)
        result = validate_answer(paragraphs, evidence)
        if isinstance(result, Valid):
            if attempt > 1:
                logger.info(f"Citation validation passed on attempt {attempt}/{cfg.max_attempts}")
            return Answered(
                paragraphs=tuple(AnswerParagraph(p.text, tuple(parse_citation(s) for s in p.citation_strings))
                                 for p in paragraphs),
                evidence=tuple(evidence),
                top1_score=outcome.top1,
                attempts_used=attempt,
            )
        logger.warning(f"Attempt {attempt}/{cfg.max_attempts}: citation validation failed ({_summarize(result)})")

    return _ungrounded(evidence, outcome.top1, cfg.max_attempts,
                       f"the drafted answer could not be grounded with valid citations after "
                       f"{cfg.max_attempts} attempt(s)")
