"""
CiteGuard Retrieval & Abstention
================================

Embeds the query, retrieves top-k evidence and applies the similarity
threshold: top-1 >= tau proceeds, top-1 < tau abstains, no evidence abstains.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

from core_model import (
    Abstained,
    AbstainReason,
    ConfigError,
    ScoredChunk,
    citation_for,
    render_citation,
)
from embedding_provider import ProviderConfig, embed_texts
from provider_http import ProviderClient
from vector_index import VectorIndex

logger = logging.getLogger(__name__)

MAX_PARTIAL_CITATIONS = 3
MAX_SNIPPET_CHARS = 200

INSUFFICIENT_SUPPORT = "insufficient document support for this question"


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 5
    tau: float = 0.55

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not (-1.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau must lie in [-1, 1], got {self.tau}")


@dataclass(frozen=True)
class Proceed:
    evidence: List[ScoredChunk]
    top1: float


@dataclass(frozen=True)
class AbstainLow:
    partial_evidence: List[ScoredChunk]
    top1: float


@dataclass(frozen=True)
class AbstainEmpty:
    pass


RetrievalOutcome = Union[Proceed, AbstainLow, AbstainEmpty]


def retrieve(query: str, ix: VectorIndex, provider: ProviderConfig, cfg: RetrievalConfig,
             client: Optional[ProviderClient] = None) -> List[ScoredChunk]:
    """Top-k chunks by cosine to the embedded query; empty for an empty index"""
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    if ix.n == 0:
        return []
    (q,) = embed_texts([query], provider, client=client)
    return ix.search(q, cfg.k)


def decide(evidence: Sequence[ScoredChunk], cfg: RetrievalConfig) -> RetrievalOutcome:
    """Depends only on emptiness, the top-1 score and tau"""
    if not evidence:
        return AbstainEmpty()
    top1 = evidence[0].score
    if top1 < cfg.tau:
        return AbstainLow(partial_evidence=list(evidence), top1=top1)
    return Proceed(evidence=list(evidence), top1=top1)


def snippet(text: str, limit: int = MAX_SNIPPET_CHARS) -> str:
    flat = " ".join(text.split())
    if len(flat) <= limit:
        return flat
    return flat[:limit - 3].rstrip() + "..."


def describe_closest(evidence: Sequence[ScoredChunk]) -> List[str]:
    lines = []
    for hit in evidence[:MAX_PARTIAL_CITATIONS]:
        lines.append(f"- {render_citation(citation_for(hit.chunk))} \"{snippet(hit.chunk.text)}\"")
    return lines


def compose_abstention(outcome: Union[AbstainLow, AbstainEmpty]) -> Abstained:
    """User-facing abstention listing the closest passages, if any"""
    if isinstance(outcome, AbstainEmpty):
        message = (f"No answer is given: no relevant documents were found in the indexed corpus, "
                   f"so there is {INSUFFICIENT_SUPPORT}.")
        return Abstained(reason=AbstainReason.NO_EVIDENCE, message=message, partial_evidence=())

    closest = tuple(outcome.partial_evidence[:MAX_PARTIAL_CITATIONS])
    message = (f"No answer is given: the retrieved passages are not close enough to the question, "
               f"so there is {INSUFFICIENT_SUPPORT}.")
    if closest:
        message += ("\nThe closest passages are listed for reference; they were reviewed and are "
                    "insufficient to answer the question:\n" + "\n".join(describe_closest(closest)))
    return Abstained(
        reason=AbstainReason.LOW_SIMILARITY,
        message=message,
        partial_evidence=closest,
        top1_score=outcome.top1,
    )
