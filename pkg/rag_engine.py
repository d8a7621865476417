"""
CiteGuard RAG Engine
====================

Query -> retrieve -> threshold decision -> citation-enforced generation.

Every query ends in exactly one SystemResponse: Answered (every paragraph
cited against the supplied evidence) or Abstained (low similarity, no
evidence, or citations that could not be validated).
"""

import json
import logging
from typing import Dict, Optional

from core_model import Abstained, Answered, SystemResponse, citation_for, render_citation
from embedding_provider import ProviderConfig, ZeroVector
from generation import GenConfig, Generator, answer_with_enforcement
from provider_http import ProviderClient
from retrieval_abstention import (
    AbstainEmpty,
    Proceed,
    RetrievalConfig,
    compose_abstention,
    decide,
    retrieve,
)
from vector_index import VectorIndex

logger = logging.getLogger(__name__)


class CiteGuardEngine:
    """Stateless over an immutable index; safe to share across request threads"""

    def __init__(self, index: VectorIndex, embed_provider: ProviderConfig, generator: Generator,
                 retrieval: Optional[RetrievalConfig] = None, generation: Optional[GenConfig] = None,
                 embed_client: Optional[ProviderClient] = None):
        self.index = index
        self.embed_provider = embed_provider
        self.generator = generator
        self.retrieval = retrieval or RetrievalConfig()
        self.generation = generation or GenConfig()
        self.embed_client = embed_client

    def answer(self, query: str, k: Optional[int] = None, tau: Optional[float] = None) -> SystemResponse:
        """Retrieve, decide, then generate with enforcement or abstain"""
        cfg = RetrievalConfig(
            k=self.retrieval.k if k is None else k,
            tau=self.retrieval.tau if tau is None else tau,
        )
        try:
            evidence = retrieve(query, self.index, self.embed_provider, cfg, client=self.embed_client)
        except ZeroVector:
            # query without any indexable token
            evidence = []

        outcome = decide(evidence, cfg)
        if not isinstance(outcome, Proceed):
            response = compose_abstention(outcome)
            top1 = "n/a" if isinstance(outcome, AbstainEmpty) else f"{outcome.top1:.4f}"
            logger.info(f"Abstained ({response.reason.value}): top1={top1} tau={cfg.tau}")
            return response

        response = answer_with_enforcement(query, outcome, self.generator, self.generation)
        if isinstance(response, Answered):
            logger.info(f"Answered: top1={outcome.top1:.4f} paragraphs={len(response.paragraphs)} "
                        f"attempts={response.attempts_used}")
        else:
            logger.info(f"Abstained ({response.reason.value}) after {response.attempts_used} attempt(s)")
        return response


def response_payload(response: SystemResponse) -> Dict:
    """JSON body shared by `query --json` and POST /v1/query"""
    if isinstance(response, Answered):
        return {
            "status": "answered",
            "paragraphs": [
                {"text": p.text, "citations": [render_citation(c) for c in p.citations]}
                for p in response.paragraphs
            ],
            "evidence": [
                {"citation": render_citation(citation_for(h.chunk)), "score": h.score}
                for h in response.evidence
            ],
            "top1_score": response.top1_score,
            "attempts_used": response.attempts_used,
        }
    payload = {
        "status": "abstained",
        "reason": response.reason.value,
        "message": response.message,
        "evidence": [
            {"citation": render_citation(citation_for(h.chunk)), "score": h.score}
            for h in response.partial_evidence
        ],
    }
    if response.top1_score is not None:
        payload["top1_score"] = response.top1_score
    payload["attempts_used"] = response.attempts_used
    return payload


def render_payload(payload: Dict) -> str:
    """Same serialization as the service's JSONResponse, so CLI and HTTP bodies are byte-identical"""
    return json.dumps(payload, ensure_ascii=False, allow_nan=False, indent=None, separators=(",", ":"))


def is_abstained(response: SystemResponse) -> bool:
    return isinstance(response, Abstained)
