import math
import random

import pytest

from core_model import Abstained, AbstainReason, Answered, ConfigError, ScoredChunk, find_citation_tokens
from embedding_provider import ProviderConfig, fnv1a_64
from generation import ExtractiveMockGenerator
from rag_engine import CiteGuardEngine
from retrieval_abstention import (
    MAX_SNIPPET_CHARS,
    AbstainEmpty,
    AbstainLow,
    Proceed,
    RetrievalConfig,
    compose_abstention,
    decide,
    retrieve,
)
import vector_index

DIM = 65536
MOCK = ProviderConfig.from_url("mock", mock_dim=DIM)

# chunk texts and queries use distinct tokens, so mock cosine = overlap / sqrt(m * n)
# 7 of 12 chunk tokens shared with a 14-token query: 7 / sqrt(168) = 0.5401
# 7 of 12 chunk tokens shared with a 13-token query: 7 / sqrt(156) = 0.5604
DEDUCTION = "standard deduction single filer amount table married jointly head household widow dependent"
GAINS = "capital gains holding period long term short basis sale asset collectible depreciation"
Q_LOW = "standard deduction single filer amount table married holiday weather garden bicycle violin harbor meadow"
Q_HIGH = "capital gains holding period long term short apple banana cherry lantern pebble quartz"


def assert_no_bucket_collisions(*texts):
    tokens = {t for text in texts for t in text.split()}
    buckets = {fnv1a_64(t.encode()) % DIM for t in tokens}
    assert len(buckets) == len(tokens)


def scored(chunk, score):
    return ScoredChunk(chunk=chunk, score=score)


@pytest.fixture
def threshold_index(make_chunk, mock_index):
    assert_no_bucket_collisions(DEDUCTION, GAINS, Q_LOW, Q_HIGH)
    chunks = [make_chunk("irs-501", "c0000", DEDUCTION), make_chunk("irs-550", "c0000", GAINS, 2, 3)]
    return mock_index(chunks, dim=DIM)


def test_config_validation():
    with pytest.raises(ConfigError):
        RetrievalConfig(k=0)
    with pytest.raises(ConfigError):
        RetrievalConfig(tau=1.01)
    assert RetrievalConfig() == RetrievalConfig(k=5, tau=0.55)


def test_identical_text_ranks_first(make_chunk, mock_index):
    chunks = [make_chunk("d", f"c{i:04d}", t) for i, t in enumerate(
        ["alpha beta gamma", "standard deduction for a single filer", "capital gains"])]
    ix = mock_index(chunks)
    hits = retrieve("standard deduction for a single filer", ix, ProviderConfig(), RetrievalConfig())
    assert hits[0].chunk.chunk_id == "c0001"
    assert abs(hits[0].score - 1.0) <= 1e-9


def test_empty_index():
    assert retrieve("anything", vector_index.build([], []), ProviderConfig(), RetrievalConfig()) == []


def test_engineered_ranking(make_chunk, mock_index):
    a = "standard deduction single filer amount table"
    b = "standard deduction capital gains"
    c = "holding period long term"
    q = "standard deduction single filer"
    assert_no_bucket_collisions(a, b, c, q)
    ix = mock_index([make_chunk("d", "c0000", c), make_chunk("d", "c0001", b), make_chunk("d", "c0002", a)],
                    dim=DIM)
    hits = retrieve(q, ix, MOCK, RetrievalConfig(k=3))
    assert [h.chunk.chunk_id for h in hits] == ["c0002", "c0001", "c0000"]
    assert hits[0].score == pytest.approx(4 / math.sqrt(4 * 6), abs=1e-9)
    assert hits[1].score == pytest.approx(2 / math.sqrt(4 * 4), abs=1e-9)
    assert hits[2].score == pytest.approx(0.0, abs=1e-9)


def test_decide_boundaries(make_chunk):
    chunk = make_chunk("d", "c0000", "text")
    cfg = RetrievalConfig()
    assert isinstance(decide([scored(chunk, 0.56)], cfg), Proceed)
    assert isinstance(decide([scored(chunk, 0.54)], cfg), AbstainLow)
    assert isinstance(decide([scored(chunk, 0.55)], cfg), Proceed)
    assert isinstance(decide([], cfg), AbstainEmpty)


def test_decide_ignores_everything_but_top1(make_chunk):
    a, b = make_chunk("d", "c0000", "one"), make_chunk("e", "c0001", "two")
    cfg = RetrievalConfig(tau=0.5)
    assert type(decide([scored(a, 0.6), scored(b, 0.1)], cfg)) is type(decide([scored(b, 0.6)], cfg))


def test_abstain_empty_message():
    response = compose_abstention(AbstainEmpty())
    assert response.reason == AbstainReason.NO_EVIDENCE
    assert "no relevant documents" in response.message
    assert "insufficient" in response.message
    assert response.partial_evidence == ()


def test_abstain_low_lists_closest(make_chunk):
    hits = [scored(make_chunk("d", "c0000", "x " * 400, 1, 2), 0.4), scored(make_chunk("d", "c0001", "y"), 0.3)]
    response = compose_abstention(AbstainLow(partial_evidence=hits, top1=0.4))
    assert response.reason == AbstainReason.LOW_SIMILARITY
    assert find_citation_tokens(response.message) == ["[doc:d|p:1-2|c:c0000]", "[doc:d|p:1-1|c:c0001]"]
    assert len(response.partial_evidence) == 2
    assert response.top1_score == 0.4


def test_abstention_quotes_are_bounded(make_chunk):
    rng = random.Random(4)
    for _ in range(50):
        hits = [scored(make_chunk("d", f"c{i:04d}", " ".join(rng.choice(["tax", "line", "credit", "form"])
                                                              for _ in range(rng.randint(1, 300)))),
                       0.5 - i * 0.1) for i in range(rng.randint(1, 6))]
        message = compose_abstention(AbstainLow(partial_evidence=hits, top1=0.5)).message
        quotes = [line.split('"')[1] for line in message.splitlines() if line.startswith("- ")]
        assert len(quotes) == min(3, len(hits))
        assert all(len(q) <= MAX_SNIPPET_CHARS for q in quotes)


def test_threshold_fixtures_abstain_then_answer(threshold_index):
    engine = CiteGuardEngine(threshold_index, MOCK, ExtractiveMockGenerator())

    low = engine.answer(Q_LOW)
    assert isinstance(low, Abstained)
    assert low.reason == AbstainReason.LOW_SIMILARITY
    assert low.top1_score == pytest.approx(7 / math.sqrt(12 * 14), abs=1e-9)
    assert low.attempts_used == 0

    high = engine.answer(Q_HIGH)
    assert isinstance(high, Answered)
    assert high.top1_score == pytest.approx(7 / math.sqrt(12 * 13), abs=1e-9)
    assert high.evidence[0].chunk.doc_id == "irs-550"
    assert round(low.top1_score, 2) == 0.54 and round(high.top1_score, 2) == 0.56


def test_query_without_tokens_abstains_with_no_evidence(threshold_index):
    engine = CiteGuardEngine(threshold_index, MOCK, ExtractiveMockGenerator())
    response = engine.answer("?!")
    assert isinstance(response, Abstained)
    assert response.reason == AbstainReason.NO_EVIDENCE


def test_abstention_monotone_in_tau(make_chunk, mock_index):
    rng = random.Random(20)
    vocab = ("standard deduction single filer capital gains holding period credit refund wages "
             "schedule penalty interest resident estimated payment").split()
    chunks = [make_chunk("d", f"c{i:04d}", " ".join(rng.sample(vocab, 6))) for i in range(8)]
    engine = CiteGuardEngine(mock_index(chunks), ProviderConfig(), ExtractiveMockGenerator())
    queries = [" ".join(rng.sample(vocab, rng.randint(2, 8))) for _ in range(20)]

    def abstained(tau):
        return {q for q in queries if isinstance(engine.answer(q, tau=tau), Abstained)}

    low, mid, high = abstained(0.4), abstained(0.6), abstained(0.8)
    assert low <= mid <= high


def test_non_latin_query_matches_its_chunk(make_chunk, mock_index):
    ix = mock_index([make_chunk("nta-guide", "c0000", "Tax 税金 申告"), make_chunk("irs-501", "c0000", "standard deduction")])
    response = CiteGuardEngine(ix, ProviderConfig(), ExtractiveMockGenerator()).answer("税金 申告")
    assert isinstance(response, Answered)
    assert response.top1_score == pytest.approx(2 / math.sqrt(6), abs=1e-9)
    assert response.evidence[0].chunk.doc_id == "nta-guide"
