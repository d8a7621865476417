import json

import httpx
import pytest
from fastapi.testclient import TestClient

import citeguard
from conftest import FIXTURE_TEXTS, OUT_OF_CORPUS, dif
from core_model import parse_citation
from embedding_provider import ProviderConfig, ZeroVector
from generation import ExtractiveMockGenerator
from rag_engine import CiteGuardEngine
from service import create_app, create_app_from_store
from provider_http import ProviderUnreachable
from store import StoreLayout, health, index_store

DEDUCTION_QUESTION = FIXTURE_TEXTS["irs-1040-instr"]


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def run(*argv):
    return citeguard.main([str(a) for a in argv])


@pytest.fixture
def cli_store(tmp_path, corpus_dir):
    root = tmp_path / "cli-store"
    assert run("ingest", "--in", corpus_dir, "--store", root) == 0
    assert run("index", "--store", root) == 0
    return root


@pytest.fixture
def client(indexed_store):
    app = create_app_from_store(indexed_store, citeguard._settings(str(indexed_store)))
    with TestClient(app) as http:
        yield http


def test_ingest_reports_counts(tmp_path, corpus_dir, capsys):
    assert run("ingest", "--in", corpus_dir, "--store", tmp_path / "s") == 0
    out = capsys.readouterr().out
    assert out.startswith("Ingested 3 docs -> 3 chunks (0 warnings)")
    for authority in ("CA-FTB", "IRS", "NY-Tax"):
        assert authority in out
    manifest = StoreLayout(tmp_path / "s").read_manifest()
    assert manifest["counts"] == {"docs": 3, "chunks": 3, "rows": None}
    assert sorted(p.name for p in (tmp_path / "s" / "docs").iterdir()) == [
        "ftb-540.json", "irs-1040-instr.json", "nys-it201.json"]


def test_ingest_empty_directory_fails(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("ingest", "--in", tmp_path / "empty", "--store", tmp_path / "s") == 1
    assert not (tmp_path / "s").exists()


def test_ingest_is_reproducible(tmp_path, corpus_dir):
    root = tmp_path / "s"
    assert run("ingest", "--in", corpus_dir, "--store", root) == 0
    first = (root / "chunks.jsonl").read_bytes()
    manifest = (root / "store.json").read_bytes()
    assert run("ingest", "--in", corpus_dir, "--store", root) == 0
    assert (root / "chunks.jsonl").read_bytes() == first
    assert (root / "store.json").read_bytes() == manifest


def test_failed_ingest_keeps_prior_store(tmp_path, corpus_dir):
    root = tmp_path / "s"
    assert run("ingest", "--in", corpus_dir, "--store", root) == 0
    before = (root / "chunks.jsonl").read_bytes()
    (corpus_dir / "broken.json").write_text("{", encoding="utf-8")
    assert run("ingest", "--in", corpus_dir, "--store", root) == 1
    assert (root / "chunks.jsonl").read_bytes() == before
    assert not [p for p in tmp_path.iterdir() if ".staging-" in p.name]


def test_ingest_lenient_flag_accepts_unknown_keys(tmp_path, corpus_dir, write_dif):
    doc = dif("irs-pub17", [[{"kind": "text", "text": "Your federal income tax guide."}]])
    doc["publisher"] = "Internal Revenue Service"
    write_dif(corpus_dir, doc)
    assert run("ingest", "--in", corpus_dir, "--store", tmp_path / "strict") == 1
    assert not (tmp_path / "strict").exists()
    assert run("ingest", "--in", corpus_dir, "--store", tmp_path / "lenient", "--lenient") == 0
    assert StoreLayout(tmp_path / "lenient").read_manifest()["counts"]["docs"] == 4


def test_index_records_embedding(capsys, cli_store):
    manifest = StoreLayout(cli_store).read_manifest()
    assert manifest["counts"]["rows"] == 3
    assert manifest["embedding"]["dim"] == 64
    assert manifest["embedding"]["provider"] == "mock"
    assert "Indexed 3 chunks (dim 64" in capsys.readouterr().out


def test_dimension_change_requires_force(cli_store):
    index_bytes = (cli_store / "index.bin").read_bytes()
    assert run("index", "--store", cli_store, "--dim", 128) == 1
    assert (cli_store / "index.bin").read_bytes() == index_bytes
    assert run("index", "--store", cli_store, "--dim", 128, "--force") == 0
    assert StoreLayout(cli_store).read_manifest()["embedding"]["dim"] == 128
    assert run("query", "--store", cli_store, DEDUCTION_QUESTION) == 0


def snapshot(root):
    return {name: (root / name).read_bytes() for name in ("index.bin", "rows.jsonl", "store.json", "chunks.jsonl")}


def test_provider_failure_mid_index_keeps_prior_index(tmp_path, indexed_store):
    before = snapshot(indexed_store)
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            return httpx.Response(200, json={"vectors": [[1.0] * 64]})
        return httpx.Response(503, text="overloaded")

    cfg = ProviderConfig.from_url("http://embed.test", max_batch=1, max_retries=0, backoff_ms=0)
    with pytest.raises(ProviderUnreachable):
        index_store(indexed_store, cfg, force=True,
                    client=cfg.client(http=httpx.Client(transport=httpx.MockTransport(handler))))
    assert len(calls) == 2
    assert snapshot(indexed_store) == before
    assert not [p for p in tmp_path.iterdir() if ".staging-" in p.name]


def test_index_names_chunks_without_tokens(tmp_path, corpus_dir, write_dif, caplog):
    write_dif(corpus_dir, dif("irs-flowchart", [[{"kind": "image_text", "ocr_text": "\u2014 \u00a7 \u2014"}]]))
    root = tmp_path / "s"
    assert run("ingest", "--in", corpus_dir, "--store", root) == 0
    with pytest.raises(ZeroVector, match="irs-flowchart/c0000"):
        index_store(root, ProviderConfig())
    assert run("index", "--store", root) == 1
    assert "irs-flowchart/c0000" in caplog.text
    assert not (root / "index.bin").exists()


def test_index_accepts_non_latin_ocr_text(tmp_path, corpus_dir, write_dif):
    write_dif(corpus_dir, dif("nta-notice", [[{"kind": "image_text", "ocr_text": "\u7a0e\u52d9\u7f72 \u2014 \u00a7 \u2014"}]]))
    root = tmp_path / "s"
    assert run("ingest", "--in", corpus_dir, "--store", root) == 0
    assert run("index", "--store", root) == 0
    assert StoreLayout(root).read_manifest()["counts"]["rows"] == 4


def test_query_answers_with_citations(cli_store, capsys):
    assert run("query", "--store", cli_store, DEDUCTION_QUESTION) == 0
    out = capsys.readouterr().out
    assert "[doc:irs-1040-instr|p:1-1|c:c0000]" in out
    assert "Evidence:" in out


def test_query_abstains_out_of_corpus(cli_store, capsys):
    assert run("query", "--store", cli_store, OUT_OF_CORPUS) == 3
    assert "insufficient" in capsys.readouterr().out


def test_query_tau_out_of_range_is_usage_error(cli_store):
    assert run("query", "--store", cli_store, "--tau", "1.01", DEDUCTION_QUESTION) == 2
    assert run("query", "--store", cli_store, "--k", "0", DEDUCTION_QUESTION) == 2


def test_query_on_unindexed_store_fails(tmp_path, corpus_dir):
    assert run("ingest", "--in", corpus_dir, "--store", tmp_path / "s") == 0
    assert run("query", "--store", tmp_path / "s", DEDUCTION_QUESTION) == 1


def test_tau_flag_overrides_config(cli_store):
    assert run("query", "--store", cli_store, "--tau", "-1", OUT_OF_CORPUS) == 0


def test_environment_overrides_manifest(cli_store, monkeypatch):
    monkeypatch.setenv("CITEGUARD_EMBED_URL", "http://127.0.0.1:9")
    settings = citeguard._settings(str(cli_store))
    assert settings["embed_url"] == "http://127.0.0.1:9"
    assert citeguard._settings(str(cli_store), {"embed_url": "mock"})["embed_url"] == "mock"


@pytest.mark.parametrize("question", [DEDUCTION_QUESTION, OUT_OF_CORPUS])
def test_json_output_matches_http_body(indexed_store, client, capsys, question):
    code = run("query", "--store", indexed_store, "--json", question)
    cli_body = capsys.readouterr().out.encode("utf-8")
    http = client.post("/v1/query", json={"query": question})
    assert http.status_code == 200
    assert cli_body == http.content
    assert code == (3 if json.loads(cli_body)["status"] == "abstained" else 0)


def test_health_matches_manifest(indexed_store, client):
    counts = StoreLayout(indexed_store).read_manifest()["counts"]
    assert client.get("/v1/health").json() == {"status": "ok", "docs": counts["docs"], "chunks": counts["chunks"]}
    assert health(indexed_store)["chunks"] == 3


def test_answered_citations_parse(client):
    for text in FIXTURE_TEXTS.values():
        body = client.post("/v1/query", json={"query": text}).json()
        assert body["status"] == "answered"
        for paragraph in body["paragraphs"]:
            assert paragraph["citations"]
            for token in paragraph["citations"]:
                parse_citation(token)


@pytest.mark.parametrize("body", [
    {},
    {"query": ""},
    {"query": "   "},
    {"query": "x", "tau": 1.5},
    {"query": "x", "k": 0},
    {"query": "x", "temperature": 0.3},
])
def test_bad_requests_are_400(client, body):
    assert client.post("/v1/query", json=body).status_code == 400


def test_per_request_tau(client):
    body = client.post("/v1/query", json={"query": OUT_OF_CORPUS, "tau": -1.0}).json()
    assert body["status"] == "answered"


def test_provider_outage_is_503(make_chunk, mock_index):
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    cfg = ProviderConfig.from_url("http://embed.test", max_retries=0, backoff_ms=0)
    engine = CiteGuardEngine(mock_index([make_chunk("d", "c0000", "standard deduction")]), cfg,
                             ExtractiveMockGenerator(),
                             embed_client=cfg.client(http=httpx.Client(transport=httpx.MockTransport(handler))))
    with TestClient(create_app(engine, {"status": "ok", "docs": 1, "chunks": 1})) as http:
        response = http.post("/v1/query", json={"query": "standard deduction"})
    assert response.status_code == 503
    assert response.json()["error"] == "provider unavailable"


def write_queries(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def test_eval_run_report_and_sample(cli_store, tmp_path):
    queries = write_queries(tmp_path / "queries.jsonl", [
        {"query_id": "q1", "text": DEDUCTION_QUESTION, "jurisdiction": "IRS"},
        {"query_id": "q2", "text": OUT_OF_CORPUS, "jurisdiction": "IRS"},
    ])
    assert run("eval", "run", "--store", cli_store, "--queries", queries, "--out", tmp_path / "run") == 0
    records = tmp_path / "run" / "records.jsonl"
    assert [json.loads(l)["status"] for l in records.read_text().splitlines()] == ["answered", "abstained"]
    assert (tmp_path / "run" / "timings.jsonl").exists()

    labels = write_queries(tmp_path / "labels.jsonl", [
        {"query_id": "q1", "citation_correct": True, "unsupported_claim": False, "helpfulness": 4},
        {"query_id": "q2", "abstention_correct": True},
    ])
    assert run("eval", "report", "--records", records, "--labels", labels, "--out", tmp_path / "report.json") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["rendered"]["abstention_rate"] == "50.0%"
    assert report["rendered"]["citation_support"] == "100.0%"
    assert report["rendered"]["abstention_accuracy"] == "100.0%"

    assert run("eval", "sample", "--records", records, "--per-stratum", 1, "--out", tmp_path / "todo.jsonl") == 0
    assert len((tmp_path / "todo.jsonl").read_text().splitlines()) == 2


def test_eval_report_unknown_label_fails(cli_store, tmp_path):
    queries = write_queries(tmp_path / "queries.jsonl", [{"query_id": "q1", "text": DEDUCTION_QUESTION}])
    assert run("eval", "run", "--store", cli_store, "--queries", queries, "--out", tmp_path / "run") == 0
    labels = write_queries(tmp_path / "labels.jsonl", [{"query_id": "nope", "abstention_correct": True}])
    assert run("eval", "report", "--records", tmp_path / "run" / "records.jsonl", "--labels", labels,
               "--out", tmp_path / "report.json") == 1
    assert not (tmp_path / "report.json").exists()


def test_missing_command_is_usage_error():
    assert run() == 2
    assert run("eval") == 2


def test_embedding_dimension_drift_is_503(make_chunk, mock_index):
    def handler(request):
        return httpx.Response(200, json={"vectors": [[1.0] * 32]})

    cfg = ProviderConfig.from_url("http://embed.test", max_retries=0, backoff_ms=0)
    engine = CiteGuardEngine(mock_index([make_chunk("d", "c0000", "standard deduction")]), cfg,
                             ExtractiveMockGenerator(),
                             embed_client=cfg.client(http=httpx.Client(transport=httpx.MockTransport(handler))))
    with TestClient(create_app(engine, {"status": "ok", "docs": 1, "chunks": 1})) as http:
        response = http.post("/v1/query", json={"query": "standard deduction"})
    assert response.status_code == 503
    assert response.json()["error"] == "index rebuild required"


def test_eval_run_baseline_variant(cli_store, tmp_path):
    queries = write_queries(tmp_path / "queries.jsonl", [
        {"query_id": "q1", "text": DEDUCTION_QUESTION},
        {"query_id": "q2", "text": OUT_OF_CORPUS},
    ])
    assert run("eval", "run", "--store", cli_store, "--queries", queries, "--out", tmp_path / "guarded") == 0
    assert run("eval", "run", "--store", cli_store, "--queries", queries, "--out", tmp_path / "baseline",
               "--no-abstention", "--no-enforcement") == 0

    def statuses(name):
        lines = (tmp_path / name / "records.jsonl").read_text().splitlines()
        return [json.loads(line)["status"] for line in lines]

    assert statuses("guarded") == ["answered", "abstained"]
    assert statuses("baseline") == ["answered", "answered"]
