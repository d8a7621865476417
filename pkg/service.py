"""
CiteGuard HTTP Service
======================

Read-only query service over an indexed store:

    POST /v1/query   {"query": str, "k": int?, "tau": number?} -> response payload
    GET  /v1/health  -> {"status": "ok", "docs": n, "chunks": n}

Malformed bodies and out-of-range knobs answer 400. Provider failures and a
provider whose embedding dimension no longer matches the index answer 503.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from core_model import ConfigError
from embedding_provider import DimensionMismatch
from provider_http import ProviderError
from rag_engine import CiteGuardEngine, response_payload
from store import StoreLayout, health, open_engine

logger = logging.getLogger(__name__)


class QueryBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    query: str = Field(min_length=1)
    k: Optional[int] = None
    tau: Optional[float] = None


def create_app(engine: CiteGuardEngine, status: Dict) -> FastAPI:
    """status is the health body, fixed at start-up since the store is immutable while served"""
    app = FastAPI(title="CiteGuard", version="1.0.0")
    app.state.engine = engine

    @app.exception_handler(RequestValidationError)
    async def _malformed(request: Request, exc: RequestValidationError):
        errors = [f"{'.'.join(str(p) for p in e.get('loc', ()))}: {e.get('msg')}" for e in exc.errors()]
        return JSONResponse(status_code=400, content={"error": "malformed request", "detail": errors})

    @app.exception_handler(ConfigError)
    async def _bad_knob(request: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content={"error": "invalid parameter", "detail": [str(exc)]})

    @app.exception_handler(ProviderError)
    async def _provider_down(request: Request, exc: ProviderError):
        logger.error(f"Provider failure while serving a query: {exc}")
        return JSONResponse(status_code=503, content={"error": "provider unavailable", "detail": [str(exc)]})

    @app.exception_handler(DimensionMismatch)
    async def _stale_index(request: Request, exc: DimensionMismatch):
        logger.error(f"Embedding dimension does not match the index: {exc}")
        return JSONResponse(status_code=503, content={"error": "index rebuild required",
                                                      "detail": [f"{exc}; re-run `citeguard index --force`"]})

    @app.post("/v1/query")
    def query(body: QueryBody):
        if not body.query.strip():
            raise ConfigError("query must contain non-whitespace text")
        response = engine.answer(body.query, k=body.k, tau=body.tau)
        return JSONResponse(content=response_payload(response))

    @app.get("/v1/health")
    def health_check():
        return dict(status)

    return app


def create_app_from_store(root: Union[str, Path], settings: Dict) -> FastAPI:
    """Open an indexed store and serve it"""
    engine = open_engine(root, settings)
    return create_app(engine, health(StoreLayout(root).root))
