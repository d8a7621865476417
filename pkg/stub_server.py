"""
Provider stub server
====================

Implements the embedding and generation wire contracts for offline
integration runs:

    POST /embed     {"model", "texts"}                              -> {"vectors"}
    POST /generate  {"model", "prompt", "max_tokens", "temperature"} -> {"text"}

/embed is backed by mock_embed. /generate replays a scripted response sequence
keyed by request ordinal (the last entry repeats); with no script it answers
with the extractive mock generator.
"""

import logging
import threading
from typing import List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict

from embedding_provider import ZeroVector, mock_embed
from generation import extractive_answer

logger = logging.getLogger(__name__)


class EmbedRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    model: str
    texts: List[str]


class GenerateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    model: str
    prompt: str
    max_tokens: int
    temperature: float


def create_stub_app(mock_dim: int = 64, script: Optional[List[str]] = None) -> FastAPI:
    app = FastAPI(title="CiteGuard provider stub", version="1.0.0")
    app.state.requests = []
    app.state.generate_calls = 0
    lock = threading.Lock()

    @app.post("/embed")
    def embed(request: EmbedRequest):
        with lock:
            app.state.requests.append(("embed", request.model_dump()))
        try:
            vectors = [mock_embed(t, mock_dim).values.tolist() for t in request.texts]
        except ZeroVector as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"vectors": vectors}

    @app.post("/generate")
    def generate(request: GenerateRequest):
        with lock:
            app.state.requests.append(("generate", request.model_dump()))
            ordinal = app.state.generate_calls
            app.state.generate_calls += 1
        if script:
            return {"text": script[min(ordinal, len(script) - 1)]}
        return {"text": extractive_answer(request.prompt)}

    return app


if __name__ == "__main__":
    import argparse

    import uvicorn

    parser = argparse.ArgumentParser(description="CiteGuard provider stub server")
    parser.add_argument("--port", type=int, default=8090)
    parser.add_argument("--dim", type=int, default=64)
    args = parser.parse_args()
    uvicorn.run(create_stub_app(mock_dim=args.dim), host="127.0.0.1", port=args.port)
