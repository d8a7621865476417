"""
CiteGuard Embedding Provider
============================

Unit-normalized dense embeddings from either a remote service

    POST <base_url>/embed  {"model": str, "texts": [str]} -> {"vectors": [[number]]}

or a deterministic offline mock: lowercase, split on runs of characters that
are not Unicode letters or digits,
bucket each token by FNV-1a-64(token) mod dim, count, normalize.
"""

import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from core_model import CiteGuardError, ConfigError
from provider_http import ProviderBadResponse, ProviderClient

logger = logging.getLogger(__name__)

DEFAULT_EMBED_MODEL = "BAAI/bge-large-en-v1.5"
NORM_TOLERANCE = 1e-6
ZERO_NORM = 1e-12

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
FNV64_MASK = 0xFFFFFFFFFFFFFFFF

# Unicode letters and digits; underscore and punctuation separate tokens
TOKEN_RE = re.compile(r"[^\W_]+")


class ZeroVector(CiteGuardError):
    pass


class DimensionMismatch(CiteGuardError):
    pass


class ProviderKind(str, Enum):
    REMOTE = "Remote"
    DETERMINISTIC_MOCK = "DeterministicMock"


@dataclass(frozen=True)
class ProviderConfig:
    kind: ProviderKind = ProviderKind.DETERMINISTIC_MOCK
    base_url: Optional[str] = None
    model_id: str = DEFAULT_EMBED_MODEL
    mock_dim: int = 64
    timeout_ms: int = 30000
    max_batch: int = 32
    max_retries: int = 2
    backoff_ms: int = 250

    def __post_init__(self):
        if self.kind == ProviderKind.REMOTE and not self.base_url:
            raise ConfigError("remote provider requires base_url")
        if self.mock_dim < 8:
            raise ConfigError(f"mock_dim must be >= 8, got {self.mock_dim}")
        if self.max_batch < 1 or self.timeout_ms < 1 or self.max_retries < 0:
            raise ConfigError("max_batch and timeout_ms must be positive, max_retries non-negative")

    @classmethod
    def from_url(cls, url: Optional[str], **kwargs) -> "ProviderConfig":
        """'mock' or no URL selects the deterministic mock"""
        if not url or url == "mock":
            return cls(kind=ProviderKind.DETERMINISTIC_MOCK, **kwargs)
        return cls(kind=ProviderKind.REMOTE, base_url=url, **kwargs)

    def client(self, http=None) -> ProviderClient:
        return ProviderClient(self.base_url, timeout_ms=self.timeout_ms, max_retries=self.max_retries,
                              backoff_ms=self.backoff_ms, http=http)


class EmbeddingVector:
    """Immutable unit-length float64 vector"""

    __slots__ = ("_values",)

    def __init__(self, values: np.ndarray):
        arr = np.array(values, dtype=np.float64)
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return int(self._values.shape[0])

    def cosine(self, other: "EmbeddingVector") -> float:
        return float(np.dot(self._values, other._values))

    def __repr__(self):
        return f"EmbeddingVector(dim={self.dim})"


def normalize(v: Sequence[float]) -> EmbeddingVector:
    """Scale to unit length; near-zero vectors raise ZeroVector"""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ValueError("vector must be one-dimensional with dim >= 1")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains NaN or Inf")
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM:
        raise ZeroVector(f"vector norm {norm:.3e} is too small to normalize")
    return EmbeddingVector(arr / norm)


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & FNV64_MASK
    return h


def tokenize(text: str) -> List[str]:
    return TOKEN_RE.findall(text.lower())


def mock_embed(text: str, dim: int) -> EmbeddingVector:
    """Hashed bag-of-words vector; identical text always gives identical bits"""
    if dim < 8:
        raise ConfigError(f"mock dimension must be >= 8, got {dim}")
    counts = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        counts[fnv1a_64(token.encode("utf-8")) % dim] += 1.0
    if not counts.any():
        raise ZeroVector(f"text has no tokens: {text[:40]!r}")
    return normalize(counts)


def _remote_batch(client: ProviderClient, model_id: str, texts: List[str]) -> List[List[float]]:
    body = client.post_json("/embed", {"model": model_id, "texts": texts})
    vectors = body.get("vectors")
    if not isinstance(vectors, list) or len(vectors) != len(texts):
        got = len(vectors) if isinstance(vectors, list) else type(vectors).__name__
        raise ProviderBadResponse(f"expected {len(texts)} vectors, got {got}")
    for v in vectors:
        if not isinstance(v, list) or not v or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            raise ProviderBadResponse("vectors must be non-empty lists of numbers")
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise DimensionMismatch(f"provider returned mixed dimensions {sorted(dims)}")
    return vectors


def embed_texts(texts: List[str], cfg: ProviderConfig,
                client: Optional[ProviderClient] = None) -> List[EmbeddingVector]:
    """One normalized vector per text, batched at cfg.max_batch"""
    if not texts:
        raise ValueError("embed_texts requires at least one text")
    if any(not t for t in texts):
        raise ValueError("embed_texts requires non-empty texts")

    if cfg.kind == ProviderKind.DETERMINISTIC_MOCK:
        return [mock_embed(t, cfg.mock_dim) for t in texts]

    owned = client is None
    client = client or cfg.client()
    out: List[EmbeddingVector] = []
    dim: Optional[int] = None
    try:
        for i in range(0, len(texts), cfg.max_batch):
            batch = texts[i:i + cfg.max_batch]
            for raw in _remote_batch(client, cfg.model_id, batch):
                if dim is None:
                    dim = len(raw)
                elif len(raw) != dim:
                    raise DimensionMismatch(f"batch dimension {len(raw)} differs from earlier {dim}")
                try:
                    out.append(normalize(raw))
                except (ZeroVector, ValueError) as e:
                    raise ProviderBadResponse(f"unusable vector: {e}") from e
            logger.debug(f"Embedded {min(i + cfg.max_batch, len(texts))}/{len(texts)} texts")
    finally:
        if owned:
            client.close()
    return out
