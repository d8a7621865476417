"""
Provider HTTP client shared by the embedding and generation providers.

Bearer token comes from CITEGUARD_API_KEY when set. Transport failures,
timeouts and 5xx answers are retried with exponential backoff; 4xx answers and
undecodable bodies are not.
"""

import logging
import os
import time
from typing import Dict, Optional

import httpx

from core_model import CiteGuardError

logger = logging.getLogger(__name__)

API_KEY_ENV = "CITEGUARD_API_KEY"


class ProviderError(CiteGuardError):
    pass


class ProviderUnreachable(ProviderError):
    pass


class ProviderTimeout(ProviderError):
    pass


class ProviderBadResponse(ProviderError):
    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"bad provider response: {detail}")


class ProviderClient:
    """Thin JSON-over-HTTP client with retry; one instance per provider base URL"""

    def __init__(self, base_url: str, timeout_ms: int = 30000, max_retries: int = 2,
                 backoff_ms: int = 250, api_key: Optional[str] = None,
                 http: Optional[httpx.Client] = None):
        self.base_url = str(base_url).rstrip("/")
        self.timeout_s = timeout_ms / 1000.0
        self.max_retries = max_retries
        self.backoff_ms = backoff_ms
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._owns_http = http is None
        self._http = http if http is not None else httpx.Client()

    def _headers(self) -> Dict[str, str]:
        return {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

    def post_json(self, path: str, payload: dict) -> dict:
        url = f"{self.base_url}{path}"
        last_error: ProviderError = ProviderUnreachable(f"{url}: no attempt made")
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff_ms * (2 ** (attempt - 1)) / 1000.0
                logger.warning(f"Retrying {url} in {delay:.2f}s ({attempt}/{self.max_retries}): {last_error}")
                time.sleep(delay)
            try:
                response = self._http.post(url, json=payload, headers=self._headers(),
                                           timeout=self.timeout_s)
            except httpx.TimeoutException as e:
                last_error = ProviderTimeout(f"{url}: timed out after {self.timeout_s:.1f}s ({e})")
                continue
            except httpx.TransportError as e:
                last_error = ProviderUnreachable(f"{url}: {e}")
                continue

            if response.status_code >= 500:
                last_error = ProviderUnreachable(f"{url}: HTTP {response.status_code}")
                continue
            if response.status_code >= 400:
                raise ProviderBadResponse(f"{url}: HTTP {response.status_code}: {response.text[:200]}")
            try:
                body = response.json()
            except ValueError as e:
                raise ProviderBadResponse(f"{url}: body is not JSON") from e
            if not isinstance(body, dict):
                raise ProviderBadResponse(f"{url}: body must be a JSON object")
            return body
        raise last_error

    def close(self):
        if self._owns_http:
            self._http.close()
