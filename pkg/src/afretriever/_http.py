"""JSON-over-HTTP with retry, shared by the chat and embedding clients."""

from __future__ import annotations

import logging
import os
import time

import requests

logger = logging.getLogger(__name__)

API_KEY_ENV = "AFR_API_KEY"


class ProviderError(RuntimeError):
    """A provider could not produce a response (transport, HTTP or payload)."""


def post_json(url: str, payload: dict, *, timeout: float, max_retries: int, backoff: float = 0.5,
              session: requests.Session | None = None) -> dict:
    """POST ``payload`` and return the decoded JSON body.

    Transport failures and 5xx responses are retried ``max_retries`` times
    with exponential backoff; 4xx responses fail immediately.
    """
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(API_KEY_ENV)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    post = (session or requests).post
    attempt = 0
    while True:
        try:
            resp = post(url, json=payload, headers=headers, timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            err: Exception = exc
        else:
            if resp.status_code < 400:
                try:
                    return resp.json()
                except ValueError:
                    raise ProviderError(f"{url}: response is not JSON") from None
            if resp.status_code < 500:
                raise ProviderError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
            err = ProviderError(f"{url}: HTTP {resp.status_code}")
        if attempt >= max_retries:
            raise ProviderError(f"{url}: giving up after {attempt + 1} attempts: {err}") from err
        delay = backoff * (2 ** attempt)
        logger.warning("request to %s failed (%s); retrying in %.2fs", url, err, delay)
        time.sleep(delay)
        attempt += 1
