"""Thin chat-completion client used by the recipe refiner and the judge metric.

One POST shape: {"model": ..., "messages": [{"role", "content"}, ...]} with a
bearer token read from the COOKANYTHING_LLM_KEY environment variable. The
response is parsed for the first text choice and nothing else. Mock mode is
decided by the caller (each caller has its own deterministic offline stub);
this module only does the wire work.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import requests

__all__ = ["LLMEndpoint", "TransportError", "SchemaError", "post_chat", "API_KEY_VAR"]

API_KEY_VAR = "COOKANYTHING_LLM_KEY"


class TransportError(RuntimeError):
    """The endpoint could not be reached or kept failing after retries."""


class SchemaError(ValueError):
    """A payload (request input or endpoint response) has the wrong shape."""


@dataclass(frozen=True)
class LLMEndpoint:
    """Where and how to reach a chat-completion service."""

    url: str = ""
    model: str = "gpt-4o"
    mock: bool = True
    max_retries: int = 2
    timeout: float = 30.0
    retry_wait: float = 0.5


def api_key() -> str:
    return os.environ.get(API_KEY_VAR, "")


def post_chat(endpoint: LLMEndpoint, messages: list[dict]) -> str:
    """POST a chat request, retrying transient failures; return the first
    text choice."""
    if not endpoint.url:
        raise TransportError("no endpoint URL configured")
    headers = {"Content-Type": "application/json"}
    key = api_key()
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = {"model": endpoint.model, "messages": messages}
    attempts = endpoint.max_retries + 1
    last = None
    for attempt in range(attempts):
        try:
            resp = requests.post(endpoint.url, json=body, headers=headers,
                                 timeout=endpoint.timeout)
            if resp.status_code >= 500:
                last = f"server error {resp.status_code}"
            elif resp.status_code != 200:
                raise TransportError(
                    f"endpoint returned {resp.status_code} (not retried): "
                    f"{resp.text[:200]}")
            else:
                return _first_choice(resp.json())
        except (requests.ConnectionError, requests.Timeout) as exc:
            last = repr(exc)
        if attempt + 1 < attempts:
            time.sleep(endpoint.retry_wait)
    raise TransportError(f"endpoint failed after {attempts} attempts: {last}")


def _first_choice(payload) -> str:
    try:
        choice = payload["choices"][0]
    except (TypeError, KeyError, IndexError):
        raise SchemaError(f"response has no choices: {str(payload)[:200]}") from None
    if isinstance(choice, dict):
        msg = choice.get("message")
        if isinstance(msg, dict) and isinstance(msg.get("content"), str):
            return msg["content"]
        if isinstance(choice.get("text"), str):
            return choice["text"]
    raise SchemaError(f"first choice has no text content: {str(choice)[:200]}")
