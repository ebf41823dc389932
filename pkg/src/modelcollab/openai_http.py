"""OpenAI-compatible chat-completions backend."""
from __future__ import annotations

import logging
import math
import os
import time
import zlib
from collections.abc import Sequence

import httpx
import numpy as np

from .core import (BackendCapabilities, GenerationOutput, GenerationParams, ModelBackend,
                   ModelDescriptor, TokenDistribution)
from .errors import TransportError

LOGGER = logging.getLogger(__name__)

_FINISH = {"stop": "stop", "length": "length", "eos": "stop", "end_turn": "stop"}


class HttpBackend(ModelBackend):
    """Talks to ``POST {base_url}/v1/chat/completions``.

    Transport failures and 5xx responses are retried ``retries`` times with
    exponential backoff starting at ``backoff`` seconds. Next-token
    distributions are reconstructed from ``top_logprobs`` and therefore need a
    ``vocab`` (token strings indexed by id); mass the endpoint does not report
    is spread evenly over the unreported vocabulary entries.
    """

    def __init__(self, descriptor: ModelDescriptor, *, base_url: str, model: str | None = None,
                 api_key_env: str | None = None, vocab: Sequence[str] | None = None,
                 eos_id: int | None = None, top_logprobs: int = 20, timeout: float = 60.0,
                 retries: int = 3, backoff: float = 0.25, embeddings: bool = False,
                 max_in_flight: int = 8, transport: httpx.BaseTransport | None = None):
        super().__init__(descriptor, vocab=vocab, eos_id=eos_id, max_in_flight=max_in_flight)
        self.base_url = base_url.rstrip("/")
        self.model = model or descriptor.id
        self.top_logprobs = top_logprobs
        self.retries = retries
        self.backoff = backoff
        headers = {}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport, trust_env=False)
        self._token_index = {t: i for i, t in enumerate(self.vocab)} if self.vocab else None
        self.capabilities = BackendCapabilities(
            supports_text=True,
            supports_token_distribution=self.vocab is not None,
            supports_weights=False,
            supports_embedding=embeddings,
        )

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.base_url}{path}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(url, json=payload)
                if resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"server error {resp.status_code}", request=resp.request,
                                                response=resp)
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last = exc
                status = getattr(getattr(exc, "response", None), "status_code", 500)
                if status < 500:
                    break
                if attempt < self.retries:
                    delay = self.backoff * (2 ** attempt)
                    LOGGER.warning("request to %s failed (%s); retrying in %.2fs", url, exc, delay)
                    time.sleep(delay)
        raise TransportError(f"{self.id}: {url} unreachable: {last}") from last

    def _token_id(self, token: str) -> int:
        if self._token_index is not None and token in self._token_index:
            return self._token_index[token]
        return zlib.crc32(token.encode("utf-8")) & 0x7FFFFFFF

    def _chat_payload(self, messages: list[dict], params: GenerationParams, max_tokens: int, top: int) -> dict:
        payload = {
            "model": self.model,
            "messages": messages,
            "max_tokens": max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "seed": params.seed,
            "logprobs": True,
        }
        if top:
            payload["top_logprobs"] = top
        return payload

    def _generate(self, prompt: str, params: GenerationParams) -> GenerationOutput:
        body = self._post("/v1/chat/completions", self._chat_payload(
            [{"role": "user", "content": prompt}], params, params.max_new_tokens, 0))
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{self.id}: malformed completion response") from exc
        tokens = None
        content = ((choice.get("logprobs") or {}).get("content")) or None
        if content:
            tokens = tuple((self._token_id(t["token"]), min(0.0, float(t["logprob"]))) for t in content)
        finish = _FINISH.get(choice.get("finish_reason") or "stop", "stop")
        return GenerationOutput(text=text, tokens=tokens, finish_reason=finish)

    def _next_token_distribution(self, context: tuple, prompt: str) -> TokenDistribution:
        messages = [{"role": "user", "content": prompt}]
        if context:
            messages.append({"role": "assistant", "content": self.detokenize(context)})
        params = GenerationParams(max_new_tokens=1, temperature=1.0, top_p=1.0)
        body = self._post("/v1/chat/completions", self._chat_payload(messages, params, 1, self.top_logprobs))
        try:
            first = body["choices"][0]["logprobs"]["content"][0]
            tops = first.get("top_logprobs") or [first]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{self.id}: response carries no logprobs") from exc
        probs = np.zeros(len(self.vocab))
        for entry in tops:
            tok = entry["token"]
            if tok in self._token_index:
                probs[self._token_index[tok]] += math.exp(float(entry["logprob"]))
        total = probs.sum()
        if total > 1.0:
            probs /= total
        else:
            missing = probs == 0
            if missing.any():
                probs[missing] = (1.0 - total) / missing.sum()
            else:
                probs /= total
        return TokenDistribution(self.vocab_group, probs / probs.sum())

    def _embed(self, text: str) -> np.ndarray:
        body = self._post("/v1/embeddings", {"model": self.model, "input": text})
        return np.asarray(body["data"][0]["embedding"], dtype=np.float64)
