"""Generative-model abstraction shared by every collaboration method.

Three backend families live behind :class:`ModelBackend`: scripted mocks
(:class:`MockBackend`, defined here), OpenAI-compatible HTTP endpoints
(:mod:`modelcollab.openai_http`) and on-disk weight stores
(:mod:`modelcollab.weight`).
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import threading
import zlib
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CapabilityError, ConfigError, VocabError

__all__ = [
    "ModelDescriptor",
    "GenerationParams",
    "GenerationOutput",
    "TokenDistribution",
    "BackendCapabilities",
    "ModelBackend",
    "MockScript",
    "MockBackend",
    "AliasBackend",
    "ModelPool",
    "hash_embed",
    "load_pool",
    "sample_token",
    "sample_decode",
    "parallel_map",
    "check_shared_vocab",
]

DIST_TOL = 1e-9
EMBED_DIM = 64


@dataclass(frozen=True)
class ModelDescriptor:
    id: str
    display_name: str = ""
    description: str = ""
    vocab_group: str = "default"
    architecture_tag: str = ""
    param_count: int = 0

    def __post_init__(self):
        if not self.id:
            raise ConfigError("model id must be non-empty")
        if self.param_count < 0:
            raise ConfigError(f"param_count must be >= 0 (model {self.id!r})")


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 512
    temperature: float = 0.7
    top_p: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")

    @classmethod
    def for_task(cls, task_kind: str, **overrides) -> GenerationParams:
        """Defaults for a task kind: coding tasks get a 1024-token budget."""
        base = {"max_new_tokens": 1024 if task_kind == "code" else 512}
        base.update(overrides)
        return cls(**base)

    def with_seed(self, seed: int) -> GenerationParams:
        return replace(self, seed=seed)


@dataclass(frozen=True)
class GenerationOutput:
    text: str
    tokens: tuple[tuple[int, float], ...] | None = None
    finish_reason: str = "stop"

    def __post_init__(self):
        if self.finish_reason not in ("stop", "length", "error"):
            raise ValueError(f"unknown finish_reason {self.finish_reason!r}")
        if self.tokens is not None:
            for _, lp in self.tokens:
                if lp > 0:
                    raise ValueError("token logprobs must be <= 0")

    @property
    def token_ids(self) -> list[int]:
        return [t for t, _ in self.tokens or ()]

    @property
    def logprobs(self) -> list[float]:
        return [lp for _, lp in self.tokens or ()]


class TokenDistribution:
    """Normalized next-token probabilities over a vocabulary group."""

    __slots__ = ("vocab_group", "probs")

    def __init__(self, vocab_group: str, probs):
        p = np.asarray(probs, dtype=np.float64).reshape(-1)
        if p.size == 0:
            raise ValueError("empty distribution")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > DIST_TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, expected 1")
        p.setflags(write=False)
        self.vocab_group = vocab_group
        self.probs = p

    @classmethod
    def uniform(cls, vocab_group: str, size: int) -> TokenDistribution:
        return cls(vocab_group, np.full(size, 1.0 / size))

    @classmethod
    def normalized(cls, vocab_group: str, weights) -> TokenDistribution:
        w = np.asarray(weights, dtype=np.float64)
        return cls(vocab_group, w / w.sum())

    def __len__(self):
        return self.probs.size

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def top1(self) -> float:
        return float(self.probs.max())

    def __repr__(self):
        return f"TokenDistribution({self.vocab_group!r}, {self.probs.tolist()!r})"


@dataclass(frozen=True)
class BackendCapabilities:
    supports_text: bool = True
    supports_token_distribution: bool = False
    supports_weights: bool = False
    supports_embedding: bool = False


class ModelBackend:
    """A generative endpoint with declared capabilities.

    Subclasses implement the ``_generate`` / ``_next_token_distribution`` /
    ``_embed`` hooks; the public methods check capability flags and hold a
    per-backend in-flight slot so one backend can be shared across threads.
    """

    capabilities = BackendCapabilities()

    def __init__(self, descriptor: ModelDescriptor, *, vocab: Sequence[str] | None = None,
                 eos_id: int | None = None, max_in_flight: int = 8):
        self.descriptor = descriptor
        self.vocab = list(vocab) if vocab is not None else None
        self.eos_id = eos_id
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))

    @property
    def id(self) -> str:
        return self.descriptor.id

    @property
    def vocab_group(self) -> str:
        return self.descriptor.vocab_group

    def set_max_in_flight(self, n: int) -> None:
        self._slots = threading.BoundedSemaphore(max(1, n))

    def _require(self, flag: str) -> None:
        if not getattr(self.capabilities, flag):
            raise CapabilityError(f"backend {self.id!r} does not support {flag.removeprefix('supports_')}")

    def generate(self, prompt: str, params: GenerationParams | None = None) -> GenerationOutput:
        self._require("supports_text")
        params = params or GenerationParams()
        with self._slots:
            return self._generate(prompt, params)

    def next_token_distribution(self, context: Sequence[int], prompt: str = "",
                                vocab_group: str | None = None) -> TokenDistribution:
        self._require("supports_token_distribution")
        if vocab_group is not None and vocab_group != self.vocab_group:
            raise VocabError(f"backend {self.id!r} uses vocab {self.vocab_group!r}, not {vocab_group!r}")
        with self._slots:
            return self._next_token_distribution(tuple(context), prompt)

    def embed_text(self, text: str) -> np.ndarray:
        self._require("supports_embedding")
        with self._slots:
            return self._embed(text)

    def detokenize(self, ids: Iterable[int]) -> str:
        ids = list(ids)
        if self.vocab is not None:
            return " ".join(self.vocab[i] if 0 <= i < len(self.vocab) else f"<{i}>" for i in ids)
        return " ".join(str(i) for i in ids)

    def _generate(self, prompt, params):  # pragma: no cover - abstract
        raise NotImplementedError

    def _next_token_distribution(self, context, prompt):  # pragma: no cover - abstract
        raise NotImplementedError

    def _embed(self, text):  # pragma: no cover - abstract
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.id!r})"


def _stable_hash(*parts: Any) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def hash_embed(text: str, dim: int = EMBED_DIM, seed: int = 0, n: int = 3) -> np.ndarray:
    """Signed feature hash of character n-grams into ``dim`` buckets."""
    vec = np.zeros(dim)
    if not text:
        return vec
    padded = f" {text.lower()} "
    key = seed.to_bytes(8, "little", signed=True)
    for i in range(max(1, len(padded) - n + 1)):
        gram = padded[i:i + n].encode("utf-8")
        d = hashlib.blake2b(gram, digest_size=8, key=key).digest()
        h = int.from_bytes(d, "little")
        vec[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
    return vec


def _word_tokens(text: str) -> list[str]:
    return text.split()


@dataclass
class MockScript:
    """Canned behaviour for a :class:`MockBackend`.

    ``answers`` maps a key to a response (a string, or a dict with ``text``
    and per-word ``logprobs``). A prompt hits a key when equal to it, or
    otherwise when the key occurs inside the prompt (longest key wins).
    ``distributions`` maps a context key to next-token probabilities: the
    space-joined token ids of the context, else ``"@<position>"``, else
    ``"*"``; unscripted contexts get the uniform distribution.
    """

    answers: dict[str, Any] = field(default_factory=dict)
    distributions: dict[str, list[float]] = field(default_factory=dict)
    vocab: list[str] | None = None
    vocab_size: int | None = None
    eos_id: int | None = None
    embeddings: dict[str, list[float]] = field(default_factory=dict)
    embed_dim: int = EMBED_DIM
    fallback_seed: int = 0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> MockScript:
        known = {"answers", "distributions", "vocab", "vocab_size", "eos_id",
                 "embeddings", "embed_dim", "fallback_seed"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown mock script keys: {sorted(unknown)}")
        return cls(**dict(data))

    @classmethod
    def load(cls, path: str | Path) -> MockScript:
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    @property
    def n_vocab(self) -> int | None:
        if self.vocab is not None:
            return len(self.vocab)
        return self.vocab_size


class MockBackend(ModelBackend):
    """Deterministic scripted backend used as the test oracle substrate.

    ``responder`` and ``distribution_fn`` are optional callables for
    behaviour a lookup table cannot express; returning ``None`` from either
    defers to the script.
    """

    def __init__(self, descriptor: ModelDescriptor | str, script: MockScript | Mapping | None = None, *,
                 responder: Callable[[str, GenerationParams], Any] | None = None,
                 distribution_fn: Callable[[tuple, str], Any] | None = None,
                 max_in_flight: int = 8):
        if isinstance(descriptor, str):
            descriptor = ModelDescriptor(descriptor)
        if script is None:
            script = MockScript()
        elif isinstance(script, Mapping):
            script = MockScript.from_dict(script)
        self.script = script
        self.responder = responder
        self.distribution_fn = distribution_fn
        super().__init__(descriptor, vocab=script.vocab, eos_id=script.eos_id, max_in_flight=max_in_flight)
        self._keys = sorted(script.answers, key=lambda k: (-len(k), k))
        self.capabilities = BackendCapabilities(
            supports_text=True,
            supports_token_distribution=script.n_vocab is not None or distribution_fn is not None,
            supports_weights=False,
            supports_embedding=True,
        )

    def lookup(self, prompt: str):
        if prompt in self.script.answers:
            return self.script.answers[prompt]
        for key in self._keys:
            if key and key in prompt:
                return self.script.answers[key]
        return None

    def token_id(self, word: str) -> int:
        if self.vocab is not None and word in self.vocab:
            return self.vocab.index(word)
        return zlib.crc32(word.encode("utf-8")) & 0x7FFFFFFF

    def _generate(self, prompt: str, params: GenerationParams) -> GenerationOutput:
        response = self.responder(prompt, params) if self.responder else None
        if response is None:
            response = self.lookup(prompt)
        if response is None and self.capabilities.supports_token_distribution and (
                self.script.distributions or self.distribution_fn):
            return sample_decode(self, prompt, params)
        if response is None:
            h = _stable_hash(self.id, prompt, params.seed, self.script.fallback_seed)
            response = f"{self.id}-{h:016x}"
        if isinstance(response, GenerationOutput):
            return response
        if isinstance(response, Mapping):
            text = str(response.get("text", ""))
            logprobs = response.get("logprobs")
        else:
            text, logprobs = str(response), None
        words = _word_tokens(text)
        if logprobs is None:
            logprobs = [0.0] * len(words)
        elif len(logprobs) != len(words):
            raise ConfigError(f"mock {self.id!r}: {len(logprobs)} logprobs for {len(words)} words")
        finish = "stop"
        if len(words) > params.max_new_tokens:
            words, logprobs, finish = words[:params.max_new_tokens], logprobs[:params.max_new_tokens], "length"
            text = " ".join(words)
        tokens = tuple((self.token_id(w), float(lp)) for w, lp in zip(words, logprobs))
        return GenerationOutput(text=text, tokens=tokens, finish_reason=finish)

    def _next_token_distribution(self, context: tuple, prompt: str) -> TokenDistribution:
        probs = self.distribution_fn(context, prompt) if self.distribution_fn else None
        if probs is None:
            table = self.script.distributions
            for key in (" ".join(map(str, context)), f"@{len(context)}", "*"):
                if key in table:
                    probs = table[key]
                    break
        if probs is None:
            return TokenDistribution.uniform(self.vocab_group, self.script.n_vocab)
        if isinstance(probs, TokenDistribution):
            return probs
        if self.script.n_vocab is not None and len(probs) != self.script.n_vocab:
            raise VocabError(f"mock {self.id!r}: distribution of size {len(probs)}, vocab {self.script.n_vocab}")
        return TokenDistribution(self.vocab_group, probs)

    def _embed(self, text: str) -> np.ndarray:
        if text in self.script.embeddings:
            return np.asarray(self.script.embeddings[text], dtype=np.float64)
        return hash_embed(text, self.script.embed_dim, self.script.fallback_seed)


class AliasBackend(ModelBackend):
    """Same behaviour as ``inner`` under a different descriptor (pool replicas)."""

    def __init__(self, inner: ModelBackend, descriptor: ModelDescriptor):
        super().__init__(descriptor, vocab=inner.vocab, eos_id=inner.eos_id)
        self.inner = inner
        self.capabilities = inner.capabilities

    def _generate(self, prompt, params):
        return self.inner._generate(prompt, params)

    def _next_token_distribution(self, context, prompt):
        return self.inner._next_token_distribution(context, prompt)

    def _embed(self, text):
        return self.inner._embed(text)

    def detokenize(self, ids):
        return self.inner.detokenize(ids)

    def __getattr__(self, name):
        # weights and other family-specific attributes
        if name == "inner":
            raise AttributeError(name)
        return getattr(self.inner, name)


class ModelPool(Sequence):
    """Ordered collection of backends with unique ids."""

    def __init__(self, backends: Iterable[ModelBackend]):
        self._backends = list(backends)
        if not self._backends:
            raise ConfigError("a model pool needs at least one model")
        seen = set()
        for b in self._backends:
            if b.id in seen:
                raise ConfigError(f"duplicate model id {b.id!r}")
            seen.add(b.id)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return ModelPool(self._backends[i])
        return self._backends[i]

    def __len__(self):
        return len(self._backends)

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self._backends]

    def get(self, model_id: str) -> ModelBackend:
        for b in self._backends:
            if b.id == model_id:
                return b
        raise KeyError(model_id)

    def index(self, model_id: str, *args) -> int:
        return self.ids.index(model_id)

    def without(self, model_id: str) -> ModelPool:
        return ModelPool(b for b in self._backends if b.id != model_id)

    def __repr__(self):
        return f"ModelPool({self.ids!r})"


def check_shared_vocab(backends: Iterable[ModelBackend]) -> str:
    groups = {b.vocab_group for b in backends}
    if len(groups) != 1:
        raise VocabError(f"models must share one vocabulary, got {sorted(groups)}")
    return groups.pop()


def sample_token(probs, params: GenerationParams, rng: np.random.Generator) -> int:
    """Draw one token id under temperature / top-p.

    Exactly one uniform is consumed per call, greedy or not, so decode loops
    that mix models stay aligned on the random stream.
    """
    u = rng.random()
    p = np.asarray(probs, dtype=np.float64)
    if params.temperature == 0:
        return int(np.argmax(p))
    with np.errstate(divide="ignore"):
        logp = np.log(p) / params.temperature
    logp -= logp.max()
    w = np.exp(logp)
    w /= w.sum()
    order = np.argsort(-w, kind="stable")
    cum = np.cumsum(w[order])
    cut = int(np.searchsorted(cum, params.top_p - 1e-12)) + 1
    kept = np.sort(order[:cut])
    wk = w[kept] / w[kept].sum()
    idx = int(np.searchsorted(np.cumsum(wk), u, side="right"))
    return int(kept[min(idx, kept.size - 1)])


def token_logprob(dist: TokenDistribution, token: int) -> float:
    p = dist.probs[token]
    return float(math.log(p)) if p > 0 else -math.inf


def sample_decode(backend: ModelBackend, prompt: str, params: GenerationParams) -> GenerationOutput:
    """Plain single-model autoregressive decoding over next-token distributions."""
    rng = np.random.default_rng(params.seed)
    ids: list[int] = []
    tokens = []
    finish = "length"
    while len(ids) < params.max_new_tokens:
        dist = backend.next_token_distribution(ids, prompt)
        tok = sample_token(dist.probs, params, rng)
        if backend.eos_id is not None and tok == backend.eos_id:
            finish = "stop"
            break
        ids.append(tok)
        tokens.append((tok, min(0.0, token_logprob(dist, tok))))
    return GenerationOutput(backend.detokenize(ids), tuple(tokens), finish)


def parallel_map(fn: Callable, items: Iterable, max_workers: int = 1) -> list:
    """Order-preserving map; threads only when ``max_workers > 1``."""
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=max_workers) as ex:
        return list(ex.map(fn, items))


_ID_RE_CACHE: dict[str, re.Pattern] = {}


def find_ids(text: str, ids: Sequence[str]) -> list[str]:
    """Pool ids occurring in ``text`` as whole tokens, in order of first appearance."""
    hits = []
    for mid in ids:
        pat = _ID_RE_CACHE.get(mid)
        if pat is None:
            pat = _ID_RE_CACHE[mid] = re.compile(rf"(?<![\w\-.#]){re.escape(mid)}(?![\w\-#]|\.\w)")
        m = pat.search(text)
        if m:
            hits.append((m.start(), -len(mid), mid))
    return [mid for _, _, mid in sorted(hits)]


def _build_backend(spec: Mapping[str, Any], base_dir: Path) -> ModelBackend:
    spec = dict(spec)
    kind = spec.pop("backend", "mock")
    try:
        descriptor = ModelDescriptor(
            id=spec.pop("id"),
            display_name=spec.pop("display_name", ""),
            description=spec.pop("description", ""),
            vocab_group=spec.pop("vocab_group", "default"),
            architecture_tag=spec.pop("architecture_tag", ""),
            param_count=int(spec.pop("param_count", 0)),
        )
    except KeyError as e:
        raise ConfigError(f"model spec missing {e.args[0]!r}") from None
    max_in_flight = int(spec.pop("max_in_flight", 8))
    if kind == "mock":
        script = spec.pop("script", None)
        if isinstance(script, str):
            path = base_dir / script
            if not path.exists():
                raise ConfigError(f"mock script not found: {path}")
            script = MockScript.load(path)
        elif script is not None:
            script = MockScript.from_dict(script)
        backend = MockBackend(descriptor, script, max_in_flight=max_in_flight)
    elif kind == "http":
        from .openai_http import HttpBackend
        if not spec.get("base_url"):
            raise ConfigError(f"http backend {descriptor.id!r} needs a base_url endpoint")
        backend = HttpBackend(descriptor, max_in_flight=max_in_flight, **spec)
        spec = {}
    elif kind == "weights":
        from .weight import WeightStoreBackend
        if "path" not in spec:
            raise ConfigError(f"weight backend {descriptor.id!r} needs a path")
        path = base_dir / spec.pop("path")
        if not path.exists():
            raise ConfigError(f"weight file not found: {path}")
        backend = WeightStoreBackend.from_file(descriptor, path)
    else:
        raise ConfigError(f"unknown backend family {kind!r}")
    if spec:
        raise ConfigError(f"unknown keys for model {descriptor.id!r}: {sorted(spec)}")
    return backend


def load_pool(config: Mapping[str, Any] | Sequence[Mapping[str, Any]], base_dir: str | Path = ".") -> ModelPool:
    """Build an ordered pool from a pool specification.

    ``config`` is either a list of model specs or a mapping with ``models``
    and an optional ``diversity: {"a": .., "b": ..}`` entry that replicates
    the first ``a`` models ``b`` times each.
    """
    base_dir = Path(base_dir)
    if isinstance(config, Mapping):
        models = config.get("models")
        diversity = config.get("diversity")
        extra = set(config) - {"models", "diversity"}
        if extra:
            raise ConfigError(f"unknown pool keys: {sorted(extra)}")
    else:
        models, diversity = config, None
    if not models:
        raise ConfigError("pool needs at least one model")
    backends = [_build_backend(m, base_dir) for m in models]
    pool = ModelPool(backends)
    if diversity:
        from .evalkit import build_diversity_pool
        pool = build_diversity_pool(list(pool), int(diversity["a"]), int(diversity["b"]))
    return pool
