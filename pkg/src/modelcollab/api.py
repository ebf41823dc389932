"""API-level collaboration: pick or interleave models, exchanging only the answer stream."""
from __future__ import annotations

import logging
import math
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import prompts
from .core import (GenerationOutput, GenerationParams, ModelBackend, ModelPool, TokenDistribution,
                   check_shared_vocab, find_ids, sample_token, token_logprob)
from .errors import ArgumentError, CapabilityError, ConfigError, TransportError

LOGGER = logging.getLogger(__name__)

STATISTICS = ("min_token_prob", "geomean_token_prob", "top1_next_prob")


@dataclass(frozen=True)
class ConfidenceRule:
    statistic: str = "geomean_token_prob"
    threshold: float = 0.5

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ArgumentError(f"unknown confidence statistic {self.statistic!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ArgumentError("threshold must lie in [0, 1]")

    def uncertain(self, confidence: float) -> bool:
        return confidence < self.threshold

    def confidence(self, output: GenerationOutput) -> float:
        """Confidence of a finished draft from its token logprobs."""
        if output.tokens is None:
            raise CapabilityError("confidence needs token logprobs")
        lps = output.logprobs
        if not lps:
            return 1.0
        if self.statistic == "min_token_prob":
            return math.exp(min(lps))
        if self.statistic == "geomean_token_prob":
            return math.exp(math.fsum(lps) / len(lps))
        return math.exp(lps[0])


@dataclass
class SelectorPolicy:
    """Non-neural routing policy fitted in-engine.

    ``knn``: ``parameters`` holds dev query embeddings and their best-model
    labels. ``tabular``: additionally a (model, task) score table and the dev
    task tags used to predict a query's task.
    """

    kind: str
    pool_ids: list[str]
    parameters: dict[str, Any]
    embedder: ModelBackend | Callable[[str], Any] | None = None

    def embed(self, text: str) -> np.ndarray:
        if isinstance(self.embedder, ModelBackend):
            return np.asarray(self.embedder.embed_text(text), dtype=np.float64)
        return np.asarray(self.embedder(text), dtype=np.float64)


def _descriptions(pool: ModelPool) -> str:
    return "\n".join(f"- {b.id}: {b.descriptor.description}" for b in pool)


def render_route_prompt(pool: ModelPool, query: str) -> str:
    return prompts.render("route", models=_descriptions(pool), query=query)


def prompt_route(router: ModelBackend, pool: ModelPool, query: str, params: GenerationParams | None = None,
                 warnings: list | None = None) -> str:
    """Ask ``router`` which model fits ``query`` best; falls back to ``pool[0]``."""
    for b in pool:
        if not b.descriptor.description:
            raise ConfigError(f"model {b.id!r} has no description to route on")
    try:
        out = router.generate(render_route_prompt(pool, query), params or GenerationParams(temperature=0.0))
    except TransportError as exc:
        if warnings is not None:
            warnings.append(f"router failed ({exc}); routed to {pool[0].id}")
        return pool[0].id
    hits = find_ids(out.text, pool.ids)
    return hits[0] if hits else pool[0].id


def _cosine_distances(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(q)
    mn = np.linalg.norm(matrix, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = (matrix @ q) / (mn * qn)
    return np.where((mn > 0) & (qn > 0), 1.0 - sims, 1.0)


def _best_labels(pool_ids: Sequence[str], records: Sequence, scores: Mapping[str, Mapping[str, float]]) -> list[str]:
    labels = []
    for rec in records:
        best, best_s = None, -math.inf
        for mid in pool_ids:
            s = scores[mid][rec.id]
            if s > best_s:
                best, best_s = mid, s
        labels.append(best)
    return labels


def _dev_scores(pool, dev, scores, params):
    if scores is not None:
        return scores
    from .evalkit import evaluate_pool
    return evaluate_pool(pool, dev, params)


def fit_trained_router(pool: ModelPool, dev: Sequence, embedder, *, k: int = 3,
                       scores: Mapping[str, Mapping[str, float]] | None = None,
                       params: GenerationParams | None = None) -> SelectorPolicy:
    """k-NN router over dev queries labelled with their best model (ties to pool order).

    ``scores`` maps model id -> record id -> score; when omitted every model
    is run on every dev record.
    """
    if not dev:
        raise ConfigError("cannot fit a router on an empty dev set")
    scores = _dev_scores(pool, dev, scores, params)
    labels = _best_labels(pool.ids, dev, scores)
    policy = SelectorPolicy("knn", pool.ids, {"k": k, "labels": labels}, embedder)
    policy.parameters["embeddings"] = np.stack([policy.embed(r.prompt) for r in dev])
    return policy


def fit_graph_router(pool: ModelPool, dev: Sequence, embedder, *,
                     scores: Mapping[str, Mapping[str, float]] | None = None,
                     params: GenerationParams | None = None) -> SelectorPolicy:
    """Task-model score table; queries take the task of their nearest dev query."""
    if not dev:
        raise ConfigError("cannot fit a router on an empty dev set")
    scores = _dev_scores(pool, dev, scores, params)
    tasks = sorted({r.task_tag for r in dev})
    table = {}
    for t in tasks:
        members = [r for r in dev if r.task_tag == t]
        table[t] = {m: math.fsum(scores[m][r.id] for r in members) / len(members) for m in pool.ids}
    global_mean = {m: math.fsum(scores[m][r.id] for r in dev) / len(dev) for m in pool.ids}
    policy = SelectorPolicy("tabular", pool.ids, {
        "table": table, "global": global_mean, "tasks": [r.task_tag for r in dev]}, embedder)
    policy.parameters["embeddings"] = np.stack([policy.embed(r.prompt) for r in dev])
    return policy


def _argmax_ordered(pool_ids: Sequence[str], score: Mapping[str, float]) -> str:
    best = pool_ids[0]
    for mid in pool_ids[1:]:
        if score[mid] > score[best]:
            best = mid
    return best


def route(policy: SelectorPolicy, query: str, task: str | None = None) -> str:
    """Model id chosen by a fitted policy for ``query``."""
    params = policy.parameters
    if policy.kind == "knn":
        d = _cosine_distances(params["embeddings"], policy.embed(query))
        order = np.argsort(d, kind="stable")[:params["k"]]
        votes = [params["labels"][i] for i in order]
        counts = Counter(votes)
        top = max(counts.values())
        return next(v for v in votes if counts[v] == top)
    if policy.kind == "tabular":
        if task is None:
            d = _cosine_distances(params["embeddings"], policy.embed(query))
            task = params["tasks"][int(np.argmin(d))]
        score = params["table"].get(task, params["global"])
        return _argmax_ordered(policy.pool_ids, score)
    raise ArgumentError(f"policy kind {policy.kind!r} cannot route on its own")


@dataclass
class CascadeResult:
    output: GenerationOutput
    model_id: str
    index: int
    confidences: list[float | None] = field(default_factory=list)


def cascade(pool: ModelPool, query: str, rule: ConfidenceRule | None = None,
            params: GenerationParams | None = None, warnings: list | None = None) -> CascadeResult:
    """Try models in order; defer while confidence is below the threshold. The last model always answers."""
    rule = rule or ConfidenceRule()
    params = params or GenerationParams()
    confs: list[float | None] = []
    last_ok = None
    for i, backend in enumerate(pool):
        try:
            out = backend.generate(query, params)
        except TransportError as exc:
            confs.append(None)
            if warnings is not None:
                warnings.append(f"cascade: {backend.id} failed ({exc}); deferring")
            continue
        c = rule.confidence(out)
        confs.append(c)
        last_ok = (out, backend.id, i)
        if i == len(pool) - 1 or not rule.uncertain(c):
            return CascadeResult(out, backend.id, i, confs)
    if last_ok is None:
        return CascadeResult(GenerationOutput("", None, "error"), pool[-1].id, len(pool) - 1, confs)
    return CascadeResult(*last_ok, confs)


class _Decoder:
    """Shared autoregressive state for token-level collaboration loops."""

    def __init__(self, params: GenerationParams, eos_id: int | None):
        self.params = params
        self.eos_id = eos_id
        self.rng = np.random.default_rng(params.seed)
        self.ids: list[int] = []
        self.tokens: list[tuple[int, float]] = []
        self.owners: list[str] = []
        self.finished = False

    @property
    def done(self) -> bool:
        return self.finished or len(self.ids) >= self.params.max_new_tokens

    def emit(self, owner: str, dist: TokenDistribution) -> int:
        tok = sample_token(dist.probs, self.params, self.rng)
        if self.eos_id is not None and tok == self.eos_id:
            self.finished = True
            return tok
        self.ids.append(tok)
        self.tokens.append((tok, min(0.0, token_logprob(dist, tok))))
        self.owners.append(owner)
        return tok

    def output(self, backend: ModelBackend) -> GenerationOutput:
        return GenerationOutput(backend.detokenize(self.ids), tuple(self.tokens),
                                "stop" if self.finished else "length")


@dataclass
class Span:
    index: int
    model_id: str
    start: int
    end: int

    def to_json(self) -> dict:
        return {"patch": self.index, "model": self.model_id, "span": [self.start, self.end]}


def spans_from_owners(owners: Sequence[str]) -> list[Span]:
    spans: list[Span] = []
    for pos, owner in enumerate(owners):
        if spans and spans[-1].model_id == owner and spans[-1].end == pos:
            spans[-1].end = pos + 1
        else:
            spans.append(Span(len(spans), owner, pos, pos + 1))
    return spans


@dataclass
class TokenCollabResult:
    output: GenerationOutput
    attribution: list[str]
    spans: list[Span]
    log: list[dict] = field(default_factory=list)


def _result(dec: _Decoder, backend: ModelBackend, spans=None, log=None) -> TokenCollabResult:
    return TokenCollabResult(dec.output(backend), list(dec.owners),
                             spans if spans is not None else spans_from_owners(dec.owners), log or [])


def nudging_generate(base: ModelBackend, nudgers: Sequence[ModelBackend], query: str,
                     rule: ConfidenceRule | None = None, nudge_cap: int = 16,
                     params: GenerationParams | None = None) -> TokenCollabResult:
    """Base model decodes; while its top-1 next-token probability is below the
    threshold the first nudger writes, for at most ``nudge_cap`` tokens per episode."""
    rule = rule or ConfidenceRule("top1_next_prob", 0.4)
    params = params or GenerationParams()
    if not nudgers:
        raise ArgumentError("nudging needs at least one nudging model")
    if nudge_cap < 1:
        raise ArgumentError("nudge_cap must be >= 1")
    group = check_shared_vocab([base, *nudgers])
    nudger = nudgers[0]
    dec = _Decoder(params, base.eos_id)
    forced_base = False
    while not dec.done:
        bdist = base.next_token_distribution(dec.ids, query, group)
        if forced_base or not rule.uncertain(bdist.top1()):
            forced_base = False
            dec.emit(base.id, bdist)
            continue
        emitted = 0
        while not dec.done:
            dec.emit(nudger.id, nudger.next_token_distribution(dec.ids, query, group))
            emitted += 1
            if dec.done:
                break
            bdist = base.next_token_distribution(dec.ids, query, group)
            if not rule.uncertain(bdist.top1()):
                break
            if emitted >= nudge_cap:
                forced_base = True
                break
    return _result(dec, base)


def _pick_switch_model(selector, pool: ModelPool, query: str, partial: str, patch_index: int,
                       ids: list[int], params: GenerationParams):
    if isinstance(selector, ModelBackend):
        out = selector.generate(prompts.render("switch_select", query=query, partial=partial or "(empty)",
                                               models=", ".join(pool.ids)),
                                GenerationParams(max_new_tokens=16, temperature=0.0, seed=params.seed))
        hits = find_ids(out.text, pool.ids)
        return hits[0] if hits else None
    if isinstance(selector, SelectorPolicy):
        return route(selector, f"{query} {partial}".strip())
    return selector(patch_index, list(ids), partial)


def switch_generation(selector, pool: ModelPool, query: str, patch_size: int = 16,
                      params: GenerationParams | None = None, warnings: list | None = None
                      ) -> TokenCollabResult:
    """Models take turns writing ``patch_size``-token patches chosen by ``selector``.

    ``selector`` is a backend prompted with the partial response, a fitted
    :class:`SelectorPolicy`, or a callable ``(patch_index, token_ids, text) -> id``.
    An unknown id keeps the previous patch's model.
    """
    if patch_size < 1:
        raise ArgumentError("patch_size must be >= 1")
    params = params or GenerationParams()
    group = check_shared_vocab(pool)
    dec = _Decoder(params, pool[0].eos_id)
    spans: list[Span] = []
    current = pool[0].id
    while not dec.done:
        if len(pool) > 1:
            pick = _pick_switch_model(selector, pool, query, pool[0].detokenize(dec.ids), len(spans),
                                      dec.ids, params)
            if pick in pool.ids:
                current = pick
            elif warnings is not None:
                warnings.append(f"switch: selector returned unknown id {pick!r}; kept {current}")
        backend = pool.get(current)
        start = len(dec.ids)
        for _ in range(patch_size):
            if dec.done:
                break
            dec.emit(current, backend.next_token_distribution(dec.ids, query, group))
        if len(dec.ids) > start:
            spans.append(Span(len(spans), current, start, len(dec.ids)))
    return _result(dec, pool[0], spans)


def _decide_owner(deferral, base: ModelBackend, assistant: ModelBackend, query: str, dec: _Decoder,
                  bdist: TokenDistribution | None) -> str:
    if isinstance(deferral, ConfidenceRule):
        return assistant.id if deferral.uncertain(bdist.top1()) else base.id
    if isinstance(deferral, SelectorPolicy):
        pick = route(deferral, f"{query} {base.detokenize(dec.ids)}".strip())
    else:
        pick = deferral(len(dec.ids), list(dec.ids), bdist)
    if pick in ("assistant", assistant.id):
        return assistant.id
    return base.id


def co_llm_generate(base: ModelBackend, assistant: ModelBackend, deferral, query: str,
                    params: GenerationParams | None = None) -> TokenCollabResult:
    """Per-token deferral between two models.

    ``deferral`` is a :class:`ConfidenceRule` on the base model's top-1
    probability, a fitted :class:`SelectorPolicy`, or a callable
    ``(position, token_ids, base_dist) -> "base" | "assistant"``.
    """
    params = params or GenerationParams()
    group = check_shared_vocab([base, assistant])
    dec = _Decoder(params, base.eos_id)
    while not dec.done:
        bdist = base.next_token_distribution(dec.ids, query, group)
        owner = _decide_owner(deferral, base, assistant, query, dec, bdist)
        dist = bdist if owner == base.id else assistant.next_token_distribution(dec.ids, query, group)
        dec.emit(owner, dist)
    return _result(dec, base)


def _mentor_decides(decider, generator, mentor, query, dec, params) -> str:
    if isinstance(decider, ModelBackend):
        out = decider.generate(prompts.render("mentor_decide", query=query,
                                              partial=generator.detokenize(dec.ids) or "(empty)"),
                               GenerationParams(max_new_tokens=16, temperature=0.0, seed=params.seed))
        return "mentor" if "mentor" in out.text.lower() else "generator"
    if isinstance(decider, SelectorPolicy):
        pick = route(decider, f"{query} {generator.detokenize(dec.ids)}".strip())
    else:
        pick = decider(len(dec.ids), list(dec.ids))
    return "mentor" if pick in ("mentor", mentor.id) else "generator"


def mentor_collab_generate(generator: ModelBackend, mentor: ModelBackend, query: str, inspect_prob: float = 0.2,
                           decider=None, patch_size: int = 4, seed: int = 0,
                           params: GenerationParams | None = None) -> TokenCollabResult:
    """Generator decodes; at random positions its top-1 token is compared with the mentor's.

    On disagreement ``decider`` (default: the generator itself, prompted)
    chooses who writes the next ``patch_size`` tokens. Inspection draws use
    their own stream seeded by ``seed``.
    """
    if not 0.0 <= inspect_prob <= 1.0:
        raise ArgumentError("inspect_prob must lie in [0, 1]")
    if patch_size < 1:
        raise ArgumentError("patch_size must be >= 1")
    params = params or GenerationParams()
    decider = generator if decider is None else decider
    group = check_shared_vocab([generator, mentor])
    inspect_rng = np.random.default_rng([seed, 8])
    dec = _Decoder(params, generator.eos_id)
    log = []
    while not dec.done:
        gdist = generator.next_token_distribution(dec.ids, query, group)
        if inspect_rng.random() < inspect_prob:
            mdist = mentor.next_token_distribution(dec.ids, query, group)
            differ = gdist.argmax() != mdist.argmax()
            entry = {"position": len(dec.ids), "generator_top": gdist.argmax(), "mentor_top": mdist.argmax(),
                     "differ": bool(differ)}
            if differ:
                who = _mentor_decides(decider, generator, mentor, query, dec, params)
                entry["writer"] = who
                log.append(entry)
                writer, dist = (mentor, mdist) if who == "mentor" else (generator, gdist)
                for j in range(patch_size):
                    if dec.done:
                        break
                    if j:
                        dist = writer.next_token_distribution(dec.ids, query, group)
                    dec.emit(writer.id, dist)
                continue
            log.append(entry)
        dec.emit(generator.id, gdist)
    return _result(dec, generator, log=log)
