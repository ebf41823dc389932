"""Logit-level collaboration: per-step arithmetic over next-token distributions."""
from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .api import _Decoder
from .core import GenerationOutput, GenerationParams, ModelPool, TokenDistribution, check_shared_vocab
from .errors import ArgumentError, CollabError, VocabError

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    k: int = 1
    alpha: float = 0.1
    ranking: tuple[str, ...] = ()

    def __post_init__(self):
        if self.k < 1:
            raise ArgumentError("k must be positive")
        if self.alpha < 0:
            raise ArgumentError("alpha must be non-negative")
        if self.ranking and 2 * self.k > len(self.ranking):
            raise ArgumentError("2k must not exceed the number of ranked models")


def _check_group(dists: Sequence[TokenDistribution]) -> str:
    if not dists:
        raise ArgumentError("need at least one distribution")
    groups = {d.vocab_group for d in dists}
    sizes = {len(d) for d in dists}
    if len(groups) != 1 or len(sizes) != 1:
        raise VocabError(f"distributions disagree on vocabulary: groups {sorted(groups)}, sizes {sorted(sizes)}")
    return groups.pop()


def mix_distributions(dists: Sequence[TokenDistribution]) -> TokenDistribution:
    """Elementwise arithmetic mean."""
    group = _check_group(dists)
    if len(dists) == 1:
        return dists[0]
    return TokenDistribution(group, np.mean(np.stack([d.probs for d in dists]), axis=0))


def contrast_raw(dists: Sequence[TokenDistribution], k: int, alpha: float) -> np.ndarray:
    """p1 + alpha * (sum of top-k - sum of bottom-k), before clamping."""
    p = np.stack([d.probs for d in dists])
    return p[0] + alpha * (p[:k].sum(axis=0) - p[len(p) - k:].sum(axis=0))


def contrast_distributions(dists: Sequence[TokenDistribution], cfg: ContrastiveConfig) -> TokenDistribution:
    """Contrast the top-k against the bottom-k of rank-ordered distributions.

    Negative entries are clamped to zero and the result renormalized; if
    nothing survives the clamp the top-ranked distribution is returned.
    """
    group = _check_group(dists)
    if 2 * cfg.k > len(dists):
        raise ArgumentError("2k must not exceed the number of distributions")
    if cfg.alpha == 0:
        return dists[0]
    raw = contrast_raw(dists, cfg.k, cfg.alpha)
    if not np.any(raw < 0):
        # mass is conserved by the formula itself
        return TokenDistribution(group, raw)
    q = np.clip(raw, 0.0, None)
    if q.sum() <= 0:
        return dists[0]
    return TokenDistribution.normalized(group, q)


def rank_by_scores(pool_ids: Sequence[str], scores: Mapping[str, float]) -> tuple[str, ...]:
    """Descending dev score, ties in pool order."""
    return tuple(sorted(pool_ids, key=lambda m: (-scores[m], list(pool_ids).index(m))))


@dataclass
class DecodeResult:
    output: GenerationOutput
    steps: list[np.ndarray] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _collect(pool, ids, query, group, warnings):
    dists, alive = [], []
    for b in pool:
        try:
            dists.append(b.next_token_distribution(ids, query, group))
            alive.append(b.id)
        except VocabError:
            raise
        except CollabError as exc:
            warnings.append(f"step {len(ids)}: {b.id} failed ({exc}); continuing without it")
    if not dists:
        raise CollabError(f"step {len(ids)}: every model failed")
    return dists, alive


def fused_decode(pool: ModelPool, query: str, params: GenerationParams | None = None,
                 record_steps: bool = False) -> DecodeResult:
    """Sample each token from the mean of the pool's next-token distributions."""
    params = params or GenerationParams()
    group = check_shared_vocab(pool)
    dec = _Decoder(params, pool[0].eos_id)
    res = DecodeResult(GenerationOutput(""))
    while not dec.done:
        dists, _ = _collect(pool, dec.ids, query, group, res.warnings)
        mixed = mix_distributions(dists)
        if record_steps:
            res.steps.append(mixed.probs.copy())
        dec.emit("fused", mixed)
    res.output = dec.output(pool[0])
    return res


def contrastive_decode(pool: ModelPool, cfg: ContrastiveConfig, query: str,
                       params: GenerationParams | None = None, dev_scores: Mapping[str, float] | None = None,
                       record_steps: bool = False) -> DecodeResult:
    """Decode with the top-k vs bottom-k contrast applied at every step.

    The ranking comes from ``cfg.ranking`` or, failing that, ``dev_scores``.
    A model failing mid-decode is dropped from the ranking for that step.
    """
    params = params or GenerationParams()
    ranking = cfg.ranking or (rank_by_scores(pool.ids, dev_scores) if dev_scores is not None else ())
    if not ranking:
        raise ArgumentError("contrastive decoding needs a ranking or dev scores")
    ranked = ModelPool(pool.get(m) for m in ranking)
    if 2 * cfg.k > len(ranked):
        raise ArgumentError("2k must not exceed the pool size")
    group = check_shared_vocab(ranked)
    dec = _Decoder(params, ranked[0].eos_id)
    res = DecodeResult(GenerationOutput(""))
    while not dec.done:
        dists, _ = _collect(ranked, dec.ids, query, group, res.warnings)
        k = min(cfg.k, len(dists) // 2)
        q = contrast_distributions(dists, ContrastiveConfig(k, cfg.alpha)) if k else dists[0]
        if record_steps:
            res.steps.append(q.probs.copy())
        dec.emit("contrast", q)
    res.output = dec.output(ranked[0])
    return res
