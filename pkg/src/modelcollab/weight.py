"""Weight-level collaboration over :class:`~modelcollab.tensors.TensorMap` parameters."""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (EMBED_DIM, BackendCapabilities, GenerationOutput, GenerationParams, ModelBackend,
                   ModelDescriptor, hash_embed)
from .errors import ArgumentError, CapabilityError, ShapeError
from .pso import PSOHyper, pso_maximize
from .tensors import TensorMap, check_all_compatible, tensor_load

LOGGER = logging.getLogger(__name__)

Evaluator = Callable[[TensorMap], float]


@dataclass
class WeightDelta:
    base_id: str
    delta: TensorMap

    @classmethod
    def between(cls, finetuned: TensorMap, base: TensorMap, base_id: str = "base") -> WeightDelta:
        return cls(base_id, finetuned - base)


class CachedEvaluator:
    """Memoizes dev utilities by (tensor content hash, dataset id)."""

    def __init__(self, fn: Evaluator, dataset_id: str = "dev"):
        self.fn = fn
        self.dataset_id = dataset_id
        self.cache: dict[tuple[str, str], float] = {}
        self.calls = 0

    def __call__(self, tmap: TensorMap) -> float:
        key = (tmap.content_hash(), self.dataset_id)
        if key not in self.cache:
            self.calls += 1
            self.cache[key] = float(self.fn(tmap))
        return self.cache[key]


def _safe_eval(evaluator: Evaluator, tmap: TensorMap, log: list | None = None) -> float:
    try:
        u = float(evaluator(tmap))
    except Exception as exc:  # noqa: BLE001 - evaluator failures reject the candidate
        if log is not None:
            log.append(f"evaluator failed: {exc}")
        return -math.inf
    return u if math.isfinite(u) else -math.inf


def linear_combine(maps: Sequence[TensorMap], weights: Sequence[float]) -> TensorMap:
    """Elementwise sum of ``weights[i] * maps[i]``."""
    maps = check_all_compatible(maps)
    if len(maps) != len(weights):
        raise ArgumentError(f"{len(maps)} maps but {len(weights)} weights")
    out = {}
    for name in maps[0]:
        acc = float(weights[0]) * maps[0].value(name)
        for m, w in zip(maps[1:], weights[1:]):
            acc = acc + float(w) * m.value(name)
        out[name] = acc
    return maps[0].derive(out)


def uniform_average(maps: Sequence[TensorMap]) -> TensorMap:
    return linear_combine(maps, [1.0 / len(maps)] * len(maps))


def _rank(pool: Sequence[TensorMap], scores) -> tuple[list[int], list[float]]:
    if callable(scores):
        vals = [_safe_eval(scores, m) for m in pool]
    else:
        vals = [float(s) for s in scores]
        if len(vals) != len(pool):
            raise ArgumentError("one dev score per model required")
    order = sorted(range(len(pool)), key=lambda i: (-vals[i], i))
    return order, vals


@dataclass
class SoupResult:
    model: TensorMap
    members: list[int]
    score: float
    log: list[dict] = field(default_factory=list)


def greedy_soup(pool: Sequence[TensorMap], evaluator: Evaluator) -> SoupResult:
    """Add models in descending dev order, keeping each only if the averaged soup strictly improves."""
    pool = check_all_compatible(pool)
    order, scores = _rank(pool, evaluator)
    members = [order[0]]
    current = pool[order[0]]
    best = scores[order[0]]
    log = [{"model": order[0], "score": best, "kept": True}]
    for i in order[1:]:
        errs: list = []
        candidate = uniform_average([pool[j] for j in members + [i]])
        s = _safe_eval(evaluator, candidate, errs)
        kept = s > best
        log.append({"model": i, "score": s, "kept": kept, **({"error": errs[0]} if errs else {})})
        if kept:
            members.append(i)
            current, best = candidate, s
    return SoupResult(current, members, best, log)


def _delta_map(d) -> TensorMap:
    return d.delta if isinstance(d, WeightDelta) else d


def _rewrap(template, tmap: TensorMap):
    return WeightDelta(template.base_id, tmap) if isinstance(template, WeightDelta) else tmap


def dare_prune(delta, p: float, seed: int = 0):
    """Zero each element with probability ``p``; rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ArgumentError("drop rate must lie in [0, 1)")
    tmap = _delta_map(delta)
    rng = np.random.default_rng(seed)
    scale = 1.0 / (1.0 - p)
    out = {}
    for name in tmap:
        v = tmap.value(name)
        keep = rng.random(v.shape) >= p
        out[name] = np.where(keep, v * scale, 0.0)
    return _rewrap(delta, tmap.derive(out))


def ties_values(values: np.ndarray, lam: float = 1.0) -> np.ndarray:
    """Sign election over axis 0 (ties elect +), then the mean of agreeing values scaled by ``lam``."""
    total = values.sum(axis=0)
    elected = np.where(total >= 0, 1.0, -1.0)
    agree = (np.sign(values) == elected) & (values != 0)
    count = agree.sum(axis=0)
    summed = np.where(agree, values, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, summed / np.maximum(count, 1), 0.0)
    return lam * mean


def ties_merge(deltas: Sequence, lam: float = 1.0):
    """Per-element sign consensus merge of parameter deltas."""
    if lam <= 0:
        raise ArgumentError("lambda must be positive")
    maps = check_all_compatible([_delta_map(d) for d in deltas])
    merged = maps[0].derive({n: ties_values(np.stack([m.value(n) for m in maps]), lam) for n in maps[0]})
    return _rewrap(deltas[0], merged)


def dare_ties(base: TensorMap, finetuned: Sequence[TensorMap], p: float = 0.0, lam: float = 1.0,
              seed: int = 0) -> TensorMap:
    """DARE-prune each fine-tuned delta, TIES-merge them, add back onto ``base``."""
    check_all_compatible([base, *finetuned])
    deltas = [dare_prune(m - base, p, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
              for i, m in enumerate(finetuned)]
    merged = ties_merge(deltas, lam)
    return base + merged


def expo(pool: Sequence[TensorMap], scores, k: int = 1, alpha: float = 0.5) -> TensorMap:
    """Extrapolate from the bottom-k average through the top-k average.

    ``scores`` is a dev evaluator or one score per model.
    """
    pool = check_all_compatible(pool)
    if k < 1 or 2 * k > len(pool):
        raise ArgumentError("need 1 <= k and 2k <= |pool|")
    order, _ = _rank(pool, scores)
    top = uniform_average([pool[i] for i in order[:k]])
    if alpha == 0:
        return top
    bottom = uniform_average([pool[i] for i in order[-k:]])
    return top + (top - bottom) * alpha


@dataclass
class SearchResult:
    model: TensorMap
    utility: float
    history: list[float] = field(default_factory=list)
    weights: np.ndarray | None = None


def model_swarms_search(pool: Sequence[TensorMap], evaluator: Evaluator, iterations: int = 10,
                        hyper: PSOHyper | None = None, seed: int = 0, dataset_id: str = "dev") -> SearchResult:
    """PSO in weight space with one particle per pool member (zero initial velocity)."""
    if iterations < 0:
        raise ArgumentError("iterations must be >= 0")
    pool = check_all_compatible(pool)
    template = pool[0]
    cached = CachedEvaluator(evaluator, dataset_id)
    state = pso_maximize(lambda x: _safe_eval(cached, template.from_vector(x)),
                         [m.to_vector() for m in pool], iterations, hyper or PSOHyper(), seed)
    if state.gbest_position is None:
        raise ArgumentError("every particle evaluation failed")
    return SearchResult(template.from_vector(state.gbest_position), state.gbest_utility, state.history)


def compose(base: TensorMap, adapters: Sequence, weights: Sequence[float]) -> TensorMap:
    deltas = [_delta_map(a) for a in adapters]
    check_all_compatible([base, *deltas])
    return base + linear_combine(deltas, weights)


def lorahub_compose(base: TensorMap, adapters: Sequence, evaluator: Evaluator, budget: int = 100,
                    seed: int = 0, bound: float = 1.5) -> SearchResult:
    """Derivative-free search for scalar adapter weights in [-bound, bound].

    Starts from uniform weights 1/n and perturbs the incumbent with Gaussian
    steps shrinking geometrically from bound/2 to 0.01; ``budget`` counts
    evaluator calls. Budget 0 returns the uniform composition unevaluated.
    """
    n = len(adapters)
    if n == 0:
        raise ArgumentError("need at least one adapter")
    w = np.full(n, 1.0 / n)
    if budget <= 0:
        return SearchResult(compose(base, adapters, w), float("nan"), [], w)
    cached = CachedEvaluator(evaluator)
    rng = np.random.default_rng(seed)
    best_u = _safe_eval(cached, compose(base, adapters, w))
    history = [best_u]
    step0, step1 = bound / 2, 0.01
    trials = budget - 1
    for t in range(trials):
        step = step0 * (step1 / step0) ** (t / max(trials - 1, 1))
        cand = np.clip(w + step * rng.standard_normal(n), -bound, bound)
        u = _safe_eval(cached, compose(base, adapters, cand))
        if u > best_u:
            w, best_u = cand, u
        history.append(best_u)
    return SearchResult(compose(base, adapters, w), best_u, history, w)


DEFAULT_LABELS = ("A", "B", "C", "D", "E")


class WeightStoreBackend(ModelBackend):
    """Model whose parameters live in a :class:`TensorMap`.

    When the map carries a ``readout`` tensor of shape (labels, 64) the
    backend also answers text prompts: it scores each label by the readout
    row's dot product with the prompt's hash embedding and replies with the
    best label. Labels come from the ``labels`` metadata entry.
    """

    def __init__(self, descriptor: ModelDescriptor, weights: TensorMap, max_in_flight: int = 8):
        super().__init__(descriptor, max_in_flight=max_in_flight)
        self.weights = weights
        readout = weights.tensors.get("readout")
        self._readout = None
        if readout is not None and readout.ndim == 2 and readout.shape[1] == EMBED_DIM:
            self._readout = weights.value("readout")
        labels = weights.metadata.get("labels")
        self.labels = tuple(labels.split(",")) if labels else DEFAULT_LABELS
        self.capabilities = BackendCapabilities(supports_text=self._readout is not None,
                                                supports_weights=True)

    @classmethod
    def from_file(cls, descriptor: ModelDescriptor, path: str | Path) -> WeightStoreBackend:
        return cls(descriptor, tensor_load(path))

    def with_weights(self, weights: TensorMap, model_id: str | None = None) -> WeightStoreBackend:
        self.weights.check_compatible(weights)
        d = self.descriptor
        desc = ModelDescriptor(model_id or f"{d.id}+merged", d.display_name, d.description, d.vocab_group,
                               d.architecture_tag, d.param_count)
        return WeightStoreBackend(desc, weights)

    def _generate(self, prompt: str, params: GenerationParams) -> GenerationOutput:
        if self._readout is None:
            raise CapabilityError(f"{self.id}: no readout tensor to answer with")
        x = hash_embed(prompt)
        norm = np.linalg.norm(x)
        scores = self._readout @ (x / norm if norm else x)
        label = self.labels[int(np.argmax(scores)) % len(self.labels)]
        return GenerationOutput(f"The answer is ({label}).", ((0, 0.0),) * 4, "stop")


def weights_of(backends: Sequence[ModelBackend]) -> list[TensorMap]:
    out = []
    for b in backends:
        if not b.capabilities.supports_weights:
            raise CapabilityError(f"backend {b.id!r} exposes no weights")
        out.append(b.weights)
    try:
        check_all_compatible(out)
    except ShapeError as exc:
        raise ShapeError(f"weight-level methods need one shared architecture: {exc}") from None
    return out
