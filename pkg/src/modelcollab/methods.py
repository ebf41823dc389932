"""Registry binding every collaboration method to the runner's fit/infer protocol.

A method optionally fits once on the dev split (routers, swarms, merges),
then answers each test instance independently. Hyperparameters are checked
against each method's declared defaults so a misspelled key is an error.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from . import api, logit, text, weight
from .core import GenerationParams, ModelBackend, ModelPool, hash_embed
from .errors import ConfigError
from .evalkit import DatasetRecord, answer_for, evaluate_pool, score_instance
from .pso import PSOHyper
from .tensors import TensorMap


@dataclass
class Context:
    pool: ModelPool
    hyper: dict[str, Any]
    dev: list[DatasetRecord] = field(default_factory=list)
    params: GenerationParams = field(default_factory=GenerationParams)
    seed: int = 0
    judge: ModelBackend | None = None
    warnings: list[str] = field(default_factory=list)
    max_workers: int = 1

    def role(self, name: str, default: int = 0) -> ModelBackend:
        mid = self.hyper.get(name)
        if mid is None:
            return self.pool[default]
        if mid not in self.pool.ids:
            raise ConfigError(f"{name}={mid!r} is not a pool model")
        return self.pool.get(mid)

    def others(self, *names: str) -> ModelPool:
        taken = {self.role(n).id for n in names}
        return ModelPool(b for b in self.pool if b.id not in taken)

    def embedder(self):
        mid = self.hyper.get("embedder")
        return self.pool.get(mid) if mid else hash_embed


Infer = Callable[[Context, dict, DatasetRecord, GenerationParams], tuple[str, dict]]


@dataclass(frozen=True)
class Method:
    id: str
    level: str
    infer: Infer
    defaults: Mapping[str, Any] = field(default_factory=dict)
    fit: Callable[[Context], dict] | None = None
    needs_dev: bool = False
    min_pool: int = 1


def _dev_scores(ctx: Context) -> dict[str, dict[str, float]]:
    return evaluate_pool(ctx.pool, ctx.dev, None, ctx.judge)


def _mean_scores(scores: Mapping[str, Mapping[str, float]]) -> dict[str, float]:
    return {m: math.fsum(row.values()) / len(row) for m, row in scores.items()}


def _token_artifacts(res: api.TokenCollabResult) -> dict:
    return {"attribution": res.attribution, "spans": [s.to_json() for s in res.spans], "log": res.log}


# single model baseline ------------------------------------------------------

def _single(ctx, state, rec, params):
    b = ctx.role("model")
    return b.generate(rec.prompt, params).text, {"model": b.id}


# API level ---------------------------------------------------------------------

def _prompt_routing(ctx, state, rec, params):
    mid = api.prompt_route(ctx.role("router"), ctx.pool, rec.prompt, warnings=ctx.warnings)
    return ctx.pool.get(mid).generate(rec.prompt, params).text, {"model": mid}


def _fit_trained_router(ctx):
    return {"policy": api.fit_trained_router(ctx.pool, ctx.dev, ctx.embedder(), k=ctx.hyper["k"],
                                             scores=_dev_scores(ctx))}


def _fit_graph_router(ctx):
    return {"policy": api.fit_graph_router(ctx.pool, ctx.dev, ctx.embedder(), scores=_dev_scores(ctx))}


def _routed(ctx, state, rec, params):
    mid = api.route(state["policy"], rec.prompt)
    return ctx.pool.get(mid).generate(rec.prompt, params).text, {"model": mid}


def _cascade(ctx, state, rec, params):
    rule = api.ConfidenceRule(ctx.hyper["statistic"], ctx.hyper["threshold"])
    res = api.cascade(ctx.pool, rec.prompt, rule, params, ctx.warnings)
    return res.output.text, {"model": res.model_id, "index": res.index, "confidences": res.confidences}


def _nudging(ctx, state, rec, params):
    base = ctx.role("base")
    rule = api.ConfidenceRule("top1_next_prob", ctx.hyper["threshold"])
    res = api.nudging_generate(base, list(ctx.others("base")), rec.prompt, rule, ctx.hyper["nudge_cap"], params)
    return res.output.text, _token_artifacts(res)


def _switch(ctx, state, rec, params):
    res = api.switch_generation(ctx.role("selector"), ctx.pool, rec.prompt, ctx.hyper["patch_size"], params,
                                ctx.warnings)
    return res.output.text, _token_artifacts(res)


def _co_llm(ctx, state, rec, params):
    rule = api.ConfidenceRule("top1_next_prob", ctx.hyper["threshold"])
    res = api.co_llm_generate(ctx.role("base"), ctx.role("assistant", 1), rule, rec.prompt, params)
    return res.output.text, _token_artifacts(res)


def _mentor(ctx, state, rec, params):
    res = api.mentor_collab_generate(ctx.role("generator"), ctx.role("mentor", 1), rec.prompt,
                                     ctx.hyper["inspect_prob"], patch_size=ctx.hyper["patch_size"],
                                     seed=params.seed, params=params)
    return res.output.text, _token_artifacts(res)


# text level --------------------------------------------------------------------

def _debate(ctx, state, rec, params):
    tr = text.multiagent_debate(ctx.pool, rec.prompt, ctx.hyper["rounds"], ctx.role("summarizer"), params,
                                ctx.warnings, ctx.max_workers)
    return tr.final_answer, {"transcript": tr.to_json()}


def _feedback(ctx, state, rec, params):
    tr = text.multiagent_feedback(ctx.pool, rec.prompt, ctx.hyper["rounds"], ctx.role("summarizer"), params,
                                  ctx.warnings, ctx.max_workers)
    return tr.final_answer, {"transcript": tr.to_json()}


def _blender(ctx, state, rec, params):
    res = text.llm_blender(ctx.pool, rec.prompt, ctx.role("ranker"), ctx.role("fuser"),
                           min(ctx.hyper["top_k"], len(ctx.pool)), params, ctx.warnings, ctx.max_workers)
    return res.final, {"ranking": res.ranking, "wins": res.wins}


def _knowledge(ctx, state, rec, params):
    res = text.knowledge_card(ctx.pool, rec.prompt, ctx.role("reader"), params, ctx.warnings, ctx.max_workers)
    return res.final, {"paragraphs": res.paragraphs}


def _majority(ctx, state, rec, params):
    raws = [text._gen(b, rec.prompt, params, ctx.warnings) for b in ctx.pool]
    answers = [answer_for(rec, t) for t in raws]
    winner = text.vote_answers(answers)
    return (winner if winner is not None else raws[0]), {"answers": dict(zip(ctx.pool.ids, answers))}


def _fit_swarms(ctx):
    hyper = PSOHyper(n_particles=ctx.hyper["particles"])
    fit = text.hetero_swarms_fit(ctx.pool, ctx.dev, text.graph_dev_utility(ctx.pool, judge=ctx.judge),
                                 iterations=ctx.hyper["iterations"], hyper=hyper, seed=ctx.seed)
    return {"graph": fit.graph, "artifacts": {"graph": fit.graph.to_json(), "utility": fit.utility}}


def _swarms(ctx, state, rec, params):
    final, outputs = text.hetero_swarms_infer(state["graph"], ctx.pool, rec.prompt, params, ctx.warnings)
    return final, {"node_outputs": outputs}


def _fit_finetuning(ctx):
    build = text.multiagent_finetuning_build(ctx.pool, ctx.dev, ctx.hyper["build_rounds"], warnings=ctx.warnings)
    return {"artifacts": {"generation_records": len(build.generation), "critic_records": len(build.critic),
                          "skipped": len(build.skipped)}, "data": build}


def _finetuned_debate(ctx, state, rec, params):
    final, tr = text.debate_vote(ctx.pool, rec.prompt, rec, ctx.hyper["rounds"], params, ctx.warnings,
                                 ctx.max_workers)
    return final, {"transcript": tr.to_json()}


_GRAPHS = {"complete": text.InteractionGraph.complete, "ring": text.InteractionGraph.ring,
           "empty": text.InteractionGraph.empty}


def _structured(ctx, state, rec, params):
    shape = ctx.hyper["graph"]
    if shape not in _GRAPHS:
        raise ConfigError(f"graph must be one of {sorted(_GRAPHS)}")
    tr = text.structured_interaction(ctx.pool, _GRAPHS[shape](ctx.pool.ids), rec.prompt, ctx.hyper["rounds"],
                                     rec, params, ctx.warnings, ctx.max_workers)
    return tr.final_answer, {"transcript": tr.to_json()}


def _bbmas(ctx, state, rec, params):
    res = text.bbmas(ctx.pool, rec.prompt, ctx.hyper["rounds"], params, ctx.warnings)
    return res.final, {"board": [{k: v for k, v in e.items() if k != "seq"} for e in res.board],
                       "votes": res.votes}


def _fit_sparta(ctx):
    res = text.sparta_collect(ctx.pool, ctx.dev, ctx.hyper["rounds"], ctx.hyper["judge_weighting"], ctx.seed,
                              warnings=ctx.warnings)
    ratings = res.state.ratings
    best = max(ctx.pool.ids, key=lambda m: (ratings[m], -ctx.pool.ids.index(m)))
    return {"best": best, "artifacts": {"ratings": ratings, "preferences": len(res.preferences), "best": best}}


def _sparta(ctx, state, rec, params):
    b = ctx.pool.get(state["best"])
    return b.generate(rec.prompt, params).text, {"model": b.id}


def _agglm(ctx, state, rec, params):
    agg = ctx.role("aggregator")
    responses = [text._gen(b, rec.prompt, params, ctx.warnings) for b in ctx.pool]
    return text.agglm_aggregate(agg, rec.prompt, responses, params, ctx.warnings), {"responses": responses}


# logit level -------------------------------------------------------------------

def _fusion(ctx, state, rec, params):
    res = logit.fused_decode(ctx.pool, rec.prompt, params)
    ctx.warnings.extend(res.warnings)
    return res.output.text, {}


def _fit_contrastive(ctx):
    ranking = logit.rank_by_scores(ctx.pool.ids, _mean_scores(_dev_scores(ctx)))
    return {"ranking": ranking, "artifacts": {"ranking": list(ranking)}}


def _contrastive(ctx, state, rec, params):
    cfg = logit.ContrastiveConfig(ctx.hyper["k"], ctx.hyper["alpha"], tuple(state["ranking"]))
    res = logit.contrastive_decode(ctx.pool, cfg, rec.prompt, params)
    ctx.warnings.extend(res.warnings)
    return res.output.text, {}


# weight level ------------------------------------------------------------------

def _dev_evaluator(ctx) -> Callable[[TensorMap], float]:
    template = ctx.pool[0]

    def evaluate(tmap: TensorMap) -> float:
        b = template.with_weights(tmap, "candidate")
        scores = [score_instance(r, b.generate(r.prompt, GenerationParams(temperature=0.0)).text, ctx.judge)
                  for r in ctx.dev]
        return math.fsum(scores) / len(scores)
    return evaluate


def _merged(ctx, tmap: TensorMap, extra: dict) -> dict:
    backend = ctx.pool[0].with_weights(tmap, "merged")
    return {"backend": backend, "files": {"merged.safetensors": tmap},
            "artifacts": {"content_hash": tmap.content_hash(), **extra}}


def _fit_soup(ctx):
    res = weight.greedy_soup(weight.weights_of(ctx.pool), _dev_evaluator(ctx))
    return _merged(ctx, res.model, {"members": [ctx.pool.ids[i] for i in res.members], "dev_score": res.score})


def _fit_dare_ties(ctx):
    maps = weight.weights_of(ctx.pool)
    base = ctx.role("base")
    tuned = [m for b, m in zip(ctx.pool, maps) if b.id != base.id]
    merged = weight.dare_ties(base.weights, tuned, ctx.hyper["p"], ctx.hyper["lam"], ctx.seed)
    return _merged(ctx, merged, {"base": base.id})


def _fit_model_swarms(ctx):
    hyper = PSOHyper(ctx.hyper["inertia"], ctx.hyper["cognitive"], ctx.hyper["social"], len(ctx.pool))
    res = weight.model_swarms_search(weight.weights_of(ctx.pool), _dev_evaluator(ctx), ctx.hyper["iterations"],
                                     hyper, ctx.seed)
    return _merged(ctx, res.model, {"dev_score": res.utility, "history": res.history})


def _fit_lorahub(ctx):
    maps = weight.weights_of(ctx.pool)
    base = ctx.role("base")
    adapters = [weight.WeightDelta.between(m, base.weights, base.id) for b, m in zip(ctx.pool, maps)
                if b.id != base.id]
    res = weight.lorahub_compose(base.weights, adapters, _dev_evaluator(ctx), ctx.hyper["budget"], ctx.seed)
    u = None if math.isnan(res.utility) else res.utility
    return _merged(ctx, res.model, {"weights": [float(w) for w in res.weights], "dev_score": u})


def _fit_expo(ctx):
    maps = weight.weights_of(ctx.pool)
    merged = weight.expo(maps, _dev_evaluator(ctx), ctx.hyper["k"], ctx.hyper["alpha"])
    return _merged(ctx, merged, {"k": ctx.hyper["k"], "alpha": ctx.hyper["alpha"]})


def _merged_infer(ctx, state, rec, params):
    return state["backend"].generate(rec.prompt, params).text, {}


_TEXT_ROUNDS = {"rounds": 2}

METHODS: dict[str, Method] = {m.id: m for m in [
    Method("single_model", "baseline", _single, {"model": None}),
    Method("prompt_routing", "api", _prompt_routing, {"router": None}),
    Method("trained_router", "api", _routed, {"k": 3, "embedder": None}, _fit_trained_router, True),
    Method("graph_router", "api", _routed, {"embedder": None}, _fit_graph_router, True),
    Method("cascade", "api", _cascade, {"statistic": "geomean_token_prob", "threshold": 0.5}),
    Method("nudging", "api", _nudging, {"base": None, "threshold": 0.4, "nudge_cap": 16}, min_pool=2),
    Method("switch_generation", "api", _switch, {"selector": None, "patch_size": 16}),
    Method("co_llm", "api", _co_llm, {"base": None, "assistant": None, "threshold": 0.5}, min_pool=2),
    Method("mentor_collab", "api", _mentor, {"generator": None, "mentor": None, "inspect_prob": 0.2,
                                             "patch_size": 4}, min_pool=2),
    Method("multiagent_debate", "text", _debate, {**_TEXT_ROUNDS, "summarizer": None}),
    Method("multiagent_feedback", "text", _feedback, {**_TEXT_ROUNDS, "summarizer": None}),
    Method("llm_blender", "text", _blender, {"ranker": None, "fuser": None, "top_k": 3}),
    Method("knowledge_card", "text", _knowledge, {"reader": None}),
    Method("majority_vote", "text", _majority),
    Method("hetero_swarms", "text", _swarms, {"iterations": 10, "particles": 8}, _fit_swarms, True),
    Method("multiagent_finetuning", "text", _finetuned_debate, {**_TEXT_ROUNDS, "build_rounds": 1},
           _fit_finetuning, True),
    Method("structured_interaction", "text", _structured, {**_TEXT_ROUNDS, "graph": "complete"}),
    Method("bbmas", "text", _bbmas, dict(_TEXT_ROUNDS)),
    Method("sparta", "text", _sparta, {"rounds": 1, "judge_weighting": True}, _fit_sparta, True, min_pool=3),
    Method("agglm", "text", _agglm, {"aggregator": None}),
    Method("logit_fusion", "logit", _fusion),
    Method("logit_contrastive", "logit", _contrastive, {"k": 1, "alpha": 0.1}, _fit_contrastive, True, 2),
    Method("greedy_soup", "weight", _merged_infer, {}, _fit_soup, True),
    Method("dare_ties", "weight", _merged_infer, {"base": None, "p": 0.0, "lam": 1.0}, _fit_dare_ties,
           True, 2),
    Method("model_swarms", "weight", _merged_infer, {"iterations": 10, "inertia": 0.7, "cognitive": 1.5,
                                                     "social": 1.5}, _fit_model_swarms, True),
    Method("lorahub", "weight", _merged_infer, {"base": None, "budget": 100}, _fit_lorahub, True, 2),
    Method("expo", "weight", _merged_infer, {"k": 1, "alpha": 0.5}, _fit_expo, True, 2),
]}

COLLABORATION_METHODS = tuple(m for m in METHODS if m != "single_model")


def resolve(method_id: str, hyper: Mapping[str, Any] | None) -> tuple[Method, dict[str, Any]]:
    """Look up a method and merge hyperparameters over its defaults."""
    if method_id not in METHODS:
        raise ConfigError(f"unknown method {method_id!r}; known: {', '.join(sorted(METHODS))}")
    method = METHODS[method_id]
    hyper = dict(hyper or {})
    unknown = set(hyper) - set(method.defaults)
    if unknown:
        raise ConfigError(f"method {method_id!r} does not take {sorted(unknown)}; "
                          f"accepted: {sorted(method.defaults) or 'none'}")
    return method, {**method.defaults, **hyper}


def run_method_on(method_id: str, pool: ModelPool, records: Sequence[DatasetRecord], *,
                  hyper: Mapping[str, Any] | None = None, dev: Sequence[DatasetRecord] = (),
                  params: GenerationParams | None = None, seed: int = 0,
                  judge: ModelBackend | None = None) -> list[tuple[str, float]]:
    """Fit and run one method in memory; returns (final text, score) per record."""
    method, hp = resolve(method_id, hyper)
    ctx = Context(pool, hp, list(dev), params or GenerationParams(temperature=0.0), seed, judge)
    state = method.fit(ctx) if method.fit else {}
    out = []
    for rec in records:
        final, _ = method.infer(ctx, state, rec, ctx.params)
        out.append((final, score_instance(rec, final, judge)))
    return out
