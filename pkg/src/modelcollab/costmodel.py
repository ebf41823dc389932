"""Closed-form training/inference FLOPs per collaboration method.

A forward pass costs 2 FLOPs per parameter per token and a backward pass 6.
Symbols: D dataset size, m max token length, k per-model parameter counts
(n = len(k)), r rounds, patch switch patch size, G graph/structure count,
s sample size, f feedback count, k_r / k_s / k_f router, switcher and fuser
sizes. Some formulas are often written with an upper-case M; it is read as m.
"""
from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, fields

from .errors import ArgumentError

NOT_APPLICABLE = "not-applicable"
UNLISTED = "unlisted"


@dataclass(frozen=True)
class CostParams:
    D: float | None = None
    m: float | None = None
    k: tuple[float, ...] | None = None
    r: float | None = None
    patch: float | None = None
    G: float | None = None
    s: float | None = None
    f: float | None = None
    k_r: float | None = None
    k_s: float | None = None
    k_f: float | None = None

    def __post_init__(self):
        if self.k is not None:
            object.__setattr__(self, "k", tuple(float(x) for x in self.k))
            if not self.k:
                raise ArgumentError("k must list at least one model size")
        for fld in fields(self):
            v = getattr(self, fld.name)
            vals = v if isinstance(v, tuple) else (v,)
            if any(x is not None and x < 0 for x in vals):
                raise ArgumentError(f"cost parameter {fld.name} must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> CostParams:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"n"}
        if unknown:
            raise ArgumentError(f"unknown cost parameters: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if k == "k" else v) for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self) if getattr(self, f.name) is not None}


class _Need:
    """Attribute access that names the first missing parameter."""

    def __init__(self, p: CostParams):
        self._p = p

    def __getattr__(self, name):
        if name in ("n", "kmax", "kmin", "kmean", "kseq"):
            k = self._p.k
            if k is None:
                raise ArgumentError("missing cost parameter 'k' (per-model parameter counts)")
            return {"n": len(k), "kmax": max(k), "kmin": min(k), "kmean": sum(k) / len(k), "kseq": k}[name]
        v = getattr(self._p, name)
        if v is None:
            raise ArgumentError(f"missing cost parameter {name!r}")
        return v


Formula = Callable[[_Need], float]


def _cascade(q: _Need) -> float:
    return 2 * q.D * q.m * sum(k / 2 ** i for i, k in enumerate(q.kseq))


# method id -> (table row, training formula or None, inference formula or None)
ROWS: dict[str, tuple[str, Formula | None, Formula | None]] = {
    "cascade": ("Cascade", None, _cascade),
    "graph_router": ("Graph Router", lambda q: 2 * q.n * q.D * q.m * q.kmax, lambda q: 2 * q.D * q.m * q.kmax),
    "prompt_routing": ("Prompt Router", None, lambda q: 2 * q.D * q.m * (q.k_r + q.kmax)),
    "trained_router": ("LLM Router", lambda q: 2 * q.n * q.D * q.m * q.kmax + 6 * q.r * q.D * q.m * q.k_r,
                       lambda q: 2 * q.D * q.m * (q.k_r + q.kmax)),
    "switch_generation": ("Switch Generate", lambda q: 6 * q.r * q.D * q.m * q.k_s,
                          lambda q: 2 * q.D * q.m * (q.k_s / q.patch + q.kmax)),
    "mentor_collab": ("Mentor Collab", lambda q: 2 * q.n * q.D * q.m * q.kmax, lambda q: 2 * q.D * q.m * q.kmean),
    "co_llm": ("Co-llm", lambda q: 2 * q.n * q.D * q.m * q.kmax, lambda q: 2 * q.D * q.m * q.kmean),
    "nudging": ("Nudging", None, lambda q: 2 * q.D * q.m * q.kmax),
    "hetero_swarms": ("Heterogeneous Swarms", lambda q: 2 * q.n * q.D * q.m * q.kmax,
                      lambda q: 2 * q.G * q.r * q.D * q.m * q.kmax),
    "knowledge_card": ("Knowledge Card", lambda q: 2 * q.n * q.D * q.m * q.kmax,
                       lambda q: 2 * q.n * q.D * q.m * q.kmax),
    "llm_blender": ("LLM Blender",
                    lambda q: 2 * q.n * q.D * q.m * q.kmax + 6 * q.r * q.D * q.m * (q.n ** 2 * q.k_r + q.k_f),
                    lambda q: 2 * q.n * q.D * q.m * q.kmax + 2 * q.D * q.m * (q.k_r + q.k_f)),
    "majority_vote": ("Majority Vote", None, lambda q: 2 * q.n * q.D * q.m * q.kmax),
    "multiagent_debate": ("Multiagent Refine", lambda q: 2 * q.n * q.D * q.m * q.kmax,
                          lambda q: 2 * q.n * q.r * q.D * q.m * q.kmax),
    "multiagent_feedback": ("Multiagent Feedback", lambda q: 2 * q.n * q.D * q.m * q.kmax,
                            lambda q: 2 * q.n * q.r * q.f * q.D * q.m * q.kmax),
    "multiagent_finetuning": ("Multiagent Finetuning",
                              lambda q: 2 * q.n * q.D * q.m * q.kmax + 6 * q.n * q.r * q.D * q.m * 2 * q.kmax,
                              lambda q: 2 * q.n * q.r * q.D * q.m * q.kmax),
    "structured_interaction": ("Structure", lambda q: 2 * q.n * q.D * q.m * q.kmax,
                               lambda q: 2 * q.G * q.r * q.D * q.m * q.kmax),
    "agglm": ("Agg-LM", lambda q: 2 * q.n * q.s * q.D * q.m * q.kmax + 6 * q.r * q.D * q.m * q.kmin,
              lambda q: 2 * q.D * q.m * (q.n * q.kmax + q.kmin)),
    "sparta": ("Sparta", lambda q: 2 * q.n * q.D * q.m * q.kmax + 6 * q.n * q.r * q.D * q.m * q.kmax,
               lambda q: 2 * q.n * q.D * q.m * q.kmax),
    "logit_fusion": ("Logit Fusion", None, lambda q: 2 * q.n * q.D * q.m * q.kmax),
    "logit_contrastive": ("Logit Contrastive", lambda q: 2 * q.n * q.D * q.m * q.kmax,
                          lambda q: 2 * q.n * q.D * q.m * q.kmax),
    "dare_ties": ("Dare Ties", None, lambda q: 2 * q.D * q.m * q.kmax),
    "greedy_soup": ("Greedy Soup", lambda q: 2 * (2 * q.n - 1) * q.D * q.m * q.kmax, lambda q: 2 * q.D * q.m * q.kmax),
    "lorahub": ("LoraHub", lambda q: 2 * q.n * q.D * q.m * q.kmax, lambda q: 2 * q.D * q.m * q.kmax),
    "model_swarms": ("Model Swarms", lambda q: 2 * q.n * q.r * q.D * q.m * q.kmax, lambda q: 2 * q.D * q.m * q.kmax),
    "expo": ("Weight ExPO", lambda q: 2 * q.n * q.D * q.m * q.kmax, lambda q: 2 * q.D * q.m * q.kmax),
}

# implemented methods without a row of their own
UNLISTED_METHODS = ("bbmas", "single_model")


@dataclass(frozen=True)
class CostEstimate:
    flops: float
    flag: str | None = None

    def __float__(self):
        return float(self.flops)


def estimate_flops(method: str, phase: str, p: CostParams) -> CostEstimate:
    if phase not in ("train", "infer"):
        raise ArgumentError(f"phase must be 'train' or 'infer', not {phase!r}")
    if method in UNLISTED_METHODS:
        return CostEstimate(0.0, UNLISTED)
    if method not in ROWS:
        raise ArgumentError(f"unknown method {method!r}")
    _, train, infer = ROWS[method]
    formula = train if phase == "train" else infer
    if formula is None:
        return CostEstimate(0.0, NOT_APPLICABLE)
    return CostEstimate(float(formula(_Need(p))))


def cascade_flops_empirical(p: CostParams, deferral_rates: Sequence[float]) -> float:
    """Cascade inference cost with measured per-level deferral rates.

    ``deferral_rates[i]`` is the fraction of queries reaching level i that
    defer onward; a uniform 0.5 recovers the fixed-deferral row.
    """
    q = _Need(p)
    ks = q.kseq
    if len(deferral_rates) < len(ks) - 1:
        raise ArgumentError("need a deferral rate for every level but the last")
    reach, total = 1.0, 0.0
    for i, k in enumerate(ks):
        total += reach * k
        if i < len(ks) - 1:
            if not 0 <= deferral_rates[i] <= 1:
                raise ArgumentError("deferral rates must lie in [0, 1]")
            reach *= deferral_rates[i]
    return 2 * q.D * q.m * total


def cost_table(methods: Iterable[str], p: CostParams) -> list[dict]:
    rows = []
    for method in methods:
        row = {"method": method, "row": ROWS[method][0] if method in ROWS else None}
        for phase in ("train", "infer"):
            try:
                est = estimate_flops(method, phase, p)
                row[phase], row[f"{phase}_flag"] = est.flops, est.flag
            except ArgumentError as exc:
                row[phase], row[f"{phase}_flag"] = None, str(exc)
        rows.append(row)
    return rows


def _cell(value, flag) -> str:
    if value is None:
        return "?"
    if flag:
        return flag
    return f"{value:.4g}"


def format_cost_table(rows: Sequence[dict]) -> str:
    header = ("method", "train FLOPs", "infer FLOPs")
    body = [(r["method"], _cell(r["train"], r["train_flag"]), _cell(r["infer"], r["infer_flag"])) for r in rows]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(3)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
             for line in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    missing = [f"  {r['method']}: {r[ph + '_flag']}" for r in rows for ph in ("train", "infer") if r[ph] is None]
    if missing:
        lines += ["", "unavailable:", *missing]
    return "\n".join(lines)


def cost_table_json(rows: Sequence[dict], p: CostParams) -> str:
    return json.dumps({"params": p.to_dict(), "rows": list(rows)}, indent=2, sort_keys=True)
