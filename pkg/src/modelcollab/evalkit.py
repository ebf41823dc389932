"""Datasets, scoring and the pool-level analyses.

Covers record loading and downsampling, answer extraction, per-instance
scoring, per-domain macro averages (with min-max scaling for instruction
following), collaborative emergence, leave-one-out sensitivity, a x b
diversity pools and the two model-selection strategies.
"""
from __future__ import annotations

import itertools
import json
import math
import re
import subprocess
import sys
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any

import numpy as np

from . import prompts
from .core import AliasBackend, GenerationParams, ModelBackend, ModelDescriptor, ModelPool, find_ids
from .errors import ArgumentError, FormatError

TASK_KINDS = ("multiple_choice", "exact_match", "open_ended", "code")
OBJECTIVE_KINDS = ("multiple_choice", "exact_match", "code")
NO_ANSWER = "<no-answer>"
IF_DOMAIN = "IF"


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    prompt: str
    task_kind: str
    domain_tag: str
    gold: tuple[str, ...] | None = None
    task: str | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise FormatError(f"record {self.id!r}: unknown task_kind {self.task_kind!r}")
        objective = self.task_kind in OBJECTIVE_KINDS
        if objective and not self.gold:
            raise FormatError(f"record {self.id!r}: objective task without gold")
        if not objective and self.gold:
            raise FormatError(f"record {self.id!r}: open-ended task must not carry gold")

    @property
    def task_tag(self) -> str:
        return self.task or self.domain_tag

    def to_dict(self) -> dict:
        d = {"id": self.id, "prompt": self.prompt, "task_kind": self.task_kind, "domain_tag": self.domain_tag}
        if self.gold is not None:
            d["gold"] = list(self.gold)
        if self.task is not None:
            d["task"] = self.task
        return d


_REQUIRED = ("id", "prompt", "task_kind", "domain_tag")


def load_dataset(path: str | Path, split: str | None = None) -> list[DatasetRecord]:
    """Read JSONL records; ``path`` may be a file or a directory holding ``<split>.jsonl``."""
    path = Path(path)
    if path.is_dir():
        if split is None:
            raise ArgumentError("a split is required when loading from a directory")
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise FormatError(f"dataset not found: {path}")
    records, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            missing = [k for k in _REQUIRED if k not in obj]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing field(s) {missing}")
            gold = obj.get("gold")
            if isinstance(gold, str):
                gold = [gold]
            try:
                rec = DatasetRecord(id=str(obj["id"]), prompt=obj["prompt"], task_kind=obj["task_kind"],
                                    domain_tag=obj["domain_tag"],
                                    gold=tuple(str(g) for g in gold) if gold else None,
                                    task=obj.get("task"))
            except FormatError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if rec.id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def downsample(records: Sequence, cap: int = 1000, seed: int = 0) -> list:
    """Seeded uniform subsample without replacement, keeping original order."""
    if cap <= 0:
        raise ArgumentError("cap must be positive")
    if len(records) <= cap:
        return list(records)
    idx = np.sort(np.random.default_rng(seed).choice(len(records), size=cap, replace=False))
    return [records[i] for i in idx]


_NUM_RE = re.compile(r"-?(?:\d[\d,]*(?:\.\d+)?|\.\d+)")
_LETTER_RE = re.compile(r"(?<![A-Za-z])([A-E])(?![A-Za-z])")


def normalize_number(s: str) -> str | None:
    try:
        d = Decimal(s.replace(",", ""))
    except InvalidOperation:
        return None
    if d == 0:
        return "0"
    out = format(d.normalize(), "f")
    if "." in out:
        out = out.rstrip("0").rstrip(".")
    return out


def _is_numeric(s: str) -> bool:
    return bool(re.fullmatch(r"\s*-?[\d,]*\.?\d+\s*", s))


def _extract_code(raw: str) -> str:
    fences = re.findall(r"```(?:[A-Za-z0-9_+-]*)\n(.*?)```", raw, flags=re.S)
    return fences[-1] if fences else raw


def extract_answer(raw: str, task_kind: str, numeric: bool | None = None) -> str:
    """Normalize a raw model output to a comparable answer.

    multiple_choice: last standalone option letter A-E. exact_match: the last
    number (commas and trailing zeros stripped) when ``numeric``, otherwise
    the final non-empty line case-folded; ``numeric=None`` picks numeric iff
    the text contains a number. Returns :data:`NO_ANSWER` when nothing is
    extractable.
    """
    if raw is None:
        return NO_ANSWER
    if task_kind == "multiple_choice":
        letters = _LETTER_RE.findall(raw)
        return letters[-1] if letters else NO_ANSWER
    if task_kind == "exact_match":
        nums = _NUM_RE.findall(raw)
        if numeric is None:
            numeric = bool(nums)
        if numeric:
            for n in reversed(nums):
                norm = normalize_number(n)
                if norm is not None:
                    return norm
            return NO_ANSWER
        lines = [ln.strip() for ln in raw.strip().splitlines() if ln.strip()]
        return lines[-1].casefold() if lines else NO_ANSWER
    if task_kind == "code":
        code = _extract_code(raw).strip()
        return code or NO_ANSWER
    if task_kind == "open_ended":
        return raw.strip() or NO_ANSWER
    raise ArgumentError(f"unknown task_kind {task_kind!r}")


def normalize_gold(record: DatasetRecord) -> set[str]:
    if record.task_kind == "multiple_choice":
        return {g.strip().upper() for g in record.gold}
    if record.task_kind == "exact_match":
        numeric = all(_is_numeric(g) for g in record.gold)
        if numeric:
            return {normalize_number(g) for g in record.gold}
        return {g.strip().casefold() for g in record.gold}
    return set(record.gold or ())


def answer_for(record: DatasetRecord, raw: str) -> str:
    """Extracted answer for ``raw`` under the record's task kind and gold type."""
    numeric = None
    if record.task_kind == "exact_match" and record.gold:
        numeric = all(_is_numeric(g) for g in record.gold)
    return extract_answer(raw, record.task_kind, numeric)


def _run_code_tests(code: str, tests: Iterable[str], timeout: float) -> bool:
    program = code + "\n\n" + "\n".join(tests) + "\n"
    try:
        proc = subprocess.run([sys.executable, "-I", "-c", program], capture_output=True, timeout=timeout)
    except subprocess.TimeoutExpired:
        return False
    return proc.returncode == 0


def parse_judge_score(text: str) -> float | None:
    m = re.search(r"(?<![\d.])(10|[1-9])(?:\.\d+)?(?![\d])", text or "")
    if not m:
        return None
    s = float(m.group(0))
    return s if 1 <= s <= 10 else None


def score_instance(record: DatasetRecord, output: str, judge: ModelBackend | None = None, *,
                   flags: list | None = None, code_timeout: float = 10.0) -> float:
    """Score one output in [0, 1].

    Objective kinds score 1 iff the extracted answer is in the gold set (code
    runs the gold tests against the extracted program). Open-ended outputs
    are rated 1-10 by ``judge`` and mapped by (s - 1) / 9.
    """
    if record.task_kind == "open_ended":
        if judge is None:
            raise ArgumentError(f"record {record.id!r}: open-ended scoring needs a judge backend")
        reply = judge.generate(prompts.render("judge_score", query=record.prompt, response=output),
                               GenerationParams(max_new_tokens=16, temperature=0.0)).text
        s = parse_judge_score(reply)
        if s is None:
            if flags is not None:
                flags.append(f"{record.id}: unparseable judge output")
            return 0.0
        return (s - 1.0) / 9.0
    ans = answer_for(record, output)
    if ans == NO_ANSWER:
        return 0.0
    if record.task_kind == "code":
        return 1.0 if _run_code_tests(ans, record.gold, code_timeout) else 0.0
    return 1.0 if ans in normalize_gold(record) else 0.0


@dataclass
class CorrectnessMatrix:
    """Boolean (model, instance) correctness; an optional ``system`` row holds a collaborative run."""

    instance_ids: list[str]
    rows: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.instance_ids)) != len(self.instance_ids):
            raise ArgumentError("duplicate instance ids")
        fixed = {}
        for name, row in self.rows.items():
            arr = np.asarray(row, dtype=bool)
            if arr.shape != (len(self.instance_ids),):
                raise ArgumentError(f"row {name!r} has shape {arr.shape}, expected ({len(self.instance_ids)},)")
            fixed[name] = arr
        self.rows = fixed

    def add_row(self, name: str, correct: Mapping[str, Any] | Sequence[bool]) -> None:
        if isinstance(correct, Mapping):
            missing = set(self.instance_ids) - set(correct)
            if missing:
                raise ArgumentError(f"row {name!r} lacks instances {sorted(missing)[:5]}")
            row = np.array([bool(correct[i]) for i in self.instance_ids])
        else:
            row = np.asarray(correct, dtype=bool)
            if row.shape != (len(self.instance_ids),):
                raise ArgumentError(f"row {name!r} has wrong length")
        self.rows[name] = row

    def to_json(self) -> dict:
        return {"instances": list(self.instance_ids),
                "rows": {k: [i for i, c in zip(self.instance_ids, v) if c] for k, v in self.rows.items()}}

    @classmethod
    def from_json(cls, data: Mapping) -> CorrectnessMatrix:
        ids = list(data["instances"])
        known = set(ids)
        rows = {}
        for name, correct_ids in data["rows"].items():
            unknown = set(correct_ids) - known
            if unknown:
                raise ArgumentError(f"row {name!r} references unknown instances {sorted(unknown)[:5]}")
            cs = set(correct_ids)
            rows[name] = np.array([i in cs for i in ids], dtype=bool)
        return cls(ids, rows)


def collaborative_emergence(matrix: CorrectnessMatrix, system: str = "system") -> float | None:
    """Share of individually-unsolvable instances the system solves; ``None`` when there are none."""
    if system not in matrix.rows:
        raise ArgumentError(f"matrix has no {system!r} row")
    individuals = [v for k, v in matrix.rows.items() if k != system]
    if not individuals:
        raise ArgumentError("matrix has no individual model rows")
    unsolved = ~np.logical_or.reduce(individuals)
    n = int(unsolved.sum())
    if n == 0:
        return None
    return int((matrix.rows[system] & unsolved).sum()) / n


@dataclass
class ScoreReport:
    dataset_scores: dict[str, float]
    dataset_domains: dict[str, str]
    domain_scores: dict[str, float]
    average: float
    normalization: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"dataset_scores": self.dataset_scores, "dataset_domains": self.dataset_domains,
                "domain_scores": self.domain_scores, "average": self.average,
                "normalization": self.normalization}

    @classmethod
    def from_json(cls, data: Mapping) -> ScoreReport:
        return cls(dict(data["dataset_scores"]), dict(data["dataset_domains"]), dict(data["domain_scores"]),
                   data["average"], dict(data.get("normalization", {})))


def minmax(score: float, lo: float, hi: float) -> float:
    if hi == lo:
        return 0.5
    return (score - lo) / (hi - lo)


def domain_macro_average(dataset_scores: Mapping[str, float], dataset_domains: Mapping[str, str],
                         if_range: tuple[float, float] | Mapping[str, tuple[float, float]] | None = None
                         ) -> ScoreReport:
    """Per-domain means and their macro average.

    Instruction-following datasets are min-max scaled with ``if_range`` (the
    min and max over the systems being compared) before averaging; a
    degenerate range maps to 0.5.
    """
    by_domain: dict[str, list[float]] = {}
    norm: dict[str, dict[str, float]] = {}
    for name in sorted(dataset_scores):
        s = float(dataset_scores[name])
        dom = dataset_domains[name]
        if dom == IF_DOMAIN:
            if if_range is None:
                raise ArgumentError(f"IF dataset {name!r} needs the min/max over compared systems")
            lo, hi = if_range[name] if isinstance(if_range, Mapping) else if_range
            norm[name] = {"raw": s, "min": float(lo), "max": float(hi)}
            s = minmax(s, lo, hi)
        by_domain.setdefault(dom, []).append(s)
    domain_scores = {d: math.fsum(v) / len(v) for d, v in sorted(by_domain.items())}
    avg = math.fsum(domain_scores.values()) / len(domain_scores) if domain_scores else float("nan")
    return ScoreReport(dict(dataset_scores), dict(dataset_domains), domain_scores, avg, norm)


@dataclass
class LeaveOneOutReport:
    omitted: list[str]
    scores: list[float | None]
    mean: float
    std: float
    std_population: float
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"omitted": self.omitted, "scores": self.scores, "mean": self.mean, "std": self.std,
                "std_population": self.std_population, "flags": self.flags}


def summarize_scores(scores: Sequence[float]) -> tuple[float, float, float]:
    """Mean, sample std (n-1) and population std."""
    a = np.asarray(scores, dtype=np.float64)
    if a.size == 0:
        return float("nan"), float("nan"), float("nan")
    mean = float(a.mean())
    sample = float(a.std(ddof=1)) if a.size > 1 else 0.0
    return mean, sample, float(a.std(ddof=0))


def leave_one_out(method_runner: Callable[[ModelPool, Any], float], pool: ModelPool, dataset: Any
                  ) -> LeaveOneOutReport:
    """Run ``method_runner`` once per omitted model and summarize the spread."""
    if len(pool) < 2:
        raise ArgumentError("leave-one-out needs at least two models")
    scores: list[float | None] = []
    flags = []
    for m in pool.ids:
        try:
            scores.append(float(method_runner(pool.without(m), dataset)))
        except Exception as exc:  # noqa: BLE001 - sub-run failures are recorded, not fatal
            scores.append(None)
            flags.append(f"run without {m} failed: {exc}")
    mean, std, pstd = summarize_scores([s for s in scores if s is not None])
    return LeaveOneOutReport(pool.ids, scores, mean, std, pstd, flags)


def mean_std(reports: Iterable[LeaveOneOutReport]) -> float:
    """Average of per-dataset standard deviations."""
    stds = [r.std for r in reports]
    return math.fsum(stds) / len(stds)


def build_diversity_pool(unique_models: Sequence[ModelBackend], a: int, b: int) -> ModelPool:
    """First ``a`` models, each replicated ``b`` times under ``<id>#<k>`` ids."""
    if a * b <= 0:
        raise ArgumentError("a and b must both be positive")
    if a > len(unique_models):
        raise ArgumentError(f"a={a} exceeds the {len(unique_models)} unique models")
    out = []
    for m in unique_models[:a]:
        if b == 1:
            out.append(m)
            continue
        for k in range(1, b + 1):
            d = m.descriptor
            desc = ModelDescriptor(f"{d.id}#{k}", d.display_name, d.description, d.vocab_group,
                                   d.architecture_tag, d.param_count)
            out.append(AliasBackend(m, desc))
    return ModelPool(out)


def _describe(candidates: Sequence[ModelDescriptor]) -> str:
    return "\n".join(f"- {c.id}: {c.description}" for c in candidates)


def select_models_prompt(selector: ModelBackend, candidates: Sequence[ModelDescriptor], m: int,
                         task: str = "", params: GenerationParams | None = None) -> list[str]:
    """Ask ``selector`` for ``m`` models; missing picks are filled in candidate order."""
    if m > len(candidates):
        raise ArgumentError("m exceeds the number of candidates")
    ids = [c.id for c in candidates]
    prompt = prompts.render("select_models", task=task, models=_describe(candidates), m=m)
    out = selector.generate(prompt, params or GenerationParams(temperature=0.0)).text
    picked = find_ids(out, ids)[:m]
    for cid in ids:
        if len(picked) >= m:
            break
        if cid not in picked:
            picked.append(cid)
    return picked


def _distance_matrix(vectors: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        diff = vectors[:, None, :] - vectors[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))
    if metric == "cosine":
        norms = np.linalg.norm(vectors, axis=1)
        d = np.ones((len(vectors), len(vectors)))
        nz = norms > 0
        unit = vectors[nz] / norms[nz, None]
        sub = 1.0 - unit @ unit.T
        d[np.ix_(nz, nz)] = sub
        np.fill_diagonal(d, 0.0)
        return np.clip(d, 0.0, 2.0)
    raise ArgumentError(f"unknown metric {metric!r}")


def select_models_similarity(embedder: ModelBackend | Callable[[str], Any], candidates: Sequence[ModelDescriptor],
                             m: int, metric: str = "cosine", max_subsets: int = 100_000,
                             flags: list | None = None) -> list[str]:
    """Pick the ``m`` candidates whose description embeddings are most spread out.

    Exhaustive over all subsets (ties to the lexicographically smallest id
    tuple) while the subset count stays under ``max_subsets``; beyond that a
    greedy farthest-point pass is used and a flag recorded.
    """
    if m > len(candidates):
        raise ArgumentError("m exceeds the number of candidates")
    embed = embedder.embed_text if isinstance(embedder, ModelBackend) else embedder
    ordered = sorted(candidates, key=lambda c: c.id)
    vecs = np.stack([np.asarray(embed(c.description), dtype=np.float64).reshape(-1) for c in ordered])
    dist = _distance_matrix(vecs, metric)
    n = len(ordered)
    if math.comb(n, m) <= max_subsets:
        best, best_val = None, -math.inf
        for combo in itertools.combinations(range(n), m):
            val = math.fsum(dist[i, j] for i, j in itertools.combinations(combo, 2))
            if val > best_val:
                best, best_val = combo, val
    else:
        if flags is not None:
            flags.append(f"C({n},{m}) exceeds {max_subsets}; greedy farthest-point selection used")
        i, j = np.unravel_index(np.argmax(dist), dist.shape)
        chosen = [int(min(i, j)), int(max(i, j))][:m]
        while len(chosen) < m:
            rest = [k for k in range(n) if k not in chosen]
            chosen.append(max(rest, key=lambda k: (dist[k, chosen].sum(), -k)))
        best = tuple(sorted(chosen))
    picked = {ordered[i].id for i in best}
    return [c.id for c in candidates if c.id in picked]


def evaluate_pool(pool: Sequence[ModelBackend], records: Sequence[DatasetRecord],
                  params: GenerationParams | None = None, judge: ModelBackend | None = None
                  ) -> dict[str, dict[str, float]]:
    """Score every model on every record: ``{model_id: {record_id: score}}``."""
    out: dict[str, dict[str, float]] = {}
    for m in pool:
        row = {}
        for rec in records:
            p = params or GenerationParams.for_task(rec.task_kind, temperature=0.0)
            row[rec.id] = score_instance(rec, m.generate(rec.prompt, p).text, judge)
        out[m.id] = row
    return out
