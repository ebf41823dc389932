"""Config-driven experiment runs, persisted results and run comparison."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
import zlib
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .core import GenerationParams, ModelPool, _build_backend, load_pool
from .costmodel import CostParams, cost_table
from .errors import ArgumentError, CollabError, ConfigError, FormatError
from .evalkit import (IF_DOMAIN, CorrectnessMatrix, DatasetRecord, collaborative_emergence, domain_macro_average,
                      downsample, leave_one_out, load_dataset, score_instance)
from .methods import METHODS, Context, Method, resolve
from .tensors import tensor_save

LOGGER = logging.getLogger(__name__)

DEGRADED_FRACTION = 0.10
CONFIG_KEYS = {"name", "pool", "method", "dataset", "generation", "seed", "max_concurrency", "output_dir",
               "judge", "cost"}
DATASET_KEYS = {"path", "split", "downsample", "dev_split", "dev_downsample", "name"}
GENERATION_KEYS = {"max_new_tokens", "temperature", "top_p"}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class RunConfig:
    raw: dict[str, Any]
    base_dir: Path

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None, max_concurrency: int | None = None,
             output_dir: str | Path | None = None) -> RunConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from None
        return cls.from_dict(raw, path.parent, seed, max_concurrency, output_dir)

    @classmethod
    def from_dict(cls, raw: Mapping, base_dir: str | Path = ".", seed: int | None = None,
                  max_concurrency: int | None = None, output_dir: str | Path | None = None) -> RunConfig:
        """Validate ``raw``; relative data paths resolve against ``base_dir``, the output directory against the CWD."""
        if not isinstance(raw, Mapping):
            raise ConfigError("config must be a JSON object")
        raw = json.loads(json.dumps(raw))
        if seed is not None:
            raw["seed"] = seed
        if max_concurrency is not None:
            raw["max_concurrency"] = max_concurrency
        if output_dir is not None:
            raw["output_dir"] = str(output_dir)
        cfg = cls(raw, Path(base_dir))
        cfg.validate()
        return cfg

    # accessors
    @property
    def method_id(self) -> str:
        return self.raw["method"]["id"]

    @property
    def hyper(self) -> dict:
        return dict(self.raw["method"].get("params", {}))

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def max_concurrency(self) -> int:
        return int(self.raw.get("max_concurrency", 1))

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def dataset_name(self) -> str:
        d = self.dataset
        return d.get("name") or f"{Path(d['path']).stem}:{d.get('split', 'test')}"

    @property
    def label(self) -> str:
        if self.raw.get("name"):
            return self.raw["name"]
        if self.method_id == "single_model":
            return f"single_model:{self.hyper.get('model') or self.raw['pool_ids'][0]}"
        return self.method_id

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return Path(self.raw.get("output_dir", "runs"))

    @property
    def run_id(self) -> str:
        snap = {k: v for k, v in self.raw.items() if k not in ("output_dir", "max_concurrency", "pool_ids")}
        return hashlib.sha256(_canonical(snap).encode()).hexdigest()[:16]

    def validate(self) -> None:
        raw = self.raw
        unknown = set(raw) - CONFIG_KEYS - {"pool_ids"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("pool", "method", "dataset"):
            if key not in raw:
                raise ConfigError(f"config lacks {key!r}")
        m = raw["method"]
        if not isinstance(m, Mapping) or "id" not in m:
            raise ConfigError("method must be an object with an 'id'")
        if set(m) - {"id", "params"}:
            raise ConfigError(f"unknown method keys: {sorted(set(m) - {'id', 'params'})}")
        resolve(m["id"], m.get("params"))
        d = raw["dataset"]
        if not isinstance(d, Mapping) or "path" not in d:
            raise ConfigError("dataset must be an object with a 'path'")
        if set(d) - DATASET_KEYS:
            raise ConfigError(f"unknown dataset keys: {sorted(set(d) - DATASET_KEYS)}")
        if not self.path(d["path"]).exists():
            raise ConfigError(f"dataset path not found: {self.path(d['path'])}")
        g = raw.get("generation", {})
        if set(g) - GENERATION_KEYS:
            raise ConfigError(f"unknown generation keys: {sorted(set(g) - GENERATION_KEYS)}")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        try:
            CostParams.from_dict(raw.get("cost", {}))
        except ArgumentError as e:
            raise ConfigError(str(e)) from None

    def generation_params(self, record: DatasetRecord, seed: int) -> GenerationParams:
        g = dict(self.raw.get("generation", {}))
        g.setdefault("temperature", 0.0)
        try:
            return GenerationParams.for_task(record.task_kind, seed=seed, **g)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad generation params: {e}") from None


@dataclass
class Prepared:
    config: RunConfig
    method: Method
    hyper: dict
    pool: ModelPool
    records: list[DatasetRecord]
    dev: list[DatasetRecord]
    judge: Any


def prepare(config: RunConfig, pool: ModelPool | None = None) -> Prepared:
    """Build every runtime object; any problem surfaces as a config error before output is written."""
    method, hyper = resolve(config.method_id, config.hyper)
    try:
        pool = pool if pool is not None else load_pool(config.raw["pool"], config.base_dir)
        judge = _build_backend(config.raw["judge"], config.base_dir) if config.raw.get("judge") else None
        d = config.dataset
        seed = config.seed
        records = load_dataset(config.path(d["path"]), d.get("split", "test"))
        if "downsample" in d:
            records = downsample(records, int(d["downsample"]), seed)
        dev = []
        if d.get("dev_split"):
            dev = load_dataset(config.path(d["path"]), d["dev_split"])
            if "dev_downsample" in d:
                dev = downsample(dev, int(d["dev_downsample"]), seed)
    except (FormatError, ArgumentError) as e:
        raise ConfigError(str(e)) from None
    if method.needs_dev and not dev:
        raise ConfigError(f"method {method.id!r} fits on a dev split; set dataset.dev_split")
    if len(pool) < method.min_pool:
        raise ConfigError(f"method {method.id!r} needs at least {method.min_pool} models")
    for key, value in hyper.items():
        if key in ("model", "router", "base", "assistant", "generator", "mentor", "selector", "summarizer",
                   "ranker", "fuser", "reader", "aggregator", "embedder") and value is not None \
                and value not in pool.ids:
            raise ConfigError(f"{key}={value!r} is not a pool model")
    if not records:
        raise ConfigError("dataset split is empty")
    config.raw["pool_ids"] = pool.ids
    return Prepared(config, method, hyper, pool, records, dev, judge)


def instance_seed(seed: int, record_id: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(record_id.encode("utf-8"))) % (2 ** 31)


@dataclass
class RunResult:
    manifest: dict
    run_dir: Path
    exit_code: int


def _read_complete(path: Path) -> list[dict]:
    """Records from a possibly crash-truncated JSONL file; the file is cut back to its last complete line."""
    if not path.exists():
        return []
    data = path.read_bytes()
    keep = data.rfind(b"\n") + 1
    if keep != len(data):
        LOGGER.warning("truncating incomplete trailing record in %s", path)
    out = []
    pos = 0
    for line in data[:keep].splitlines(keepends=True):
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            keep = pos
            break
        pos += len(line)
    with open(path, "r+b") as f:
        f.truncate(keep)
    return out


def _run_instance(prep: Prepared, ctx: Context, state: dict, rec: DatasetRecord) -> dict:
    params = prep.config.generation_params(rec, instance_seed(prep.config.seed, rec.id))
    warnings: list[str] = []
    local = Context(ctx.pool, ctx.hyper, ctx.dev, params, ctx.seed, ctx.judge, warnings, ctx.max_workers)
    out = {"id": rec.id, "prompt": rec.prompt, "task_kind": rec.task_kind, "domain": rec.domain_tag}
    try:
        final, artifacts = prep.method.infer(local, state, rec, params)
        flags: list[str] = []
        score = score_instance(rec, final, prep.judge, flags=flags)
        out.update(final=final, score=score, correct=score == 1.0, artifacts=artifacts)
        warnings.extend(flags)
    except (CollabError, ValueError) as e:
        out.update(final=None, score=0.0, correct=False, error=f"{type(e).__name__}: {e}")
    if warnings:
        out["warnings"] = warnings
    return out


def run_experiment(config: RunConfig, *, resume: bool = False, pool: ModelPool | None = None) -> RunResult:
    """Execute one configured run and persist manifest, records and summary."""
    prep = prepare(config, pool)
    run_dir = config.output_dir / config.run_id
    records_path = run_dir / "records.jsonl"
    started = datetime.now(timezone.utc).isoformat()
    if run_dir.exists() and not resume:
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    done = _read_complete(records_path) if resume else []
    done_ids = [r["id"] for r in done]
    expected = [r.id for r in prep.records]
    if done_ids != expected[:len(done_ids)]:
        raise ConfigError(f"{records_path} does not match this config; rerun without --resume")

    ctx = Context(prep.pool, prep.hyper, prep.dev, GenerationParams(temperature=0.0), config.seed, prep.judge,
                  [], 1)
    state = prep.method.fit(ctx) if prep.method.fit else {}
    for name, tmap in state.get("files", {}).items():
        tensor_save(tmap, run_dir / name)

    todo = prep.records[len(done):]
    results = list(done)
    with open(records_path, "a", encoding="utf-8") as sink, \
            ThreadPoolExecutor(max_workers=config.max_concurrency) as ex:
        futures = [ex.submit(_run_instance, prep, ctx, state, rec) for rec in todo]
        for fut in futures:  # single appender, dataset order
            rec_out = fut.result()
            sink.write(_canonical(rec_out) + "\n")
            sink.flush()
            results.append(rec_out)

    n_failed = sum(1 for r in results if "error" in r)
    degraded = n_failed > DEGRADED_FRACTION * len(results)
    scores = [r["score"] for r in results]
    summary = {
        "label": config.label, "method": config.method_id, "dataset": config.dataset_name,
        "domain": prep.records[0].domain_tag, "n_instances": len(results), "n_failed": n_failed,
        "score": math.fsum(scores) / len(scores), "degraded": degraded,
        "correct_ids": [r["id"] for r in results if r.get("correct")],
    }
    summary["report"] = None if summary["domain"] == IF_DOMAIN else domain_macro_average(
        {summary["dataset"]: summary["score"]}, {summary["dataset"]: summary["domain"]}).to_json()
    manifest = {
        "run_id": config.run_id, "engine_version": __version__, "config": config.raw,
        "base_dir": str(config.base_dir.resolve()), "started": started,
        "finished": datetime.now(timezone.utc).isoformat(), "records": len(results),
        "instance_ids": expected, "status": "degraded" if degraded else "ok", "summary": summary,
        "fit": state.get("artifacts", {}), "warnings": ctx.warnings,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(manifest, run_dir, 3 if degraded else 0)


def load_manifest(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise ArgumentError(f"cannot read manifest {p}: {e}") from None


def _is_baseline(m: Mapping) -> bool:
    return m["config"]["method"]["id"] == "single_model"


@dataclass
class Comparison:
    datasets: list[str]
    domains: dict[str, str]
    rows: list[dict] = field(default_factory=list)
    baseline: dict | None = None

    def to_json(self) -> dict:
        return {"datasets": self.datasets, "domains": self.domains, "rows": self.rows, "baseline": self.baseline}

    def to_text(self) -> str:
        doms = sorted(set(self.domains.values()))
        header = ["run", *doms, "avg"]
        lines = []
        for row in self.rows:
            cells = [row["label"]]
            for key in [*doms, "avg"]:
                v = row["domain_scores"].get(key) if key != "avg" else row["average"]
                mark = "*" if row["improved"].get(key) else " "
                cells.append(f"{v:.3f}{mark}")
            lines.append(cells)
        widths = [max(len(str(x[i])) for x in [header, *lines]) for i in range(len(header))]
        fmt = lambda cells: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)  # noqa: E731
                                      for i, (c, w) in enumerate(zip(cells, widths)))
        out = [fmt(header), "  ".join("-" * w for w in widths), *map(fmt, lines)]
        return "\n".join(out + ["", "* = strictly above the best single-model baseline"])


def compare_runs(manifests: Sequence[Mapping]) -> Comparison:
    """Per-domain table of every run, flagging strict improvement over the best single-model run.

    Runs are grouped by label; every label must cover the same datasets.
    Instruction-following datasets are min-max scaled over exactly the
    compared runs. The baseline is the single-model label with the best
    macro average.
    """
    if not manifests:
        raise ArgumentError("nothing to compare")
    by_label: dict[str, dict[str, float]] = {}
    domains: dict[str, str] = {}
    baseline_labels = set()
    for m in manifests:
        s = m["summary"]
        by_label.setdefault(s["label"], {})
        if s["dataset"] in by_label[s["label"]]:
            raise ArgumentError(f"two runs of {s['label']!r} on {s['dataset']!r}")
        by_label[s["label"]][s["dataset"]] = s["score"]
        if domains.setdefault(s["dataset"], s["domain"]) != s["domain"]:
            raise ArgumentError(f"dataset {s['dataset']!r} reported with two domains")
        if _is_baseline(m):
            baseline_labels.add(s["label"])
    datasets = sorted(domains)
    for label, scores in by_label.items():
        if sorted(scores) != datasets:
            raise ArgumentError(f"run {label!r} covers {sorted(scores)}, expected {datasets}")
    if_range = {d: (min(s[d] for s in by_label.values()), max(s[d] for s in by_label.values()))
                for d in datasets if domains[d] == IF_DOMAIN}
    reports = {label: domain_macro_average(scores, domains, if_range or None) for label, scores in by_label.items()}
    comp = Comparison(datasets, domains)
    base = None
    if baseline_labels:
        best = max(sorted(baseline_labels), key=lambda lb: reports[lb].average)
        r = reports[best]
        base = {"label": best, "domain_scores": r.domain_scores, "average": r.average}
        comp.baseline = base
    for label in by_label:
        r = reports[label]
        improved = {}
        if base is not None and label not in baseline_labels:
            improved = {d: r.domain_scores[d] > base["domain_scores"][d] for d in r.domain_scores}
            improved["avg"] = r.average > base["average"]
        comp.rows.append({"label": label, "dataset_scores": r.dataset_scores, "domain_scores": r.domain_scores,
                          "average": r.average, "normalization": r.normalization, "improved": improved,
                          "baseline": label in baseline_labels})
    return comp


def emergence_from_manifests(manifests: Sequence[Mapping]) -> dict[str, float | None]:
    """Collaborative emergence of every non-baseline run against the single-model runs."""
    baselines = [m for m in manifests if _is_baseline(m)]
    systems = [m for m in manifests if not _is_baseline(m)]
    if not baselines or not systems:
        raise ArgumentError("emergence needs single-model runs and at least one collaborative run")
    ids = baselines[0]["instance_ids"]
    for m in manifests:
        if m["instance_ids"] != ids:
            raise ArgumentError("runs cover different instances")
    out = {}
    for sysm in systems:
        matrix = CorrectnessMatrix(ids)
        for b in baselines:
            matrix.add_row(b["summary"]["label"], {i: i in set(b["summary"]["correct_ids"]) for i in ids})
        matrix.add_row("system", {i: i in set(sysm["summary"]["correct_ids"]) for i in ids})
        out[sysm["summary"]["label"]] = collaborative_emergence(matrix)
    return out


def baseline_configs(config: RunConfig) -> list[RunConfig]:
    """One single-model run config per pool member, sharing dataset and seeds."""
    ids = prepare(config).pool.ids
    out = []
    for mid in ids:
        raw = {k: v for k, v in config.raw.items() if k not in ("pool_ids", "name", "cost")}
        raw["method"] = {"id": "single_model", "params": {"model": mid}}
        out.append(RunConfig.from_dict(raw, config.base_dir))
    return out


def run_emergence(config: RunConfig) -> dict:
    """Run every pool member alone plus the configured method, then measure emergence."""
    results = [run_experiment(c) for c in baseline_configs(config)] + [run_experiment(config)]
    manifests = [r.manifest for r in results]
    return {"emergence": emergence_from_manifests(manifests), "runs": [str(r.run_dir) for r in results]}


def run_leave_one_out(config: RunConfig) -> dict:
    """Score the configured method once per omitted pool member (in memory, nothing persisted)."""
    prep = prepare(config)

    def runner(sub_pool: ModelPool, records) -> float:
        method, hyper = prep.method, dict(prep.hyper)
        if len(sub_pool) < method.min_pool:
            raise ArgumentError("pool too small without this model")
        for key, value in list(hyper.items()):
            if isinstance(value, str) and value in prep.pool.ids and value not in sub_pool.ids:
                hyper[key] = None
        ctx = Context(sub_pool, hyper, prep.dev, GenerationParams(temperature=0.0), config.seed, prep.judge)
        state = method.fit(ctx) if method.fit else {}
        scores = []
        for rec in records:
            out = _run_instance(Prepared(config, method, hyper, sub_pool, prep.records, prep.dev, prep.judge),
                                ctx, state, rec)
            scores.append(out["score"])
        return math.fsum(scores) / len(scores)

    report = leave_one_out(runner, prep.pool, prep.records)
    return {"label": config.label, "dataset": config.dataset_name, **report.to_json()}


def cost_params_for(config: RunConfig) -> CostParams:
    """Cost parameters from the config: D from the dataset, m from the token budget, k from param counts."""
    prep = prepare(config)
    values: dict[str, Any] = {"D": len(prep.records)}
    g = config.raw.get("generation", {})
    values["m"] = g.get("max_new_tokens", max(GenerationParams.for_task(r.task_kind).max_new_tokens
                                               for r in prep.records))
    counts = [b.descriptor.param_count for b in prep.pool]
    if all(c > 0 for c in counts):
        values["k"] = counts
    h = prep.hyper
    if "rounds" in h:
        values["r"] = h["rounds"]
    if "iterations" in h:
        values["r"] = h["iterations"]
    if "patch_size" in h:
        values["patch"] = h["patch_size"]
    values.update(config.raw.get("cost", {}))
    return CostParams.from_dict(values)


def estimate_cost(config: RunConfig, methods: Sequence[str] | None = None) -> tuple[list[dict], CostParams]:
    p = cost_params_for(config)
    return cost_table(methods or list(METHODS), p), p


def list_example_configs(root: str | Path | None = None) -> list[Path]:
    root = Path(root) if root else Path(__file__).parent / "data" / "configs"
    return sorted(root.glob("*.json"))


__all__ = ["RunConfig", "RunResult", "run_experiment", "compare_runs", "Comparison", "emergence_from_manifests",
           "run_emergence", "run_leave_one_out", "estimate_cost", "load_manifest", "prepare"]
