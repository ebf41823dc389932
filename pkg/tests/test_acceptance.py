"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""
import itertools
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
from safetensors.numpy import load_file, save_file

from conftest import CONFIGS, GREEDY, mc, mock, pool, token_mock
from modelcollab import api, text
from modelcollab.api import ConfidenceRule
from modelcollab.core import (GenerationParams, MockBackend, ModelDescriptor, ModelPool, TokenDistribution,
                              sample_decode)
from modelcollab.costmodel import NOT_APPLICABLE, estimate_flops
from modelcollab.evalkit import (CorrectnessMatrix, collaborative_emergence, leave_one_out,
                                 select_models_similarity)
from modelcollab.logit import ContrastiveConfig, contrast_distributions, fused_decode
from modelcollab.pso import pso_maximize
from modelcollab.runner import RunConfig, list_example_configs, load_manifest, run_emergence, run_experiment
from modelcollab.tensors import TensorMap, tensor_load, tensor_save
from modelcollab.text import InteractionGraph, majority_vote
from modelcollab.weight import dare_prune, dare_ties, expo, ties_merge, uniform_average
from test_costmodel import SYMBOLIC, random_point


@contextmanager
def criterion(capsys, number, name, bound_s):
    start = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        within = elapsed < bound_s
        status = "PASS" if ok and within else "FAIL"
        with capsys.disabled():
            print(f"\n[acceptance] criterion {number} {name}: {status} ({elapsed:.2f}s, bound {bound_s:g}s)")
    assert within, f"criterion {number} took {elapsed:.2f}s, bound {bound_s}s"


# 1. formula fidelity

def contrast_reference(probs, k, alpha):
    n, v = len(probs), len(probs[0])
    raw = []
    for j in range(v):
        top = sum(probs[i][j] for i in range(k))
        bottom = sum(probs[i][j] for i in range(n - k, n))
        raw.append(probs[0][j] + alpha * (top - bottom))
    clamped = [max(0.0, x) for x in raw]
    total = sum(clamped)
    return [x / total for x in clamped]


def expo_reference(values, scores, k, alpha):
    order = sorted(range(len(values)), key=lambda i: -scores[i])
    top = [sum(values[i][e] for i in order[:k]) / k for e in range(len(values[0]))]
    bottom = [sum(values[i][e] for i in order[-k:]) / k for e in range(len(values[0]))]
    return [t + alpha * (t - b) for t, b in zip(top, bottom)]


def test_criterion_1_formula_fidelity(capsys):
    with criterion(capsys, 1, "formula fidelity", 1.0):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n, v = int(rng.integers(2, 6)), int(rng.integers(2, 7))
            k = int(rng.integers(1, n // 2 + 1))
            alpha = float(rng.uniform(0, 3))
            probs = rng.dirichlet(np.ones(v), size=n)
            dists = [TokenDistribution("g", p) for p in probs]
            got = contrast_distributions(dists, ContrastiveConfig(k, alpha)).probs
            ref = contrast_reference(probs.tolist(), k, alpha)
            assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-12
            assert contrast_distributions(dists, ContrastiveConfig(k, 0.0)) is dists[0]

        def scalar(x):
            return TensorMap.scalar(x)
        assert float(expo([scalar(2.0), scalar(1.0)], [0.9, 0.1], k=1, alpha=1.0).value("w")[0]) == 3.0
        for _ in range(200):
            n = int(rng.integers(2, 7))
            k = int(rng.integers(1, n // 2 + 1))
            alpha = float(rng.uniform(0, 2))
            shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            maps = [TensorMap({"w": rng.normal(size=shape)}) for _ in range(n)]
            scores = rng.permutation(n).astype(float).tolist()
            got = expo(maps, scores, k, alpha).value("w").reshape(-1)
            ref = expo_reference([m.value("w").reshape(-1).tolist() for m in maps], scores, k, alpha)
            assert np.max(np.abs(got - np.array(ref))) <= 1e-12
            order = sorted(range(n), key=lambda i: -scores[i])
            assert expo(maps, scores, k, 0.0).bitwise_equal(uniform_average([maps[i] for i in order[:k]]))
            assert np.array_equal(expo(maps, scores, 1, 0.0).value("w"), maps[order[0]].value("w"))


# 2. oracle equivalence

def count_oracle(answers):
    counts = {}
    for a in answers:
        counts[a] = counts.get(a, 0) + 1
    best = max(counts.values())
    for a in answers:
        if counts[a] == best:
            return a


def ties_oracle(values, lam):
    total = sum(values)
    sign = 1 if total >= 0 else -1
    agree = [v for v in values if v != 0 and (1 if v > 0 else -1) == sign]
    return lam * sum(agree) / len(agree) if agree else 0.0


def ties_maps_oracle(maps, lam):
    flat = [m.value("w").reshape(-1).tolist() for m in maps]
    return [ties_oracle([f[e] for f in flat], lam) for e in range(len(flat[0]))]


def emergence_oracle(rows, system):
    unsolved = [i for i in range(len(system)) if not any(r[i] for r in rows)]
    if not unsolved:
        return None
    return sum(1 for i in unsolved if system[i]) / len(unsolved)


def cosine_distance(a, b):
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 1.0
    return min(2.0, max(0.0, 1.0 - sum(x * y for x, y in zip(a, b)) / (na * nb)))


def selection_oracle(vectors, m):
    ids = sorted(vectors)
    scored = [(sum(cosine_distance(vectors[a], vectors[b]) for a, b in itertools.combinations(c, 2)), c)
              for c in itertools.combinations(ids, m)]
    return max(s for s, _ in scored), scored


def test_criterion_2_oracle_equivalence(capsys):
    with criterion(capsys, 2, "oracle equivalence", 30.0):
        rng = np.random.default_rng(2)
        mismatches = {name: 0 for name in ("majority_vote", "ties_merge", "dare_ties", "emergence", "selection")}
        for _ in range(1000):
            answers = [str(x) for x in rng.integers(0, 4, size=int(rng.integers(1, 10)))]
            mismatches["majority_vote"] += majority_vote(answers) != count_oracle(answers)

            n, shape, lam = int(rng.integers(1, 5)), (int(rng.integers(1, 4)), 3), float(rng.uniform(0.2, 2))
            maps = [TensorMap({"w": rng.normal(size=shape) * (rng.random(shape) < 0.8)}) for _ in range(n)]
            got = ties_merge(maps, lam).value("w").reshape(-1)
            mismatches["ties_merge"] += float(np.max(np.abs(got - ties_maps_oracle(maps, lam)))) > 1e-12

            base = TensorMap({"w": rng.normal(size=shape)})
            fts = [TensorMap({"w": rng.normal(size=shape)}) for _ in range(n)]
            p, seed = float(rng.choice([0.0, 0.3, 0.7])), int(rng.integers(0, 2 ** 31))
            pruned = [dare_prune(ft - base, p, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
                      for i, ft in enumerate(fts)]
            want = base.value("w").reshape(-1) + np.array(ties_maps_oracle(pruned, lam))
            got = dare_ties(base, fts, p, lam, seed).value("w").reshape(-1)
            mismatches["dare_ties"] += float(np.max(np.abs(got - want))) > 1e-12

            rows = (rng.random((int(rng.integers(1, 6)), 30)) < rng.uniform(0.1, 0.9)).tolist()
            system = (rng.random(30) < 0.5).tolist()
            ids = [f"i{j}" for j in range(30)]
            matrix = CorrectnessMatrix(ids, {**{f"m{j}": r for j, r in enumerate(rows)}, "system": system})
            mismatches["emergence"] += collaborative_emergence(matrix) != emergence_oracle(rows, system)

            count = int(rng.integers(3, 7))
            m = int(rng.integers(2, count + 1))
            vectors = {f"c{j}": rng.normal(size=3).tolist() for j in range(count)}
            cands = [ModelDescriptor(c, description=c) for c in rng.permutation(sorted(vectors))]
            picked = select_models_similarity(lambda d: np.array(vectors[d]), cands, m)
            best, _ = selection_oracle(vectors, m)
            val = sum(cosine_distance(vectors[a], vectors[b]) for a, b in itertools.combinations(picked, 2))
            mismatches["selection"] += abs(val - best) > 1e-9
        assert mismatches == {name: 0 for name in mismatches}, mismatches


# 3. statistical checks

def test_criterion_3_statistical_checks(capsys):
    with criterion(capsys, 3, "statistical checks", 60.0):
        delta = TensorMap({"w": np.array([1.7, -0.4, 3.0])})
        for p in (0.1, 0.5, 0.9):
            samples = np.stack([dare_prune(delta, p, seed=s).value("w") for s in range(10_000)])
            se = samples.std(axis=0, ddof=1) / math.sqrt(len(samples))
            assert np.all(np.abs(samples.mean(axis=0) - delta.value("w")) <= 3 * se), p
        reached = 0
        for seed in range(10):
            start = list(np.random.default_rng(seed).uniform(-10, 10, size=(8, 1)))
            state = pso_maximize(lambda x: -float((x[0] - 3.0) ** 2), start, 50, seed=seed)
            reached += state.gbest_utility >= -0.01
        assert reached == 10


# 4. published reference arithmetic

def test_criterion_4_reference_arithmetic(capsys):
    with criterion(capsys, 4, "reference arithmetic", 30.0):
        five = ModelPool(mock(f"m{i}") for i in range(5))

        def scripted(scores):
            it = iter(scores)
            return lambda p, d: next(it)
        mmlu = leave_one_out(scripted([0.572, 0.581, 0.589, 0.593, 0.598]), five, None)
        gsm = leave_one_out(scripted([0.729, 0.759, 0.822, 0.828, 0.872]), five, None)
        assert abs(mmlu.mean - 0.587) <= 0.001
        assert abs(gsm.std - 0.057) <= 0.001

        rng = np.random.default_rng(4)
        for method, (train, infer) in SYMBOLIC.items():
            for _ in range(5):
                p, subs = random_point(rng)
                for phase, expr in (("train", train), ("infer", infer)):
                    est = estimate_flops(method, phase, p)
                    if expr is None:
                        assert est.flag == NOT_APPLICABLE and est.flops == 0
                    else:
                        assert est.flops == pytest.approx(float(expr.subs(subs)), rel=1e-12), (method, phase)


# 5. orchestration correctness

def cluster_task(seed=5):
    """60% of queries in cluster x (m1 correct), 40% in cluster y (m2 correct)."""
    rng = np.random.default_rng(seed)
    emb, recs = {}, []
    for i in range(100):
        cluster = "x" if i % 5 < 3 else "y"
        q = f"[{cluster}-{i:03d}] question"
        centre = 0.2 if cluster == "x" else 1.3
        t = centre + rng.uniform(-0.25, 0.25)
        emb[q] = np.array([math.cos(t), math.sin(t)])
        recs.append(mc(f"{cluster}{i}", q, "A"))
    right, wrong = "The answer is (A).", "The answer is (B)."
    m1 = mock("m1", {"[x-": right, "[y-": wrong})
    m2 = mock("m2", {"[x-": wrong, "[y-": right})
    return pool(m1, m2), recs[:50], recs[50:], lambda q: emb[q]


def accuracy(backend, recs):
    from modelcollab.evalkit import score_instance
    return sum(score_instance(r, backend.generate(r.prompt, GREEDY).text) for r in recs) / len(recs)


def test_criterion_5_orchestration(capsys):
    with criterion(capsys, 5, "orchestration correctness", 60.0):
        p, dev, held, embedder = cluster_task()
        assert max(accuracy(m, dev) for m in p) == 0.6
        oracle = [max(m.generate(r.prompt, GREEDY).text == "The answer is (A)." for m in p) for r in dev]
        assert sum(oracle) == len(dev)
        policy = api.fit_trained_router(p, dev, embedder, k=3)
        routed = sum(accuracy(p.get(api.route(policy, r.prompt)), [r]) for r in held) / len(held)
        assert routed >= 0.9

        grid = np.linspace(0.05, 0.95, 7)
        for confs in itertools.product(grid, repeat=3):
            casc = pool(*(mock(f"c{i}", {"q": {"text": "ans", "logprobs": [math.log(c)]}})
                          for i, c in enumerate(confs)))
            idx = [api.cascade(casc, "q", ConfidenceRule(threshold=t)).index for t in np.linspace(0, 1, 21)]
            assert idx == sorted(idx)

        solo_text = mock("solo", {"q": {"text": "The answer is (C).", "logprobs": [-0.5] * 4}})
        plain = solo_text.generate("q", GREEDY)
        assert api.cascade(pool(solo_text), "q", ConfidenceRule(threshold=1.0), GREEDY).output == plain
        solo_tok = token_mock("t", {"@0": [0, .2, .5, .3, 0], "*": [.1, .3, .2, .2, .2]})
        sampled = GenerationParams(max_new_tokens=10, temperature=0.8, seed=11)
        ref = sample_decode(solo_tok, "q", sampled)
        assert api.switch_generation(lambda *a: "t", pool(solo_tok), "q", 3, sampled).output == ref
        assert fused_decode(pool(solo_tok), "q", sampled).output == ref

        def echo_first(prompt, params):
            from modelcollab import prompts
            heading = "Final answers from several models:"
            return prompts.parse_blocks(prompt.split(heading, 1)[1])[0][1] if heading in prompt else None
        solo = pool(mock("solo", {"q": "The answer is (D)."}))
        plain_text = solo[0].generate("q", GREEDY).text
        summ = MockBackend("s", responder=echo_first)
        for fn in (text.multiagent_debate, text.multiagent_feedback):
            assert fn(solo, "q", rounds=2, summarizer=summ, params=GREEDY).final_answer == plain_text
        tr = text.structured_interaction(solo, InteractionGraph.complete(["solo"]), "q", rounds=2, params=GREEDY)
        assert tr.answers(2)[0].text == plain_text


# 6. end-to-end reproducibility

def test_criterion_6_reproducibility(capsys, out_dir, tmp_path):
    with criterion(capsys, 6, "end-to-end reproducibility", 300.0):
        configs = list_example_configs()
        assert len(configs) >= 27
        for path in configs:
            first = run_experiment(RunConfig.load(path, output_dir=out_dir / "a"))
            second = run_experiment(RunConfig.load(path, output_dir=out_dir / "b"))
            assert first.exit_code == 0 and second.exit_code == 0, path.name
            assert (first.run_dir / "records.jsonl").read_bytes() == \
                (second.run_dir / "records.jsonl").read_bytes(), path.name

        rng = np.random.default_rng(6)
        m = TensorMap({"a": rng.normal(size=(5, 7)).astype(np.float32), "b": rng.normal(size=9),
                       "c": rng.integers(-5, 5, size=4)})
        tensor_save(m, tmp_path / "rt.safetensors")
        assert tensor_load(tmp_path / "rt.safetensors").bitwise_equal(m)

        shapes = {"embed": (256, 512), "layer.0.weight": (512, 512), "layer.0.bias": (512,)}
        paths = []
        for i in range(3):
            arrays = {n: rng.normal(size=s).astype(np.float32) for n, s in shapes.items()}
            paths.append(tmp_path / f"ckpt{i}.safetensors")
            save_file(arrays, str(paths[-1]))
        assert all(pth.stat().st_size <= 10 * 1024 * 1024 for pth in paths)
        base, *fts = [tensor_load(pth) for pth in paths]
        merged = dare_ties(base, fts, p=0.3, seed=1)
        tensor_save(merged, tmp_path / "merged.safetensors")
        back = load_file(str(tmp_path / "merged.safetensors"))
        assert {n: a.shape for n, a in back.items()} == shapes
        assert all(a.dtype == np.float32 and np.all(np.isfinite(a)) for a in back.values())


# 7. emergence harness

def test_criterion_7_emergence(capsys, out_dir):
    with criterion(capsys, 7, "emergence harness", 60.0):
        report = run_emergence(RunConfig.load(CONFIGS / "em20_debate.json", output_dir=out_dir))
        manifests = [load_manifest(p) for p in report["runs"]]
        singles = [m for m in manifests if m["config"]["method"]["id"] == "single_model"]
        ids = singles[0]["instance_ids"]
        solved = set().union(*(m["summary"]["correct_ids"] for m in singles))
        assert len(ids) == 20 and len(set(ids) - solved) == 4
        assert report["emergence"] == {"multiagent_debate": 0.25}
