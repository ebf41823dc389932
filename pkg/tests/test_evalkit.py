import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mc, mock
from modelcollab.core import ModelDescriptor, ModelPool
from modelcollab.errors import ArgumentError, FormatError
from modelcollab.evalkit import (NO_ANSWER, CorrectnessMatrix, DatasetRecord, build_diversity_pool,
                                 collaborative_emergence, domain_macro_average, downsample, extract_answer,
                                 leave_one_out, load_dataset, mean_std, score_instance, select_models_prompt,
                                 select_models_similarity, summarize_scores)
from modelcollab.text import majority_vote

LOO_MMLU = [0.572, 0.581, 0.589, 0.593, 0.598]
LOO_GSM8K = [0.729, 0.759, 0.822, 0.828, 0.872]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def row(i, **kw):
    return {"id": f"r{i}", "prompt": f"q{i}", "task_kind": "multiple_choice", "domain_tag": "QA", "gold": "A", **kw}


# loading and sampling

def test_load_dataset(tmp_path):
    recs = load_dataset(write_jsonl(tmp_path / "d.jsonl", [row(1), row(2), row(3)]))
    assert [r.id for r in recs] == ["r1", "r2", "r3"] and recs[0].gold == ("A",)


def test_load_dataset_missing_field_names_line(tmp_path):
    bad = row(2)
    del bad["id"]
    with pytest.raises(FormatError, match=":2:"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [row(1), bad]))


def test_load_dataset_rejects_duplicates_and_bad_gold(tmp_path):
    with pytest.raises(FormatError, match="duplicate"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [row(1), row(1)]))
    with pytest.raises(FormatError):
        load_dataset(write_jsonl(tmp_path / "e.jsonl", [row(1, gold=None)]))
    with pytest.raises(FormatError):
        load_dataset(write_jsonl(tmp_path / "f.jsonl", [row(1, task_kind="open_ended")]))


def test_load_dataset_split_directory(tmp_path):
    write_jsonl(tmp_path / "dev.jsonl", [row(1)])
    assert len(load_dataset(tmp_path, "dev")) == 1
    with pytest.raises(ArgumentError):
        load_dataset(tmp_path)


def test_downsample():
    recs = list(range(2000))
    assert downsample(recs[:500]) == recs[:500]
    sub = downsample(recs, 1000, seed=3)
    assert len(sub) == 1000 and len(set(sub)) == 1000 and sub == sorted(sub)
    assert sub == downsample(recs, 1000, seed=3)


# extraction and scoring

@pytest.mark.parametrize("raw, kind, expected", [
    ("The answer is (B).", "multiple_choice", "B"),
    ("A or maybe C", "multiple_choice", "C"),
    ("I think ABC", "multiple_choice", NO_ANSWER),
    ("so we get 1,234.50", "exact_match", "1234.5"),
    ("3 apples then 40.0", "exact_match", "40"),
    ("-0.0", "exact_match", "0"),
    ("Line one\n  Paris  ", "exact_match", "paris"),
    ("", "exact_match", NO_ANSWER),
    ("", "multiple_choice", NO_ANSWER),
    ("text\n```python\nprint(1)\n```", "code", "print(1)"),
])
def test_extract_answer(raw, kind, expected):
    assert extract_answer(raw, kind) == expected


def test_score_objective():
    assert score_instance(mc("x", "q", "B"), "(B)") == 1.0
    em = DatasetRecord("y", "q", "exact_match", "math", ("4",))
    assert score_instance(em, "5") == 0.0
    assert score_instance(em, "it is 4.00") == 1.0
    assert score_instance(mc("x", "q", "B"), "") == 0.0


def test_score_open_ended_judge():
    rec = DatasetRecord("o", "write a poem", "open_ended", "IF")
    assert score_instance(rec, "roses", mock("judge", {"Rate the response": "7"})) == pytest.approx(6 / 9)
    flags = []
    assert score_instance(rec, "roses", mock("judge", {"Rate": "great"}), flags=flags) == 0.0 and flags
    with pytest.raises(ArgumentError):
        score_instance(rec, "roses")


def test_score_code_runs_tests():
    rec = DatasetRecord("c", "write add", "code", "code", ("assert add(2, 3) == 5",))
    assert score_instance(rec, "```python\ndef add(a, b):\n    return a + b\n```") == 1.0
    assert score_instance(rec, "```python\ndef add(a, b):\n    return a - b\n```") == 0.0


def test_scoring_deterministic():
    rec = mc("x", "q", "C")
    assert len({score_instance(rec, "maybe (C)") for _ in range(5)}) == 1


# macro averages

def test_macro_average_plain():
    r = domain_macro_average({"d1": 0.6, "d2": 0.8}, {"d1": "QA", "d2": "math"})
    assert r.average == pytest.approx(0.7)


def test_macro_average_if_minmax():
    r = domain_macro_average({"alpaca": 9.664}, {"alpaca": "IF"}, (-1.0, 9.664))
    assert r.domain_scores["IF"] == 1.0
    single = domain_macro_average({"alpaca": 5.0}, {"alpaca": "IF"}, (5.0, 5.0))
    assert single.domain_scores["IF"] == 0.5
    with pytest.raises(ArgumentError):
        domain_macro_average({"alpaca": 5.0}, {"alpaca": "IF"})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.randoms())
def test_macro_average_permutation(scores, rnd):
    names = [f"d{i}" for i in range(len(scores))]
    doms = {n: "QA" if i % 2 else "math" for i, n in enumerate(names)}
    perm = names[:]
    rnd.shuffle(perm)
    a = domain_macro_average(dict(zip(names, scores)), doms)
    b = domain_macro_average({p: dict(zip(names, scores))[p] for p in perm}, doms)
    assert a.domain_scores == pytest.approx(b.domain_scores, abs=1e-15)


# emergence

def emergence_oracle(rows, system):
    unsolved = {i for i in range(len(system)) if not any(r[i] for r in rows)}
    if not unsolved:
        return None
    return len({i for i in unsolved if system[i]}) / len(unsolved)


def test_emergence_examples():
    m = CorrectnessMatrix([f"i{k}" for k in range(4)], {"a": [1, 1, 1, 1], "system": [0, 0, 0, 0]})
    assert collaborative_emergence(m) is None
    m = CorrectnessMatrix([f"i{k}" for k in range(6)],
                          {"a": [1, 1, 0, 0, 0, 0], "b": [0, 0, 0, 0, 0, 0], "system": [0, 0, 1, 0, 0, 0]})
    assert collaborative_emergence(m) == 0.25
    with pytest.raises(ArgumentError):
        collaborative_emergence(CorrectnessMatrix(["i"], {"a": [1]}))


def test_emergence_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(200):
        rows = rng.random((5, 100)) < 0.3
        system = rng.random(100) < 0.5
        ids = [f"i{k}" for k in range(100)]
        m = CorrectnessMatrix(ids, {**{f"m{k}": rows[k] for k in range(5)}, "system": system})
        assert collaborative_emergence(m) == emergence_oracle(rows, system)


def test_correctness_matrix_json_round_trip():
    m = CorrectnessMatrix(["a", "b"], {"x": [1, 0], "system": [0, 1]})
    back = CorrectnessMatrix.from_json(json.loads(json.dumps(m.to_json())))
    assert all(np.array_equal(back.rows[k], m.rows[k]) for k in m.rows)


# leave-one-out

def scripted_runner(scores):
    it = iter(scores)
    return lambda pool, data: next(it)


def five_pool():
    return ModelPool(mock(f"m{i}") for i in range(5))


def test_leave_one_out_table_values():
    assert round(leave_one_out(scripted_runner(LOO_MMLU), five_pool(), None).mean, 3) == 0.587
    rep = leave_one_out(scripted_runner(LOO_GSM8K), five_pool(), None)
    assert abs(rep.std - 0.057) <= 0.001
    assert abs(rep.std_population - 0.051) <= 0.001


def test_leave_one_out_identical_and_failures():
    rep = leave_one_out(lambda p, d: 0.5, five_pool(), None)
    assert rep.std == 0.0

    def flaky(pool, data):
        if "m2" not in pool.ids:
            raise RuntimeError("sub-run crashed")
        return 0.4
    rep = leave_one_out(flaky, five_pool(), None)
    assert rep.scores[2] is None and rep.mean == pytest.approx(0.4) and rep.flags


def test_std_matches_two_pass():
    rng = np.random.default_rng(4)
    for _ in range(50):
        xs = rng.random(int(rng.integers(2, 9)))
        mean = sum(xs) / len(xs)
        two_pass = math.sqrt(sum((v - mean) ** 2 for v in xs) / (len(xs) - 1))
        assert abs(summarize_scores(xs)[1] - two_pass) <= 1e-12


def test_mean_std_across_datasets():
    a = leave_one_out(scripted_runner(LOO_MMLU), five_pool(), None)
    b = leave_one_out(scripted_runner(LOO_GSM8K), five_pool(), None)
    assert mean_std([a, b]) == pytest.approx((a.std + b.std) / 2)


# diversity pools

def test_diversity_pool_shapes():
    uniq = [mock(f"u{i}", {"q": f"ans{i}"}) for i in range(8)]
    p = build_diversity_pool(uniq, 2, 4)
    assert len(p) == 8 and len({b.inner.id for b in p}) == 2
    assert build_diversity_pool(uniq, 8, 1).ids == [f"u{i}" for i in range(8)]
    with pytest.raises(ArgumentError):
        build_diversity_pool(uniq, 0, 3)
    one = build_diversity_pool(uniq, 1, 5)
    assert majority_vote([b.generate("q").text for b in one]) == "ans0"


# model selection

def candidates(n=8):
    return [ModelDescriptor(f"c{i}", description=f"model number {i}") for i in range(1, n + 1)]


def test_select_prompt():
    assert select_models_prompt(mock("s", {"Select": "c2, c5 and c7"}), candidates(), 3) == ["c2", "c5", "c7"]
    assert select_models_prompt(mock("s", {"Select": "c4"}), candidates(), 3) == ["c4", "c1", "c2"]
    for text in ("c9 c1 c1 c3", "", "c8,c7,c6,c5"):
        got = select_models_prompt(mock("s", {"Select": text}), candidates(), 3)
        assert len(set(got)) == 3 and set(got) <= {c.id for c in candidates()}


def line_embedder(points):
    return lambda desc: np.array([points[desc]])


def test_select_similarity_examples():
    cands = [ModelDescriptor(n, description=n) for n in ("p0", "p1", "p10")]
    emb = line_embedder({"p0": 0.0, "p1": 1.0, "p10": 10.0})
    assert set(select_models_similarity(emb, cands, 3, metric="euclidean")) == {"p0", "p1", "p10"}
    assert set(select_models_similarity(emb, cands, 2, metric="euclidean")) == {"p0", "p10"}


def exhaustive_oracle(vectors, ids, m):
    def dist(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 1.0
        return min(2.0, max(0.0, 1 - float(a @ b) / (na * nb)))
    best, best_val = None, -1.0
    for combo in itertools.combinations(sorted(ids), m):
        val = sum(dist(vectors[a], vectors[b]) for a, b in itertools.combinations(combo, 2))
        if val > best_val + 1e-12:
            best, best_val = set(combo), val
    return best, best_val


def test_select_similarity_permutation_invariant():
    rng = np.random.default_rng(7)
    for _ in range(30):
        ids = [f"c{i}" for i in range(6)]
        vecs = {i: rng.normal(size=4) for i in ids}
        cands = [ModelDescriptor(i, description=i) for i in ids]
        emb = lambda d: vecs[d]  # noqa: E731
        _, oracle_val = exhaustive_oracle(vecs, ids, 3)
        picks = [select_models_similarity(emb, list(np.random.default_rng(s).permutation(cands)), 3)
                 for s in range(3)]
        assert all(set(p) == set(picks[0]) for p in picks)
        got_val = exhaustive_oracle({i: vecs[i] for i in picks[0]}, picks[0], 3)[1]
        assert abs(got_val - oracle_val) < 1e-9


def test_select_similarity_greedy_fallback():
    rng = np.random.default_rng(1)
    cands = [ModelDescriptor(f"c{i}", description=f"c{i}") for i in range(12)]
    vecs = {c.description: rng.normal(size=3) for c in cands}
    flags = []
    got = select_models_similarity(lambda d: vecs[d], cands, 4, max_subsets=10, flags=flags)
    assert len(got) == 4 and flags
