import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA
from modelcollab.core import ModelDescriptor
from modelcollab.errors import ArgumentError, CapabilityError, ShapeError
from modelcollab.tensors import TensorMap, tensor_load
from modelcollab.weight import (CachedEvaluator, WeightDelta, WeightStoreBackend, dare_prune, dare_ties, expo,
                                greedy_soup, linear_combine, lorahub_compose, model_swarms_search, ties_merge,
                                weights_of)

S = TensorMap.scalar


def x(t):
    return float(t.value("w")[0])


def rand_maps(rng, n, shapes=((2, 3), (4,))):
    return [TensorMap({f"t{i}": rng.normal(size=s) for i, s in enumerate(shapes)}) for _ in range(n)]


# naive per-element references

def ties_reference(values, lam):
    total = sum(values)
    sign = 1.0 if total >= 0 else -1.0
    agree = [v for v in values if v != 0 and (v > 0) == (sign > 0)]
    return lam * (sum(agree) / len(agree)) if agree else 0.0


def ties_map_reference(maps, lam):
    out = {}
    for name in maps[0]:
        flat = [m.value(name).reshape(-1) for m in maps]
        out[name] = np.array([ties_reference([f[i] for f in flat], lam)
                              for i in range(flat[0].size)]).reshape(maps[0][name].shape)
    return out


# linear combination

def test_linear_combine_identity_and_midpoint():
    m = S(3.0)
    assert linear_combine([m], [1]).allclose(m, 0)
    assert x(linear_combine([S(1.0), S(3.0)], [0.5, 0.5])) == 2.0


def test_linear_combine_matches_loop():
    rng = np.random.default_rng(0)
    maps, w = rand_maps(rng, 3), rng.normal(size=3)
    got = linear_combine(maps, w)
    for name in maps[0]:
        ref = np.zeros(maps[0][name].shape)
        for idx in np.ndindex(ref.shape):
            ref[idx] = sum(w[k] * maps[k].value(name)[idx] for k in range(3))
        assert np.max(np.abs(got.value(name) - ref)) <= 1e-12


def test_linear_combine_errors():
    with pytest.raises(ShapeError):
        linear_combine([S(1.0), TensorMap({"w": np.zeros(2)})], [1, 1])
    with pytest.raises(ArgumentError):
        linear_combine([S(1.0)], [1, 2])


# greedy soup

def test_soup_scalar_example():
    res = greedy_soup([S(3.0), S(1.0), S(2.0)], lambda t: -abs(x(t) - 2.5))
    assert x(res.model) == 2.5 and res.members == [0, 2]


def test_soup_every_merge_hurts():
    pool = [S(3.0), S(2.0), S(1.0)]
    res = greedy_soup(pool, lambda t: {3.0: 1.0, 2.0: 0.9, 1.0: 0.8}.get(x(t), 0.0))
    assert x(res.model) == 3.0 and res.members == [0]


def test_soup_every_merge_helps():
    pool = [S(1.0), S(2.0), S(6.0)]
    scores = {1.0: 3, 2.0: 2, 6.0: 1, 1.5: 4, 3.0: 5}
    res = greedy_soup(pool, lambda t: scores[x(t)])
    assert x(res.model) == 3.0 and sorted(res.members) == [0, 1, 2]


def test_soup_rejects_failing_candidates():
    def ev(t):
        if x(t) != 3.0 and x(t) != 1.0:
            raise RuntimeError("eval crashed")
        return x(t)
    res = greedy_soup([S(3.0), S(1.0)], ev)
    assert res.members == [0] and "error" in res.log[1]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=5), st.floats(-5, 5))
def test_soup_never_below_best_single(values, target):
    ev = lambda t: -abs(x(t) - target)  # noqa: E731
    res = greedy_soup([S(v) for v in values], ev)
    assert res.score >= max(ev(S(v)) for v in values)


# DARE

def test_dare_identity_at_zero():
    d = WeightDelta("base", S(2.0))
    assert dare_prune(d, 0.0, seed=1).delta.allclose(d.delta, 0)


def test_dare_mean_preserved():
    v = TensorMap({"w": np.ones(100_000)})
    assert abs(dare_prune(v, 0.5, seed=0).value("w").mean() - 1.0) < 0.01


def test_dare_deterministic_and_validated():
    v = TensorMap({"w": np.ones(50)})
    assert dare_prune(v, 0.3, 7).bitwise_equal(dare_prune(v, 0.3, 7))
    with pytest.raises(ArgumentError):
        dare_prune(v, 1.0)


# TIES

def test_ties_examples():
    assert ties_merge([S(0.7)]).allclose(S(0.7), 0)
    assert x(ties_merge([S(1.0), S(2.0), S(-0.5)])) == 1.5
    assert x(ties_merge([S(1.0), S(-1.0)])) == 1.0
    assert x(ties_merge([S(0.0), S(0.0)])) == 0.0
    assert x(ties_merge([S(-1.0), S(-3.0), S(1.0)], lam=0.5)) == -1.0


def test_ties_keeps_delta_wrapper():
    out = ties_merge([WeightDelta("b", S(1.0)), WeightDelta("b", S(3.0))])
    assert isinstance(out, WeightDelta) and x(out.delta) == 2.0


def test_ties_matches_reference_on_random_maps():
    rng = np.random.default_rng(5)
    for _ in range(50):
        maps = rand_maps(rng, int(rng.integers(1, 5)))
        lam = float(rng.uniform(0.1, 2))
        got = ties_merge(maps, lam)
        ref = ties_map_reference(maps, lam)
        for name in got:
            assert np.max(np.abs(got.value(name) - ref[name])) <= 1e-12


# DARE + TIES

def test_dare_ties_identities():
    base, ft = S(1.0), S(4.0)
    assert dare_ties(base, [ft]).allclose(ft, 1e-15)
    assert dare_ties(base, [base, base], p=0.4).allclose(base, 0)


def test_dare_ties_matches_reference():
    rng = np.random.default_rng(9)
    base = rand_maps(rng, 1)[0]
    fts = rand_maps(rng, 3)
    got = dare_ties(base, fts, p=0.0, lam=1.0)
    ref = ties_map_reference([m - base for m in fts], 1.0)
    for name in got:
        assert np.max(np.abs(got.value(name) - (base.value(name) + ref[name]))) <= 1e-12


# ExPO

def test_expo_examples():
    assert x(expo([S(2.0), S(1.0)], [0.9, 0.1], k=1, alpha=1.0)) == 3.0
    assert x(expo([S(2.0), S(1.0)], [0.9, 0.1], alpha=0.0)) == 2.0
    same = [S(1.25)] * 4
    assert x(expo(same, [1, 2, 3, 4], k=2, alpha=7.0)) == 1.25
    with pytest.raises(ArgumentError):
        expo([S(1.0), S(2.0)], [1, 2], k=2)


def test_expo_uses_evaluator_ranking():
    pool = [S(0.0), S(5.0), S(2.0)]
    out = expo(pool, lambda t: x(t), k=1, alpha=0.5)
    assert x(out) == 5.0 + 0.5 * (5.0 - 0.0)


def test_merge_closure():
    rng = np.random.default_rng(2)
    maps = rand_maps(rng, 4)
    sig = maps[0].signature()
    for out in (expo(maps, [1, 2, 3, 4], 2), ties_merge(maps), dare_ties(maps[0], maps[1:], 0.3),
                greedy_soup(maps, lambda t: float(t.to_vector().sum())).model):
        assert out.signature() == sig


# model swarms

def test_swarms_scalar_example():
    res = model_swarms_search([S(0.0), S(1.0), S(5.0)], lambda t: -(x(t) - 2.0) ** 2, iterations=30)
    assert abs(x(res.model) - 2.0) < 0.1


def test_swarms_zero_iterations_is_best_member():
    res = model_swarms_search([S(0.0), S(1.0), S(5.0)], lambda t: -(x(t) - 2.0) ** 2, iterations=0)
    assert x(res.model) == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.lists(st.floats(-3, 3), min_size=2, max_size=4))
def test_swarms_never_worse_than_pool(seed, values):
    ev = lambda t: -abs(x(t) - 0.7)  # noqa: E731
    res = model_swarms_search([S(v) for v in values], ev, iterations=5, seed=seed)
    assert ev(res.model) >= max(ev(S(v)) for v in values)
    assert all(b >= a for a, b in zip(res.history, res.history[1:]))


def test_cached_evaluator():
    calls = []
    ev = CachedEvaluator(lambda t: calls.append(1) or x(t))
    ev(S(1.0)), ev(S(1.0)), ev(S(2.0))
    assert len(calls) == 2 and ev.calls == 2


# LoraHub

def test_lorahub_single_adapter_grid_oracle():
    base, adapter = S(0.0), WeightDelta("base", S(1.0))
    ev = lambda t: -(x(t) - 1.0) ** 2  # noqa: E731
    grid = np.round(np.arange(-1.5, 1.5001, 0.01), 2)
    best = grid[np.argmax([ev(S(w)) for w in grid])]
    res = lorahub_compose(base, [adapter], ev, budget=100, seed=0)
    assert abs(res.weights[0] - best) < 0.1 and abs(res.weights[0] - 1.0) < 0.1


def test_lorahub_zero_adapters_return_base():
    base = S(0.4)
    res = lorahub_compose(base, [S(0.0), S(0.0)], lambda t: -abs(x(t)), budget=20)
    assert x(res.model) == 0.4 and res.utility == -0.4


def test_lorahub_deterministic_and_budget_zero():
    base, ads = S(0.0), [S(1.0), S(-2.0)]
    ev = lambda t: -(x(t) - 0.3) ** 2  # noqa: E731
    a, b = lorahub_compose(base, ads, ev, 30, seed=4), lorahub_compose(base, ads, ev, 30, seed=4)
    assert np.array_equal(a.weights, b.weights)
    z = lorahub_compose(base, ads, ev, budget=0)
    assert z.weights.tolist() == [0.5, 0.5] and np.isnan(z.utility)
    assert np.all(np.abs(a.weights) <= 1.5)


# weight-store backend

def test_bundled_weight_backends_answer():
    d = ModelDescriptor("math")
    b = WeightStoreBackend.from_file(d, DATA / "weights" / "toy_math_w.safetensors")
    assert b.generate("2 + 2 = ?").text.startswith("The answer is (")
    merged = b.with_weights(b.weights * 1.0, "copy")
    assert merged.id == "copy" and merged.generate("x").text == b.generate("x").text


def test_weights_of_requires_capability():
    from conftest import mock
    with pytest.raises(CapabilityError):
        weights_of([mock("m")])
    w = tensor_load(DATA / "weights" / "toy_base.safetensors")
    other = WeightStoreBackend(ModelDescriptor("o"), TensorMap({"w": np.zeros(2)}))
    with pytest.raises(ShapeError):
        weights_of([WeightStoreBackend(ModelDescriptor("b"), w), other])
