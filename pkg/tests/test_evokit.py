import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taslora.evokit import (Candidate, Constraints, SearchConfig, SearchError, brute_force, crossover, eval_subnet,
                            evolve, mutate, random_candidates)
from taslora.model import TasLoraModel
from taslora.spacekit import (SubnetConfig, autoformer, count_flops, count_params, desk_t, enumerate_subnets,
                              is_valid, sample_subnet)
from taslora.supernet import init_supernet


def synthetic_loss(subnet: SubnetConfig) -> float:
    """Deterministic loss landscape with a unique optimum."""
    score = subnet.embed / 24 + sum(n + float(m) / 2 for n, m in subnet.blocks) / 9 - 0.1 * subnet.depth
    jitter = 0.001 * (zlib.crc32(subnet.text().encode()) % 7)
    return float(1.0 / (1.0 + score + jitter))


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(population=5, top_k=6)
    with pytest.raises(ValueError):
        SearchConfig(mutation_prob=1.5)


def test_candidate_ordering_and_finiteness(space):
    a = SubnetConfig.parse("2:16:[1,2;1,2]")
    b = SubnetConfig.parse("2:16:[1,2;1,4]")
    assert sorted([Candidate(b, 1.0, 0, 0), Candidate(a, 1.0, 0, 0)])[0].subnet == a
    with pytest.raises(SearchError):
        Candidate(a, float("nan"), 0, 0)


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_mutation_stays_in_space(seed, prob):
    space = autoformer("S")
    rng = np.random.default_rng(seed)
    child = mutate(sample_subnet(space, rng), prob, space, rng)
    assert is_valid(child, space)


@given(st.integers(0, 10_000))
def test_crossover_stays_in_space_and_inherits(seed):
    space = autoformer("B")
    rng = np.random.default_rng(seed)
    a, b = sample_subnet(space, rng), sample_subnet(space, rng)
    c = crossover(a, b, rng)
    assert is_valid(c, space)
    assert c.depth in (a.depth, b.depth) and c.embed in (a.embed, b.embed)
    for i, blk in enumerate(c.blocks):
        assert blk in [s.blocks[i] for s in (a, b) if i < s.depth]


def test_mutation_prob_zero_is_identity(space, rng):
    s = sample_subnet(space, rng)
    assert mutate(s, 0.0, space, rng) == s


def test_brute_force_desk(space):
    ranking = brute_force(space, synthetic_loss)
    assert len(ranking) == 160
    losses = [c.val_loss for c in ranking]
    assert losses == sorted(losses)
    assert ranking[0].val_loss == min(synthetic_loss(s) for s in enumerate_subnets(space))


def test_brute_force_tie_order(space):
    ranking = brute_force(space, lambda s: 1.0)
    texts = [c.subnet.text() for c in ranking]
    assert texts == sorted(texts)


def test_brute_force_cap():
    with pytest.raises(SearchError):
        brute_force(autoformer("T"), synthetic_loss)


def test_evolve_memoizes_and_respects_constraints(space):
    limit = count_params(SubnetConfig.parse("3:16:[2,4;2,4;2,4]"), space)
    calls = []

    def fn(s):
        calls.append(s.text())
        return synthetic_loss(s)

    cfg = SearchConfig(population=20, iterations=10, top_k=5, max_params=limit)
    trace = []
    best = evolve(cfg, space, fn, np.random.default_rng(0), trace)
    assert len(calls) == len(set(calls))
    assert all(count_params(SubnetConfig.parse(t), space) <= limit for t in calls)
    assert best.val_loss == min(synthetic_loss(SubnetConfig.parse(t)) for t in calls)
    assert {r["iter"] for r in trace} == set(range(11))
    assert set(trace[0]) == {"iter", "rank", "subnet", "val_loss", "params", "flops"}


def test_evolve_is_deterministic(space):
    cfg = SearchConfig(population=10, iterations=3, top_k=4)
    a = evolve(cfg, space, synthetic_loss, np.random.default_rng(7))
    b = evolve(cfg, space, synthetic_loss, np.random.default_rng(7))
    assert a.subnet == b.subnet


def test_evolve_finds_synthetic_optimum(space):
    oracle = brute_force(space, synthetic_loss)
    top = {c.subnet.text() for c in oracle[:8]}
    hits = sum(evolve(SearchConfig(population=20, iterations=10, top_k=10), space, synthetic_loss,
                      np.random.default_rng(s)).subnet.text() in top for s in range(10))
    assert hits >= 9


def test_unsatisfiable_constraints(space):
    with pytest.raises(SearchError):
        random_candidates(3, space, Constraints(max_flops=10), np.random.default_rng(0))


def test_constraints(space):
    s = SubnetConfig.parse("2:16:[1,2;1,2]")
    assert Constraints(max_flops=count_flops(s, space)).ok(s, space)
    assert not Constraints(max_params=count_params(s, space) - 1).ok(s, space)


def test_eval_subnet(space, rng):
    model = TasLoraModel(init_supernet(space, rng))
    imgs = rng.standard_normal((10, 1, 16, 16)).astype(np.float32)
    labels = rng.integers(10, size=10)
    loss = eval_subnet(sample_subnet(space, rng), model, imgs, labels)
    assert abs(loss - np.log(10)) < 0.5
    with pytest.raises(SearchError):
        eval_subnet(sample_subnet(space, rng), model, imgs[:0], labels[:0])
