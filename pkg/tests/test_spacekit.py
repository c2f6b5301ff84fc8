from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taslora import gradcore as gc
from taslora.spacekit import (Grouping, SearchSpace, SpaceError, SubnetConfig, autoformer, count_flops, count_params,
                              count_subnets, desk_t, enumerate_subnets, group_attributes, group_of, hidden_width,
                              is_valid, max_subnet, sample_subnet, subnets_from_text, validate)
from taslora.supernet import init_supernet, forward, standalone_shapes

subnet_seeds = st.integers(0, 2**32 - 1)


def test_desk_counts(space):
    assert count_subnets(space) == 160
    assert len(list(enumerate_subnets(space))) == 160
    assert len({s.text() for s in enumerate_subnets(space)}) == 160
    assert space.num_groups == 8
    assert space.num_layers == 4 * 3 + 1


@pytest.mark.parametrize("variant, K, blocks", [("T", 12, 14), ("S", 27, 14), ("B", 18, 16)])
def test_autoformer_group_counts(variant, K, blocks):
    s = autoformer(variant)
    assert s.num_groups == K
    assert s.num_layers == 4 * blocks + 1


def test_count_subnets_matches_enumeration_on_small_space():
    s = SearchSpace((1, 2, 3), ("1", "2"), (8,), (1, 2), head_dim=4, patch_size=4, image_size=8, num_classes=3)
    assert count_subnets(s) == len(list(enumerate_subnets(s))) == 6 + 36


@given(st.integers(0, 7))
def test_group_attributes_inverts_group_of(g):
    s = desk_t()
    n, m, e = group_attributes(g, s)
    assert group_of(n, m, e, s).group_id == g


def test_group_ids_are_a_bijection(space):
    ids = {group_of(n, m, e, space).group_id
           for n in space.head_candidates for m in space.mlp_ratio_candidates for e in space.embed_candidates}
    assert ids == set(range(8))
    assert group_of(1, 2, 16, space).group_id == 0
    assert group_of(2, 4, 24, space).group_id == 7
    assert group_of(1, 4, 16, space).group_id == 2  # mixed radix: heads fastest


def test_group_of_rejects_out_of_space(space):
    with pytest.raises(SpaceError, match="heads"):
        group_of(3, 2, 16, space)
    with pytest.raises(SpaceError):
        group_attributes(8, space)


@given(subnet_seeds)
def test_text_round_trip(seed):
    s = sample_subnet(desk_t(), np.random.default_rng(seed))
    assert SubnetConfig.parse(s.text()) == s


def test_fractional_ratio_text():
    s = SubnetConfig(1, 16, ((2, Fraction(7, 2)),))
    assert s.text() == "1:16:[2,3.5]"
    assert SubnetConfig.parse("1:16:[2,3.5]") == s


@pytest.mark.parametrize("text", ["2:16", "x:16:[1,2;1,2]", "2:16:[1,2]", "1:16:1,2"])
def test_parse_rejects_malformed(text):
    with pytest.raises(SpaceError):
        SubnetConfig.parse(text)


def test_validate(space):
    assert is_valid(max_subnet(space), space)
    assert not is_valid(SubnetConfig(4, 16, ((1, 2),) * 4), space)
    assert not is_valid(SubnetConfig(2, 20, ((1, 2),) * 2), space)
    with pytest.raises(SpaceError, match="mlp_ratio"):
        validate(SubnetConfig(2, 16, ((1, 3), (1, 2))), space)
    assert len(subnets_from_text(["2:16:[1,2;2,4]"], space)) == 1


@pytest.mark.parametrize("kwargs", [
    dict(head_candidates=()), dict(head_candidates=(2, 1)), dict(embed_candidates=(0, 16)),
    dict(depth_candidates=(2, 2)),
])
def test_space_rejects_bad_candidates(kwargs):
    base = dict(head_candidates=(1, 2), mlp_ratio_candidates=(2, 4), embed_candidates=(16, 24),
                depth_candidates=(2, 3), head_dim=8, patch_size=4, image_size=16, num_classes=10)
    with pytest.raises(SpaceError):
        SearchSpace(**{**base, **kwargs})


def test_hidden_width_rounds_half_up():
    assert hidden_width(Fraction(7, 2), 3) == 11  # 10.5 -> 11
    assert hidden_width(4, 24) == 96


@pytest.mark.parametrize("text", ["2:16:[1,2;1,2]", "3:24:[2,4;2,4;2,4]", "3:16:[2,2;1,4;2,2]"])
def test_count_params_matches_standalone_shapes(space, text):
    s = SubnetConfig.parse(text)
    oracle = sum(int(np.prod(shape)) for shape in standalone_shapes(s, space).values())
    assert count_params(s, space) == oracle


def test_autoformer_tiny_brackets_published_size():
    # a 5.7M-parameter tiny model must lie between the smallest and largest subnet
    s = autoformer("T")
    smallest = SubnetConfig(12, 192, ((3, Fraction(7, 2)),) * 12)
    assert count_params(smallest, s) < 5.7e6 < count_params(max_subnet(s), s)


@given(subnet_seeds)
def test_count_flops_matches_instrumented_forward(seed):
    space = desk_t()
    s = sample_subnet(space, np.random.default_rng(seed))
    weights = init_supernet(space, np.random.default_rng(0))
    with gc.count_macs() as box:
        forward(weights, s, np.zeros((1, 1, 16, 16), gc.DTYPE))
    assert count_flops(s, space) == 2 * box[0]


def test_count_flops_rejects_zero_depth(space):
    with pytest.raises(SpaceError):
        count_flops(SubnetConfig(0, 16, ()), space)


def test_monotone_costs(space):
    small = SubnetConfig.parse("2:16:[1,2;1,2]")
    big = max_subnet(space)
    assert count_params(small, space) < count_params(big, space)
    assert count_flops(small, space) < count_flops(big, space)


def test_grouping_strategies(space):
    s = max_subnet(space)
    assert Grouping(space).groups_for(s) == [7, 7, 7]
    rnd = Grouping(space, "random", seed=3)
    assert rnd.groups_for(s) == Grouping(space, "random", seed=3).groups_for(s)
    assert all(0 <= g < 8 for g in rnd.groups_for(s))
    par = Grouping(space, "params")
    sub = [par(0, n, m, e) for n in (1, 2) for m in (2, 4) for e in (16, 24)]
    assert max(sub) < 8 and par(0, 2, 4, 24) == max(sub)
    with pytest.raises(SpaceError):
        Grouping(space, "nope")
