import pytest
from hypothesis import given, settings, strategies as st

from markovmse.generator import ModelSpec, format_interaction, parse_interactions
from markovmse.liststate import ContingencyTable, load_dataset
from markovmse.loglinear import LogLinearSpec, ll_fit
from markovmse.selection import (
    SelectionStrategy,
    candidate_moves,
    detect_absorbing,
    forced_absorbing_set,
    stepwise,
)
from markovmse.simulate import get_scenario, simulate_counts


def _sets(specs):
    return [set(s.interactions) for s in specs]


def test_add_moves_respect_hierarchy():
    cur = ModelSpec.standard(4, [(1, 2)])
    added = [set(s.interactions) - {(1, 2)} for s in candidate_moves(cur, "add")]
    assert {(1, 2, 3)} not in added
    for K in [(1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]:
        assert {K} in added


def test_add_moves_offer_three_way():
    cur = ModelSpec.standard(4, [(1, 2), (1, 3), (2, 3)])
    added = [set(s.interactions) - set(cur.interactions) for s in candidate_moves(cur, "add")]
    assert {(1, 2, 3)} in added


def test_remove_moves_keep_forced():
    cur = LogLinearSpec(4, [(1, 2), (1, 3)], forced=[(1, 3)])
    assert _sets(candidate_moves(cur, "remove")) == [{(1, 3)}]
    cur = ModelSpec.standard(4, [(1, 2), (1, 3)])
    assert _sets(candidate_moves(cur, "remove", forced=[(1, 3)])) == [{(1, 3)}]


def test_remove_moves_keep_hierarchy():
    cur = ModelSpec.standard(4, parse_interactions("12,13,23,123"))
    assert _sets(candidate_moves(cur, "remove")) == [set(parse_interactions("12,13,23"))]


def test_ordered_redundant_sets_excluded():
    cur = ModelSpec.ordered_pair(4, 2, 3)
    for s in candidate_moves(cur, "add"):
        assert not any({2, 3} <= set(K) for K in s.interactions)


def test_threshold_semantics():
    assert not SelectionStrategy("forward").accepts(100.0, 98.5)
    assert SelectionStrategy("forward").accepts(100.0, 98.0)
    assert SelectionStrategy("accelerated_forward").accepts(100.0, 98.5)
    assert not SelectionStrategy("accelerated_forward").accepts(100.0, 100.0)


def test_forced_absorbing_set():
    assert set(forced_absorbing_set(5, 3)) == set(parse_interactions("13,23,34,35"))
    assert forced_absorbing_set(2, 1) == ((1, 2),)
    assert set(forced_absorbing_set(4, 2)) == set(parse_interactions("12,23,24"))


def test_markov_exhaustive_rejected():
    with pytest.raises(ValueError):
        stepwise(load_dataset("drug"), ModelSpec.standard(3), SelectionStrategy("all_models"))


def test_unknown_strategy():
    with pytest.raises(ValueError):
        SelectionStrategy("sideways")


def test_stroke_markov_forward():
    tr = stepwise(load_dataset("stroke"), ModelSpec.absorbing_list(5, 3), SelectionStrategy("forward"))
    assert [format_interaction(K) for K in tr.selected] == ["14", "23", "24", "45"]
    assert tr.final_fit.N_hat == pytest.approx(815.57, rel=0.01)


def test_stroke_loglinear_forced_accelerated():
    forced = forced_absorbing_set(5, 3)
    tr = stepwise(
        load_dataset("stroke"), LogLinearSpec(5, forced, forced),
        SelectionStrategy("accelerated_forward", forced=forced),
    )
    assert len(tr.selected) == 13
    assert set(forced) <= set(tr.selected)
    assert tr.final_fit.N_hat == pytest.approx(1000.41, rel=0.01)


def test_drug_loglinear_one_step_picks_23():
    tr = stepwise(load_dataset("drug"), LogLinearSpec(3), SelectionStrategy("accelerated_forward", max_steps=1))
    assert tr.selected == ((2, 3),)


def test_trace_aic_reproducible():
    t = load_dataset("drug")
    tr = stepwise(t, LogLinearSpec(3), SelectionStrategy("accelerated_forward"))
    for step in tr.steps:
        if step.aic is not None:
            assert ll_fit(t, LogLinearSpec(3, step.interactions)).aic == pytest.approx(step.aic, abs=1e-9)


def test_backward_forward_runs():
    t = load_dataset("stroke")
    tr = stepwise(t, LogLinearSpec(5), SelectionStrategy("accelerated_backward_forward"))
    three_way_added = [s for s in tr.steps if s.phase == "forward" and s.accepted]
    for s in three_way_added:
        assert max(len(K) for K in s.interactions) <= 3


def test_all_models_small():
    t = load_dataset("drug")
    tr = stepwise(t, LogLinearSpec(3), SelectionStrategy("all_models"))
    # 1 + 3 + 3 + 1 hierarchical models without the three-way term
    visited = [s for s in tr.steps if s.phase == "all"]
    assert len(visited) == 8
    best = min(s.aic for s in visited if s.aic is not None)
    assert tr.final_fit.aic == pytest.approx(best, abs=1e-9)


def test_detect_two_lists():
    t = ContingencyTable(2, {1: 40, 2: 35, 3: 12})
    ranking = detect_absorbing(t)
    assert sorted(m for m, _ in ranking) == ["LL", "M_L1", "M_L2"]


def test_detect_large_sample():
    sc = get_scenario(1).with_(N=1_000_000)
    ranking = detect_absorbing(simulate_counts(sc, 0, 11))
    assert ranking[0][0] == "M_L3"


# ------------------------------------------------------------ properties

tables4 = st.lists(st.integers(0, 80), min_size=15, max_size=15).filter(lambda c: sum(c) > 20)


@settings(max_examples=20)
@given(tables4, st.sampled_from(["forward", "accelerated_forward"]))
def test_forward_trace_monotone(counts, kind):
    t = ContingencyTable(4, dict(zip(range(1, 16), counts)))
    strat = SelectionStrategy(kind)
    tr = stepwise(t, LogLinearSpec(4), strat)
    accepted = [s.aic for s in tr.steps if s.accepted]
    for a, b in zip(accepted, accepted[1:]):
        assert a - b >= strat.threshold and b < a


@settings(max_examples=20)
@given(tables4, st.integers(1, 4), st.sampled_from(
    ["forward", "accelerated_forward", "accelerated_backward", "accelerated_backward_forward", "all_models"]
))
def test_forced_preserved(counts, a, kind):
    t = ContingencyTable(4, dict(zip(range(1, 16), counts)))
    forced = forced_absorbing_set(4, a)
    tr = stepwise(t, LogLinearSpec(4, forced, forced), SelectionStrategy(kind, forced=forced))
    assert set(forced) <= set(tr.selected)


@settings(max_examples=10)
@given(tables4)
def test_selection_deterministic(counts):
    t = ContingencyTable(4, dict(zip(range(1, 16), counts)))
    s = SelectionStrategy("accelerated_forward")
    assert stepwise(t, LogLinearSpec(4), s).to_dict() == stepwise(t, LogLinearSpec(4), s).to_dict()
