import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from markovmse.generator import MarkovParams, ModelSpec, build_generator
from markovmse.matexp import (
    ChainKernel,
    ProbabilityError,
    cell_probabilities,
    clean_distribution,
    matrix_exponential,
    segments,
    windowed_probabilities,
)
from markovmse.simulate import get_scenario

from oracles import independence_probability, oracle_generator, rk4_transition, taylor_expm


def test_two_state_closed_form():
    lam = 0.7
    P = matrix_exponential(np.array([[-lam, lam], [0.0, 0.0]]), 1.0)
    np.testing.assert_allclose(P[0], [math.exp(-lam), 1 - math.exp(-lam)], atol=1e-15)


def test_single_list_probability():
    p = cell_probabilities(MarkovParams([0.11]), ModelSpec.standard(1))
    assert p[[1]] == pytest.approx(1 - math.exp(-0.11), abs=1e-15)
    # printed approximation of the closed form, good to about 5e-6
    assert p[[1]] == pytest.approx(0.104171, abs=1e-5)


def test_scenario_1_hidden_probability():
    sc = get_scenario(1)
    assert sc.probabilities().p_unobserved == pytest.approx(151.20 / 500, abs=2e-5)


def test_scenario_4_hidden_probability():
    sc = get_scenario(4)
    assert sc.probabilities().p_unobserved == pytest.approx(2509.20 / 5000, abs=2e-5)


SCENARIO_1_CELLS = {
    # published expected cells for scenario 1 (N = 500), keyed by list sets
    (): 151.20, (1,): 16.13, (2,): 38.09, (3,): 104.02, (4,): 100.80,
    (1, 2): 4.99, (1, 3): 4.89, (1, 4): 10.75, (2, 3): 9.04, (2, 4): 25.39,
    (3, 4): 25.08, (1, 2, 3): 0.78, (1, 2, 4): 3.33, (1, 3, 4): 1.80,
    (2, 3, 4): 3.36, (1, 2, 3, 4): 0.35,
}


def test_scenario_1_all_cells():
    p = get_scenario(1).probabilities()
    for lists, m in SCENARIO_1_CELLS.items():
        assert p[lists] == pytest.approx(m / 500, abs=2e-5)


def test_independence_product_form():
    a, b = 0.4, 1.3
    p = cell_probabilities(MarkovParams([a, b]), ModelSpec.standard(2))
    assert p[[1]] == pytest.approx((1 - math.exp(-a)) * math.exp(-b), abs=1e-15)


def test_probability_invariants():
    p = get_scenario(7).probabilities()
    assert p.probs.sum() == pytest.approx(1.0, abs=1e-10)
    assert (p.probs >= 0).all() and (p.probs <= 1).all()
    assert p.p_obs == pytest.approx(1 - p.p_unobserved, abs=1e-15)


def test_windows_full_interval_identical():
    params = MarkovParams([0.3, 0.5, 0.2], {(1, 2): 1.5})
    spec = ModelSpec.standard(3, [(1, 2)])
    wspec = ModelSpec.standard(3, [(1, 2)], windows=((0, 1),) * 3)
    np.testing.assert_allclose(
        windowed_probabilities(params, wspec).probs, cell_probabilities(params, spec).probs, atol=1e-12
    )


def test_window_half_interval():
    lam = 0.8
    p = windowed_probabilities(MarkovParams([lam]), ModelSpec.standard(1, windows=((0, 0.5),)))
    assert p[[1]] == pytest.approx(1 - math.exp(-lam / 2), abs=1e-14)


def test_window_two_lists_ode():
    a, b = 0.7, 1.1
    spec = ModelSpec.standard(2, windows=((0, 1), (0.5, 1)))
    p = windowed_probabilities(MarkovParams([a, b]), spec)
    closed = math.exp(-a) * (1 - math.exp(-b / 2))
    assert p[[2]] == pytest.approx(closed, abs=1e-12)

    _, Q_full = oracle_generator(2, [a, b])
    _, Q_first = oracle_generator(2, [a, 0.0])
    P = rk4_transition(lambda t: Q_first if t < 0.5 else Q_full, 4, steps=10000)
    states = [0, 1, 2, 3]
    np.testing.assert_allclose(p.probs, P[0, states], atol=1e-10)


def test_windowed_interactions_ode():
    lam = [0.6, 0.9, 0.4]
    mus = {(1, 2): 1.6, (2, 3): 0.7}
    windows = ((0.0, 0.6), (0.2, 1.0), (0.5, 0.9))
    spec = ModelSpec.standard(3, tuple(mus), windows=windows)
    p = windowed_probabilities(MarkovParams(lam, mus), spec)

    def Q_at(t):
        active = [lo <= t < hi for lo, hi in windows]
        return oracle_generator(3, [l if a else 0.0 for l, a in zip(lam, active)], mus)[1]

    P = rk4_transition(Q_at, 8, steps=10000)
    np.testing.assert_allclose(p.probs, P[0], atol=1e-9)


def test_segments_breakpoints():
    spec = ModelSpec.standard(2, windows=((0.0, 0.3), (0.5, 1.0)))
    segs = segments(spec)
    assert [round(d, 12) for d, _ in segs] == [0.3, 0.2, 0.5]
    assert [a.tolist() for _, a in segs] == [[True, False], [False, False], [False, True]]


def test_invalid_window():
    with pytest.raises(ValueError):
        ModelSpec.standard(1, windows=((0.6, 0.5),))


def test_non_finite_generator_rejected():
    with pytest.raises(ValueError):
        matrix_exponential(np.array([[-np.inf, np.inf], [0, 0]]))
    with pytest.raises(ValueError):
        matrix_exponential(np.zeros((2, 2)), -1.0)


def test_clean_distribution():
    np.testing.assert_allclose(clean_distribution(np.array([0.5, 0.5 + 1e-12, -1e-13])).sum(), 1.0)
    with pytest.raises(ProbabilityError):
        clean_distribution(np.array([0.5, 0.6]))
    with pytest.raises(ProbabilityError):
        clean_distribution(np.array([np.nan, 1.0]))


def test_adjoint_gradient_matches_finite_differences():
    spec = ModelSpec.absorbing_list(4, 3, [(1, 2), (2, 3), (1, 2, 3), (1, 3)])
    kernel = ChainKernel(spec)
    rng = np.random.default_rng(3)
    rates = rng.uniform(0.1, 2.0, size=len(kernel.chain.src))
    w = rng.normal(size=kernel.chain.dim)
    _, vjp = kernel.probabilities_with_adjoint(rates)
    g = vjp(w)
    h = 1e-6
    for e in range(len(rates)):
        r1, r2 = rates.copy(), rates.copy()
        r1[e] += h
        r2[e] -= h
        fd = (kernel.probabilities(r1) @ w - kernel.probabilities(r2) @ w) / (2 * h)
        assert g[e] == pytest.approx(fd, abs=1e-7)


def test_adjoint_gradient_windowed():
    spec = ModelSpec.standard(3, [(1, 2)], windows=((0, 0.7), (0.2, 1), (0.4, 0.8)))
    kernel = ChainKernel(spec)
    rates = np.linspace(0.3, 1.5, len(kernel.chain.src))
    w = np.arange(kernel.chain.dim, dtype=float)
    _, vjp = kernel.probabilities_with_adjoint(rates)
    g = vjp(w)
    for e in range(len(rates)):
        d = np.zeros_like(rates)
        d[e] = 1e-6
        fd = (kernel.probabilities(rates + d) @ w - kernel.probabilities(rates - d) @ w) / 2e-6
        assert g[e] == pytest.approx(fd, abs=1e-7)


# ------------------------------------------------------------ properties


@st.composite
def random_generators(draw):
    k = draw(st.integers(1, 4))
    lam = draw(st.lists(st.floats(0.0, 3.0), min_size=k, max_size=k))
    pairs = [(i, j) for i in range(1, k + 1) for j in range(i + 1, k + 1)] if k > 2 else []
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=3)) if pairs else []
    mus = {K: draw(st.floats(0.3, 3.0)) for K in chosen}
    return k, lam, mus


@given(random_generators())
def test_expm_matches_taylor_oracle(g):
    k, lam, mus = g
    Q = build_generator(MarkovParams(lam, mus), ModelSpec.standard(k, tuple(mus))).entries
    np.testing.assert_allclose(matrix_exponential(Q), taylor_expm(Q), atol=1e-10)


@given(random_generators())
def test_rows_are_distributions(g):
    k, lam, mus = g
    P = matrix_exponential(build_generator(MarkovParams(lam, mus), ModelSpec.standard(k, tuple(mus))))
    assert np.abs(P.sum(axis=1) - 1).max() < 1e-10
    assert P.min() > -1e-12


@given(st.integers(1, 4).flatmap(
    lambda k: st.tuples(st.lists(st.floats(0.05, 2.0), min_size=k, max_size=k), st.integers(0, k - 1))
))
def test_p_obs_nondecreasing_in_each_rate(args):
    lam, i = args
    spec = ModelSpec.absorbing_list(len(lam), 1)
    base = cell_probabilities(MarkovParams(lam), spec).p_obs
    bumped = list(lam)
    bumped[i] += 1e-3
    assert cell_probabilities(MarkovParams(bumped), spec).p_obs >= base - 1e-14


@given(st.lists(st.floats(0.05, 2.0), min_size=3, max_size=3), st.integers(1, 3))
def test_absorbing_mass_nondecreasing_in_time(lam, a):
    spec = ModelSpec.absorbing_list(3, a)
    Q = build_generator(MarkovParams(lam), spec)
    holding = np.array([bool(m >> (a - 1) & 1) for m in Q.states])
    masses = [matrix_exponential(Q, t)[0, holding].sum() for t in np.linspace(0, 1, 11)]
    assert all(b >= a_ - 1e-14 for a_, b in zip(masses, masses[1:]))


@given(st.integers(1, 4).flatmap(lambda k: st.lists(st.floats(0.0, 3.0), min_size=k, max_size=k)))
def test_independence_closed_form(lam):
    k = len(lam)
    p = cell_probabilities(MarkovParams(lam), ModelSpec.standard(k))
    for m, v in zip(p.states, p.probs):
        assert v == pytest.approx(independence_probability(lam, m), abs=1e-12)
