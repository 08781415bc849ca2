"""Acceptance criteria, each at its stated tolerance.

Every test appends one PASS/FAIL line to the terminal summary.  The
desk-scale simulation studies are marked ``slow`` but run by default.
"""

import time

import numpy as np
import pytest

import conftest
from markovmse.generator import MarkovParams, ModelSpec, build_generator, format_interaction
from markovmse.likelihood import fit
from markovmse.liststate import ContingencyTable, load_dataset, mask_from_lists
from markovmse.loglinear import LogLinearSpec, ll_fit, loglinear_to_markov, markov_to_loglinear
from markovmse.matexp import matrix_exponential
from markovmse.selection import SelectionStrategy, forced_absorbing_set, stepwise
from markovmse.simulate import (
    get_scenario,
    run_absorbing_study,
    run_comparison_study,
    run_detection_study,
)

from oracles import rk4_transition
from test_simulate import CELL_ORDER, PUBLISHED_CELLS


def record(label, ok, detail, started=None, budget=None):
    if started is not None:
        elapsed = time.perf_counter() - started
        ok = ok and (budget is None or elapsed < budget)
        detail = f"{detail}; {elapsed:.1f}s" + (f" (budget {budget:.0f}s)" if budget else "")
    conftest.ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
    assert ok, detail


def test_criterion_1_expected_cells():
    t0 = time.perf_counter()
    worst = 0.0
    for sid, published in PUBLISHED_CELLS.items():
        cells = get_scenario(sid).expected_cells()
        for lists, m in zip(CELL_ORDER, published):
            worst = max(worst, abs(cells[mask_from_lists(lists)] - m))
    record("1 expected cells", worst <= 0.01 + 1e-9, f"max |diff| {worst:.4f}", t0, 1.0)


def _random_tables(count, seed=11):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        k = int(rng.integers(2, 5))
        # strictly positive cells guarantee a finite independence MLE
        out.append(ContingencyTable(k, {m: 1 + int(rng.poisson(rng.uniform(1, 40))) for m in range(1, 1 << k)}))
    return out


def test_criterion_2_equivalence():
    t0 = time.perf_counter()
    tables = [load_dataset("stroke"), load_dataset("drug")] + _random_tables(50)
    d_N = d_aic = d_trip = 0.0
    for t in tables:
        mc = fit(t, ModelSpec.standard(t.k), compute_se=False)
        ll = ll_fit(t, LogLinearSpec(t.k), compute_se=False)
        d_N = max(d_N, abs(mc.N_hat - ll.N_hat) / ll.N_hat)
        d_aic = max(d_aic, abs(mc.aic - ll.aic))
        back, N_back = loglinear_to_markov(markov_to_loglinear(mc.params, mc.N_hat))
        d_trip = max(d_trip, float(np.max(np.abs(back.lambdas - mc.params.lambdas))),
                     abs(N_back - mc.N_hat) / mc.N_hat)
    ok = d_N < 1e-6 and d_aic < 1e-6 and d_trip < 1e-10
    record("2 independence equivalence", ok,
           f"{len(tables)} tables, dN {d_N:.1e}, dAIC {d_aic:.1e}, round trip {d_trip:.1e}", t0, 30.0)


@pytest.fixture(scope="module")
def stroke():
    return load_dataset("stroke")


def test_criterion_3_stroke_forward(stroke):
    t0 = time.perf_counter()
    tr = stepwise(stroke, ModelSpec.absorbing_list(5, 3), SelectionStrategy("forward"))
    sel = [format_interaction(K) for K in tr.selected]
    lo, hi = tr.final_fit.ci_N
    ok = (
        sel == ["14", "23", "24", "45"]
        and abs(tr.final_fit.N_hat / 815.57 - 1) < 0.01
        and abs(lo / 738.61 - 1) < 0.02
        and abs(hi / 892.54 - 1) < 0.02
    )
    record("3a stroke MC forward", ok,
           f"{{{','.join(sel)}}} N {tr.final_fit.N_hat:.2f} CI [{lo:.2f}, {hi:.2f}]", t0, 300.0)


def test_criterion_3_stroke_accelerated_forward(stroke):
    t0 = time.perf_counter()
    tr = stepwise(stroke, ModelSpec.absorbing_list(5, 3), SelectionStrategy("accelerated_forward"))
    sel = [format_interaction(K) for K in tr.selected]
    published = ["12", "14", "15", "23", "24", "25", "45", "124"]
    ok = abs(tr.final_fit.N_hat / 777.39 - 1) < 0.01 and sel == published
    record("3b stroke MC accelerated forward", ok,
           f"{{{','.join(sel)}}} N {tr.final_fit.N_hat:.2f} (published set {{{','.join(published)}}})",
           t0, 300.0)


def test_criterion_3_stroke_loglinear_forced(stroke):
    t0 = time.perf_counter()
    forced = forced_absorbing_set(5, 3)
    tr = stepwise(stroke, LogLinearSpec(5, forced, forced),
                  SelectionStrategy("accelerated_forward", forced=forced))
    ok = abs(tr.final_fit.N_hat / 1000.41 - 1) < 0.01
    record("3c stroke LL forced accelerated forward", ok, f"N {tr.final_fit.N_hat:.2f}", t0, 300.0)


def test_criterion_4_drug():
    t0 = time.perf_counter()
    t = load_dataset("drug")
    rows = {
        "null": (fit(t, ModelSpec.ordered_pair(3, 2, 3)), 340.53, 32.89),
        "12": (fit(t, ModelSpec.ordered_pair(3, 2, 3, [(1, 2)])), 404.76, 34.75),
        "13": (fit(t, ModelSpec.ordered_pair(3, 2, 3, [(1, 3)])), 421.22, 30.83),
    }
    ll = ll_fit(t, LogLinearSpec(3, ((2, 3),)))
    parts, ok = [], True
    for name, (r, N_pub, _) in rows.items():
        good = abs(r.N_hat / N_pub - 1) < 0.01 and not r.boundary
        ok &= good
        parts.append(f"{name} N {r.N_hat:.2f}{'' if not r.boundary else ' (divergent)'} vs {N_pub}")
    null_aic, null_pub = rows["null"][0].aic, rows["null"][2]
    for name in ("12", "13"):
        r, _, aic_pub = rows[name]
        diff = r.aic - null_aic
        good = abs(diff - (aic_pub - null_pub)) <= 0.1
        ok &= good
        parts.append(f"dAIC {name} {diff:+.2f} vs {aic_pub - null_pub:+.2f}")
    ok &= abs(ll.N_hat / 344.99 - 1) < 0.01
    parts.append(f"LL 23 N {ll.N_hat:.2f}")
    record("4 drug", ok, "; ".join(parts), t0, 30.0)


def test_criterion_5_expm_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(1, 5))
        lam = rng.uniform(0.0, 3.0, size=k)
        pairs = [(i, j) for i in range(1, k + 1) for j in range(i + 1, k + 1)] if k > 2 else []
        chosen = [pairs[i] for i in rng.permutation(len(pairs))[: rng.integers(0, 4)]] if pairs else []
        mus = {K: float(rng.uniform(0.3, 3.0)) for K in chosen}
        Q = build_generator(MarkovParams(lam, mus), ModelSpec.standard(k, tuple(mus))).entries
        P = matrix_exponential(Q)
        R = rk4_transition(lambda t: Q, Q.shape[0], steps=400)
        worst = max(worst, float(np.abs(P - R).max()))
    record("5 expm vs RK4", worst < 1e-8, f"200 generators, max dev {worst:.1e}", t0, 30.0)


@pytest.mark.slow
def test_criterion_6_absorbing_bias():
    t0 = time.perf_counter()
    rep = run_absorbing_study("1", ("ll_best_aic", "mc_acc_forward"), replicates=100, seed=7, threads=None)
    ll, mc = rep.summary["ll_best_aic"], rep.summary["mc_acc_forward"]
    ok = ll["median"] > 500 and 475 <= mc["median"] <= 525 and mc["iqr"] < ll["iqr"]
    record("6 absorbing bias", ok,
           f"LL median {ll['median']:.1f} IQR {ll['iqr']:.1f}; MC median {mc['median']:.1f} IQR {mc['iqr']:.1f}",
           t0, 900.0)


@pytest.mark.slow
def test_criterion_7_framework_agreement():
    t0 = time.perf_counter()
    rep = run_comparison_study((1,), replicates=100, seed=1, threads=None)
    s = rep.summary["1"]
    same = s["same_model"]
    med = s["delta_N"]["median"]
    ok = same >= 84 and abs(med) <= 1
    record("7 framework agreement", ok, f"same model {same}/{s['replicates']}, median dN {med:.3f}", t0, 1200.0)


@pytest.mark.slow
def test_criterion_8_detection():
    t0 = time.perf_counter()
    rep = run_detection_study(("1", "4"), replicates=100, seed=7, threads=None)
    parts, ok = [], True
    for sid in ("1", "4"):
        s = rep.summary[sid]
        f = s["markov"].get(s["true_list"], 0.0)
        ok &= f > 0.5
        parts.append(f"scenario {sid} {s['true_list']} {f:.0%}")
    record("8 absorbing detection", ok, "; ".join(parts), t0, 1200.0)


def test_criterion_9_determinism():
    t0 = time.perf_counter()
    a = run_absorbing_study("1", replicates=6, seed=3, threads=1)
    b = run_absorbing_study("1", replicates=6, seed=3, threads=1)
    c = run_absorbing_study("1", replicates=6, seed=3, threads=8)
    ok = a.to_json() == b.to_json() and a.plot_tsv() == b.plot_tsv() and a.summary == c.summary
    record("9 determinism", ok, "threads 1 byte-identical, threads 8 summary identical", t0, None)
