"""Synthetic data from parameterised chains and the three simulation studies.

Every replicate draws its counts from its own Philox stream keyed by
``(seed, scenario key, replicate index)``, so replicates can run in any
order or in parallel and still give the same numbers.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .generator import Interaction, MarkovParams, ModelSpec, format_interaction
from .liststate import ContingencyTable
from .loglinear import LogLinearSpec
from .matexp import cell_probabilities
from .selection import SelectionStrategy, detect_absorbing, forced_absorbing_set, stepwise

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy Philox4x64-10, SeedSequence(seed, scenario key, replicate)"
REPORT_SCHEMA = 1
DEFAULT_REPLICATES = 100
FULL_SCALE_REPLICATES = 500
STUDY_STARTS = 1

PAIR_ORDER: Tuple[Interaction, ...] = ((1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4))


@dataclass(frozen=True)
class Scenario:
    """A data-generating chain with its true population size.

    ``published_lambdas`` are the two-decimal rates as printed; the chain
    itself uses ``-log(1 - p)`` for the capture probabilities ``p`` behind
    them, which is what reproduces the published expected cells.
    """

    id: str
    N: int
    spec: ModelSpec
    params: MarkovParams
    replicates: int = DEFAULT_REPLICATES
    seed: int = 0
    key: int = 0
    published_lambdas: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        self.params.vector(self.spec)

    @property
    def absorbing(self) -> Optional[int]:
        return self.spec.absorbing

    def probabilities(self):
        return cell_probabilities(self.params, self.spec)

    def expected_cells(self) -> Dict[int, float]:
        return self.probabilities().expected_cells(self.N)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "N": self.N,
            "spec": self.spec.to_dict(),
            "lambdas": [float(x) for x in self.params.lambdas],
            "mus": {format_interaction(K): v for K, v in sorted(self.params.mus.items())},
            "replicates": self.replicates,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        """Inverse of :meth:`to_dict`.  Interaction keys are digit strings
        such as ``"12"``; the RNG ``key`` defaults to 0."""
        spec = ModelSpec.from_dict(d["spec"])
        mus = {tuple(int(c) for c in str(K)): float(v) for K, v in d.get("mus", {}).items()}
        return cls(
            id=str(d.get("id", "custom")), N=int(d["N"]), spec=spec,
            params=MarkovParams(d["lambdas"], mus),
            replicates=int(d.get("replicates", DEFAULT_REPLICATES)),
            seed=int(d.get("seed", 0)), key=int(d.get("key", 0)),
        )

    def with_(self, **kw) -> "Scenario":
        d = dict(
            id=self.id, N=self.N, spec=self.spec, params=self.params,
            replicates=self.replicates, seed=self.seed, key=self.key,
            published_lambdas=self.published_lambdas,
        )
        d.update(kw)
        return Scenario(**d)


def _rates(p: Sequence[float]) -> np.ndarray:
    return -np.log1p(-np.asarray(p, dtype=float))


# (N, absorbing list, capture probabilities, published rates, mu12..mu34)
_ABSORBING_TABLE = {
    1: (500, 3, (0.1, 0.2, 0.3, 0.4), (0.11, 0.22, 0.36, 0.51), (1.2, 1.1, 1, 0.9, 1, 1)),
    2: (1000, 3, (0.1, 0.2, 0.3, 0.15), (0.11, 0.22, 0.36, 0.16), (1.2, 1, 1.4, 1.6, 1.2, 1)),
    3: (1000, 3, (0.1, 0.2, 0.18, 0.15), (0.11, 0.22, 0.20, 0.16), (1.2, 1, 1.4, 1.6, 1.2, 1)),
    4: (5000, 2, (0.1, 0.2, 0.18, 0.15), (0.11, 0.22, 0.20, 0.16), (1.2, 1.13, 1.4, 0.9, 1.15, 1)),
    5: (500, 3, (0.1, 0.2, 0.19, 0.15), (0.11, 0.22, 0.21, 0.16), (1.2, 1.1, 1, 1.6, 1, 1)),
    # mu13 printed as 1.13; the published expected cells need 1
    6: (5000, 3, (0.11, 0.3, 0.1, 0.2), (0.12, 0.36, 0.11, 0.22), (1.1, 1, 1, 0.8, 1.15, 1.4)),
    # lambda4 printed as 0.16; the published expected cells need -log(0.9)
    7: (5000, 3, (0.2, 0.35, 0.3, 0.1), (0.22, 0.43, 0.36, 0.16), (1.4, 0.9, 1.2, 1.3, 1.1, 1)),
}
ALIASES = {"A": "1", "B": "4"}

COMPARISON_P = (0.1, 0.2, 0.3, 0.4)
COMPARISON_MUS = (0.8, 1.2, 0.7, 1.5, 1.3, 0.75)
COMPARISON_N = 500


def _scenario(sid: int) -> Scenario:
    N, a, p, pub, mus = _ABSORBING_TABLE[sid]
    mu = {K: v for K, v in zip(PAIR_ORDER, mus) if v != 1}
    spec = ModelSpec.absorbing_list(4, a, tuple(mu))
    return Scenario(
        id=str(sid), N=N, spec=spec, params=MarkovParams(_rates(p), mu),
        key=sid, published_lambdas=pub,
    )


def scenario_registry() -> List[Scenario]:
    """Absorbing-list scenarios 1 to 7 (A and B are 1 and 4)."""
    return [_scenario(i) for i in sorted(_ABSORBING_TABLE)]


def get_scenario(sid) -> Scenario:
    sid = ALIASES.get(str(sid).upper(), str(sid))
    try:
        return _scenario(int(sid))
    except (KeyError, ValueError):
        raise KeyError(f"unknown scenario {sid!r}; choose 1-7, A or B") from None


def comparison_scenario(m: int) -> Scenario:
    """Standard chain with the first ``m`` two-way interactions switched on."""
    if not 0 <= m <= len(PAIR_ORDER):
        raise ValueError("number of interactions must be in 0..6")
    mu = dict(zip(PAIR_ORDER[:m], COMPARISON_MUS[:m]))
    spec = ModelSpec.standard(4, tuple(mu))
    return Scenario(
        id=f"comparison-{m}", N=COMPARISON_N, spec=spec,
        params=MarkovParams(_rates(COMPARISON_P), mu), key=100 + m,
    )


def replicate_rng(seed: int, key: int, replicate: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key, replicate])))


def simulate_counts(scenario: Scenario, replicate_index: int, seed: Optional[int] = None) -> ContingencyTable:
    """One multinomial draw of the final states of ``N`` individuals."""
    seed = scenario.seed if seed is None else seed
    rng = replicate_rng(seed, scenario.key, replicate_index)
    probs = scenario.probabilities()
    draw = rng.multinomial(scenario.N, probs.probs)
    counts = {m: int(c) for m, c in zip(probs.states, draw) if m != 0}
    return ContingencyTable(scenario.spec.k, counts)


# ---------------------------------------------------------------- reports


def _tsv_field(v) -> str:
    if v is None:
        return "NA"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class StudyReport:
    study: str
    config: dict
    records: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    plot_data: List[tuple] = field(default_factory=list)
    plot_columns: Tuple[str, ...] = ("method", "replicate", "log_N_hat")

    def to_dict(self) -> dict:
        from . import __version__

        return {
            "schema": REPORT_SCHEMA,
            "version": __version__,
            "study": self.study,
            "rng": RNG_ALGORITHM,
            "config": self.config,
            "summary": self.summary,
            "records": self.records,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def plot_tsv(self) -> str:
        lines = ["\t".join(self.plot_columns)]
        for row in self.plot_data:
            lines.append("\t".join(_tsv_field(v) for v in row))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> List[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{self.study}_report.json"]
        paths[0].write_text(self.to_json())
        if self.plot_data:
            paths.append(out / f"{self.study}_plotdata.tsv")
            paths[1].write_text(self.plot_tsv())
        return paths

    def format_summary(self) -> str:
        return json.dumps(_jsonable(self.summary), indent=2, sort_keys=True)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _quantiles(values: Sequence[float]) -> dict:
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"n": 0, "median": None, "q1": None, "q3": None}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "median": float(med), "q1": float(q1), "q3": float(q3)}


def _map_replicates(worker, args: List[tuple], threads: Optional[int]) -> list:
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(args) <= 1:
        return [worker(*a) for a in args]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, *zip(*args)))


def _ints(spec) -> List[str]:
    return [format_interaction(K) for K in spec.interactions]


# ------------------------------------------------------- absorbing study

ABSORBING_METHODS = (
    "ll_best_aic",
    "ll_forward",
    "ll_acc_forward",
    "ll_forced_true",
    "ll_forced_forward",
    "ll_forced_acc_forward",
    "ll_forced_acc_backward",
    "ll_forced_acc_backward_forward",
    "ll_forced_best_aic",
    "mc_true",
    "mc_forward",
    "mc_acc_forward",
    "mc_acc_backward",
    "mc_acc_backward_forward",
)
DEFAULT_ABSORBING_METHODS = ("ll_best_aic", "ll_forced_acc_forward", "mc_acc_forward")

_KIND = {
    "true": "true_model",
    "forward": "forward",
    "acc_forward": "accelerated_forward",
    "acc_backward": "accelerated_backward",
    "acc_backward_forward": "accelerated_backward_forward",
    "best_aic": "all_models",
}


def _run_method(method: str, table: ContingencyTable, scenario: Scenario):
    k = table.k
    a = scenario.absorbing
    if method.startswith("mc_"):
        kind = _KIND[method[3:]]
        base = scenario.spec if kind == "true_model" else ModelSpec.absorbing_list(k, a)
        return stepwise(table, base, SelectionStrategy(kind, n_starts=STUDY_STARTS), "markov")
    if method.startswith("ll_forced_"):
        kind = _KIND[method[len("ll_forced_"):]]
        forced = forced_absorbing_set(k, a)
        ints = forced
        if kind == "true_model":
            ints = tuple(set(forced) | set(scenario.spec.interactions))
        base = LogLinearSpec(k, ints, forced)
        return stepwise(table, base, SelectionStrategy(kind, forced=forced), "loglinear")
    kind = _KIND[method[3:]]
    base = LogLinearSpec(k, scenario.spec.interactions if kind == "true_model" else ())
    return stepwise(table, base, SelectionStrategy(kind), "loglinear")


def _absorbing_replicate(scenario: Scenario, methods: Tuple[str, ...], rep: int, seed: int):
    table = simulate_counts(scenario, rep, seed)
    out = []
    for method in methods:
        rec = {"method": method, "replicate": rep, "n": table.n}
        try:
            tr = _run_method(method, table, scenario)
            f = tr.final_fit
            rec.update(
                N_hat=f.N_hat,
                log_N_hat=math.log(f.N_hat) if f.N_hat > 0 and math.isfinite(f.N_hat) else None,
                aic=f.aic,
                selected=_ints(tr.final),
                status="ok" if f.converged and not f.boundary else "boundary" if f.boundary else "not converged",
            )
        except Exception as exc:  # replicate-level failures are recorded, not fatal
            rec.update(N_hat=None, log_N_hat=None, aic=None, selected=None, status=f"failed: {exc}")
        out.append(rec)
    return out


def run_absorbing_study(
    scenario,
    methods: Sequence[str] = DEFAULT_ABSORBING_METHODS,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    threads: Optional[int] = 1,
) -> StudyReport:
    """Fit each method to replicated data from an absorbing-list scenario."""
    if not isinstance(scenario, Scenario):
        scenario = get_scenario(scenario)
    if scenario.spec.topology != "absorbing":
        raise ValueError("the absorbing study needs an absorbing-list scenario")
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    methods = tuple(methods)
    bad = [m for m in methods if m not in ABSORBING_METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {', '.join(ABSORBING_METHODS)}")
    args = [(scenario, methods, r, seed) for r in range(replicates)]
    rows = [rec for recs in _map_replicates(_absorbing_replicate, args, threads) for rec in recs]
    summary = {}
    for m in methods:
        recs = [r for r in rows if r["method"] == m]
        q = _quantiles([r["N_hat"] for r in recs])
        summary[m] = {
            **q,
            "median_bias": None if q["median"] is None else q["median"] - scenario.N,
            "iqr": None if q["q1"] is None else q["q3"] - q["q1"],
            "failures": sum(r["status"].startswith("failed") for r in recs),
            "flagged": sum(r["status"] in ("boundary", "not converged") for r in recs),
        }
    config = {
        "scenario": scenario.id,
        "N": scenario.N,
        "spec": scenario.spec.to_dict(),
        "methods": list(methods),
        "replicates": replicates,
        "seed": seed,
    }
    plot = [(r["method"], r["replicate"], r["log_N_hat"]) for r in rows]
    return StudyReport("absorbing", config, rows, summary, plot)


# ------------------------------------------------------ comparison study

COMPARISON_MODES = ("none", "forward", "accelerated_forward")


def _comparison_replicate(scenario: Scenario, mode: str, rep: int, seed: int):
    table = simulate_counts(scenario, rep, seed)
    rec = {"replicate": rep, "n": table.n}
    try:
        kind = "true_model" if mode == "none" else mode
        strategy = SelectionStrategy(kind, n_starts=STUDY_STARTS)
        mc_base = scenario.spec if mode == "none" else ModelSpec.standard(4)
        ll_base = LogLinearSpec(4, scenario.spec.interactions if mode == "none" else ())
        mc = stepwise(table, mc_base, strategy, "markov")
        ll = stepwise(table, ll_base, SelectionStrategy(kind), "loglinear")
        rec.update(
            N_mc=mc.final_fit.N_hat,
            N_ll=ll.final_fit.N_hat,
            aic_mc=mc.final_fit.aic,
            aic_ll=ll.final_fit.aic,
            delta_N=mc.final_fit.N_hat - ll.final_fit.N_hat,
            delta_aic=mc.final_fit.aic - ll.final_fit.aic,
            selected_mc=_ints(mc.final),
            selected_ll=_ints(ll.final),
            same_model=_ints(mc.final) == _ints(ll.final),
            status="ok",
        )
    except Exception as exc:
        rec.update(delta_N=None, delta_aic=None, same_model=None, status=f"failed: {exc}")
    return rec


def run_comparison_study(
    interactions: Sequence[int] = (1, 2, 3, 4, 5, 6),
    mode: str = "accelerated_forward",
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    threads: Optional[int] = 1,
) -> StudyReport:
    """Markov versus log-linear on data from standard (non-absorbing) chains.

    For each number ``m`` of included two-way interactions, reports the
    median, quartiles and 95% quantile of ``|dN|`` for ``dN = N_mc - N_ll``,
    the same summary for the AIC differences, and how often both
    frameworks selected the same interaction set.
    """
    if mode not in COMPARISON_MODES:
        raise ValueError(f"mode must be one of {', '.join(COMPARISON_MODES)}")
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    rows, summary = [], {}
    for m in interactions:
        sc = comparison_scenario(m)
        args = [(sc, mode, r, seed) for r in range(replicates)]
        recs = _map_replicates(_comparison_replicate, args, threads)
        for r in recs:
            r["interactions"] = m
        rows.extend(recs)
        dN = [r["delta_N"] for r in recs]
        absN = [abs(x) for x in dN if x is not None]
        summary[str(m)] = {
            "delta_N": _quantiles(dN),
            "delta_N_abs_q95": float(np.percentile(absN, 95)) if absN else None,
            "delta_aic": _quantiles([r["delta_aic"] for r in recs]),
            "same_model": sum(bool(r["same_model"]) for r in recs),
            "replicates": len(recs),
            "failures": sum(r["status"].startswith("failed") for r in recs),
        }
    config = {
        "interactions": list(interactions),
        "mode": mode,
        "replicates": replicates,
        "seed": seed,
        "N": COMPARISON_N,
        "p": list(COMPARISON_P),
        "mus": {format_interaction(K): v for K, v in zip(PAIR_ORDER, COMPARISON_MUS)},
    }
    plot = [(r["interactions"], r["replicate"], r["delta_N"]) for r in rows]
    return StudyReport("comparison", config, rows, summary, plot, ("interactions", "replicate", "delta_N"))


# ------------------------------------------------------- detection study


def _detection_replicate(scenario: Scenario, rep: int, seed: int):
    table = simulate_counts(scenario, rep, seed)
    rec = {"scenario": scenario.id, "replicate": rep}
    try:
        ranking = detect_absorbing(
            table, SelectionStrategy("accelerated_forward", n_starts=STUDY_STARTS)
        )
        markov = [r for r in ranking if r[0] != "LL"]
        rec.update(
            ranking=[[m, a] for m, a in ranking],
            winner_markov=markov[0][0] if markov else None,
            winner_all=ranking[0][0] if ranking else None,
            status="ok",
        )
    except Exception as exc:
        rec.update(ranking=None, winner_markov=None, winner_all=None, status=f"failed: {exc}")
    return rec


def run_detection_study(
    scenarios: Sequence = ("1", "4"),
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    threads: Optional[int] = 1,
) -> StudyReport:
    """How often each list wins the AIC comparison of absorbing models.

    ``summary[scenario]['markov']`` ranks only the Markov models;
    ``summary[scenario]['with_loglinear']`` adds the log-linear model.
    Values are fractions of replicates.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    rows, summary = [], {}
    for s in scenarios:
        sc = s if isinstance(s, Scenario) else get_scenario(s)
        if sc.absorbing is None:
            raise ValueError(f"scenario {sc.id} has no absorbing list")
        args = [(sc, r, seed) for r in range(replicates)]
        recs = _map_replicates(_detection_replicate, args, threads)
        rows.extend(recs)
        k = sc.spec.k
        ids = [f"M_L{i}" for i in range(1, k + 1)]
        markov = {i: sum(r["winner_markov"] == i for r in recs) / replicates for i in ids}
        full = {i: sum(r["winner_all"] == i for r in recs) / replicates for i in ids + ["LL"]}
        summary[sc.id] = {
            "true_list": f"M_L{sc.absorbing}",
            "markov": markov,
            "with_loglinear": full,
            "failures": sum(r["status"].startswith("failed") for r in recs),
        }
    config = {
        "scenarios": [s.id if isinstance(s, Scenario) else str(s) for s in scenarios],
        "replicates": replicates,
        "seed": seed,
    }
    plot = [(r["scenario"], r["replicate"], r["winner_markov"], r["winner_all"]) for r in rows]
    return StudyReport(
        "detection", config, rows, summary, plot, ("scenario", "replicate", "winner_markov", "winner_all")
    )
