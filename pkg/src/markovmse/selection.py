"""Stepwise AIC selection over hierarchical interaction sets.

Works for both frameworks: Markov specs (:class:`ModelSpec`) and
log-linear specs (:class:`LogLinearSpec`) expose ``interactions``,
``with_interactions`` and ``n_params``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .generator import Interaction, ModelSpec, format_interaction, interaction_key
from .likelihood import FitError, FitResult, fit
from .liststate import ContingencyTable
from .loglinear import LogLinearSpec, ll_fit
from .matexp import ProbabilityError

log = logging.getLogger(__name__)

KINDS = (
    "true_model",
    "forward",
    "accelerated_forward",
    "backward",
    "accelerated_backward",
    "accelerated_backward_forward",
    "all_models",
)

STANDARD_THRESHOLD = 2.0
AIC_TIE = 1e-9


@dataclass(frozen=True)
class SelectionStrategy:
    """How to move through the model lattice.

    ``threshold`` is the AIC drop a move must achieve: 2 for the standard
    forward/backward rules, 0 (any strict improvement) for the accelerated
    ones.  ``max_steps`` caps the number of accepted moves.
    """

    kind: str = "accelerated_forward"
    threshold: Optional[float] = None
    forced: Tuple[Interaction, ...] = ()
    max_steps: Optional[int] = None
    naive: bool = True
    n_starts: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.threshold is None:
            default = STANDARD_THRESHOLD if self.kind in ("forward", "backward") else 0.0
            object.__setattr__(self, "threshold", default)
        forced = tuple(sorted({tuple(sorted(K)) for K in self.forced}, key=interaction_key))
        object.__setattr__(self, "forced", forced)

    def accepts(self, current_aic: float, candidate_aic: float) -> bool:
        if self.threshold > 0:
            return current_aic - candidate_aic >= self.threshold
        return candidate_aic < current_aic


@dataclass
class TraceStep:
    phase: str
    step: int
    interactions: Tuple[Interaction, ...]
    aic: Optional[float]
    N_hat: Optional[float]
    accepted: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "step": self.step,
            "interactions": [format_interaction(K) for K in self.interactions],
            "aic": self.aic,
            "N_hat": self.N_hat,
            "accepted": self.accepted,
            "note": self.note,
        }


@dataclass
class SelectionTrace:
    framework: str
    strategy: SelectionStrategy
    steps: List[TraceStep] = field(default_factory=list)
    final: object = None
    final_fit: Optional[FitResult] = None

    @property
    def selected(self) -> Tuple[Interaction, ...]:
        return tuple(self.final.interactions)

    def to_dict(self) -> dict:
        return {
            "framework": self.framework,
            "strategy": {
                "kind": self.strategy.kind,
                "threshold": self.strategy.threshold,
                "forced": [format_interaction(K) for K in self.strategy.forced],
                "max_steps": self.strategy.max_steps,
            },
            "selected": [format_interaction(K) for K in self.selected],
            "steps": [s.to_dict() for s in self.steps],
            "final_fit": self.final_fit.to_dict() if self.final_fit else None,
        }

    def format_log(self) -> str:
        lines = [f"{self.framework} selection, strategy {self.strategy.kind}"]
        for s in self.steps:
            ints = ",".join(format_interaction(K) for K in s.interactions) or "none"
            aic = "  n/a  " if s.aic is None else f"{s.aic:8.2f}"
            mark = "*" if s.accepted else " "
            note = f"  ({s.note})" if s.note else ""
            lines.append(f" {mark} [{s.phase}:{s.step}] AIC {aic}  {ints}{note}")
        ints = ",".join(format_interaction(K) for K in self.selected) or "none"
        lines.append(f"selected: {ints}")
        if self.final_fit is not None:
            lines.append(f"N_hat = {self.final_fit.N_hat:.2f}, AIC = {self.final_fit.aic:.2f}")
        return "\n".join(lines)


def forced_absorbing_set(k: int, absorbing_list: int) -> Tuple[Interaction, ...]:
    """All two-way interactions involving the absorbing list."""
    if not 1 <= absorbing_list <= k:
        raise ValueError(f"absorbing list must be in 1..{k}")
    return tuple(
        tuple(sorted((absorbing_list, j))) for j in range(1, k + 1) if j != absorbing_list
    )


def _max_params(spec, table: Optional[ContingencyTable], naive: bool) -> int:
    if isinstance(spec, ModelSpec):
        return spec.n_observable
    cells = (1 << spec.k) - 1
    if table is not None and not naive:
        cells -= len(table.structural_zeros)
    return cells


def candidate_moves(
    current,
    direction: str,
    forced: Sequence[Interaction] = (),
    *,
    max_order: Optional[int] = None,
    min_order: int = 2,
    max_params: Optional[int] = None,
) -> list:
    """Hierarchy-preserving single additions or removals.

    Additions: any absent pair, or a larger set whose every subset one
    element smaller is present.  Removals: any present set that is neither
    forced nor contained in another present set.  Sets redundant under an
    ordered topology, the full k-way set and moves exceeding the parameter
    budget are excluded.
    """
    k = current.k
    present = set(current.interactions)
    forced = {tuple(sorted(K)) for K in forced} | set(getattr(current, "forced", ()))
    ordered = getattr(current, "ordered", None)
    if max_params is None:
        max_params = _max_params(current, None, True)
    out = []
    if direction == "add":
        top = k - 1 if max_order is None else min(max_order, k - 1)
        for r in range(max(2, min_order), top + 1):
            for K in itertools.combinations(range(1, k + 1), r):
                if K in present:
                    continue
                if ordered is not None and set(ordered) <= set(K):
                    continue
                if r > 2 and not all(sub in present for sub in itertools.combinations(K, r - 1)):
                    continue
                if current.n_params + 1 > max_params:
                    continue
                out.append(current.with_interactions(tuple(present | {K})))
    elif direction == "remove":
        for K in sorted(present, key=interaction_key):
            if K in forced:
                continue
            if any(K != L and set(K) <= set(L) for L in present):
                continue
            out.append(current.with_interactions(tuple(present - {K})))
    else:
        raise ValueError("direction must be 'add' or 'remove'")
    return out


def _order_key(fit_aic: float, spec) -> tuple:
    return (spec.n_params, tuple(interaction_key(K) for K in spec.interactions))


class _Fitter:
    def __init__(self, table, framework, strategy):
        self.table = table
        self.framework = framework
        self.strategy = strategy
        self.cache: Dict[Tuple[Interaction, ...], Optional[FitResult]] = {}
        self.notes: Dict[Tuple[Interaction, ...], str] = {}

    def __call__(self, spec, allow_boundary: bool = False) -> Optional[FitResult]:
        """Fit ``spec`` once; ``None`` for failed or (unless allowed) divergent fits."""
        key = tuple(spec.interactions)
        if key not in self.cache:
            self.cache[key] = self._fit(spec, key)
        res = self.cache[key]
        if res is not None and res.boundary and not allow_boundary:
            return None
        return res

    def _fit(self, spec, key) -> Optional[FitResult]:
        try:
            if self.framework == "markov":
                res = fit(self.table, spec, compute_se=False, n_starts=self.strategy.n_starts)
            else:
                res = ll_fit(self.table, spec, naive=self.strategy.naive, compute_se=True)
        except (FitError, ProbabilityError, ValueError, FloatingPointError) as exc:
            self.notes[key] = f"fit failed: {exc}"
            log.info("candidate %s skipped: %s", key, exc)
            return None
        if not math.isfinite(res.loglik):
            self.notes[key] = "non-finite likelihood"
            return None
        if res.boundary:
            self.notes[key] = "divergent estimate of N"
        elif not res.converged:
            self.notes[key] = "tolerance not reached"
        return res


def _best(cands: list) -> Optional[tuple]:
    scored = [(r.aic, s, r) for s, r in cands if r is not None]
    if not scored:
        return None
    best_aic = min(a for a, _, _ in scored)
    tied = [(s, r) for a, s, r in scored if a <= best_aic + AIC_TIE]
    tied.sort(key=lambda sr: _order_key(sr[1].aic, sr[0]))
    return tied[0]


def _walk(fitter, trace, spec, res, direction, strategy, phase, max_params, **move_kw):
    accepted = 0
    step = 0
    while strategy.max_steps is None or accepted < strategy.max_steps:
        step += 1
        moves = candidate_moves(
            spec, direction, strategy.forced, max_params=max_params, **move_kw
        )
        if not moves:
            break
        cands = []
        for cand in moves:
            r = fitter(cand)
            cands.append((cand, r))
        best = _best(cands)
        for cand, r in cands:
            chosen = best is not None and cand is best[0] and strategy.accepts(res.aic, r.aic)
            trace.steps.append(
                TraceStep(
                    phase, step, tuple(cand.interactions),
                    None if r is None else r.aic,
                    None if r is None else r.N_hat,
                    bool(chosen),
                    fitter.notes.get(tuple(cand.interactions), ""),
                )
            )
        if best is None or not strategy.accepts(res.aic, best[1].aic):
            break
        if best is not None:
            spec, res = best
        accepted += 1
    return spec, res


def _all_two_way(spec, forced):
    k = spec.k
    ordered = getattr(spec, "ordered", None)
    pairs = [
        K for K in itertools.combinations(range(1, k + 1), 2)
        if not (ordered is not None and set(ordered) == set(K))
    ]
    return spec.with_interactions(tuple(set(pairs) | set(forced) | set(spec.interactions)))


def _enumerate_hierarchical(start, forced, max_params, limit=50000):
    seen = {tuple(start.interactions): start}
    frontier = [start]
    while frontier:
        nxt = []
        for s in frontier:
            for c in candidate_moves(s, "add", forced, max_params=max_params):
                key = tuple(c.interactions)
                if key not in seen:
                    seen[key] = c
                    nxt.append(c)
                    if len(seen) > limit:
                        raise ValueError("too many hierarchical models for exhaustive search")
        frontier = nxt
    return list(seen.values())


def stepwise(
    table: ContingencyTable,
    base_spec,
    strategy: SelectionStrategy,
    framework: Optional[str] = None,
) -> SelectionTrace:
    """Run one selection strategy and refit the chosen model with SEs."""
    if framework is None:
        framework = "markov" if isinstance(base_spec, ModelSpec) else "loglinear"
    if framework not in ("markov", "loglinear"):
        raise ValueError("framework must be 'markov' or 'loglinear'")
    if framework == "markov" and not isinstance(base_spec, ModelSpec):
        raise TypeError("markov selection needs a ModelSpec")
    if framework == "loglinear" and not isinstance(base_spec, LogLinearSpec):
        raise TypeError("log-linear selection needs a LogLinearSpec")
    if strategy.kind == "all_models" and framework == "markov":
        raise ValueError(
            "exhaustive search is only offered for the log-linear model "
            "(too costly for the Markov model)"
        )
    forced = strategy.forced
    if framework == "loglinear" and base_spec.forced:
        forced = tuple(sorted(set(forced) | set(base_spec.forced), key=interaction_key))
        strategy = SelectionStrategy(
            strategy.kind, strategy.threshold, forced, strategy.max_steps,
            strategy.naive, strategy.n_starts,
        )
    max_params = _max_params(base_spec, table, strategy.naive)
    fitter = _Fitter(table, framework, strategy)
    trace = SelectionTrace(framework, strategy)
    kind = strategy.kind

    if kind in ("backward", "accelerated_backward", "accelerated_backward_forward"):
        start = _all_two_way(base_spec, forced)
    else:
        start = base_spec.with_interactions(tuple(set(base_spec.interactions) | set(forced)))
    if start.n_params > max_params:
        raise ValueError(f"starting model has {start.n_params} parameters for {max_params} cells")

    # a divergent start is kept as the reference point; candidates are not
    res = fitter(start, allow_boundary=True)
    trace.steps.append(
        TraceStep("start", 0, tuple(start.interactions),
                  None if res is None else res.aic,
                  None if res is None else res.N_hat, res is not None,
                  fitter.notes.get(tuple(start.interactions), ""))
    )
    if res is None:
        raise FitError("the starting model could not be fitted")
    spec = start

    if kind == "all_models":
        models = _enumerate_hierarchical(start, forced, max_params)
        cands = [(m, fitter(m)) for m in models]
        best = _best(cands)
        for m, r in cands:
            trace.steps.append(
                TraceStep("all", 1, tuple(m.interactions),
                          None if r is None else r.aic, None if r is None else r.N_hat,
                          best is not None and m is best[0],
                          fitter.notes.get(tuple(m.interactions), ""))
            )
        if best is not None:
            spec, res = best
    elif kind in ("forward", "accelerated_forward"):
        spec, res = _walk(fitter, trace, spec, res, "add", strategy, "forward", max_params)
    elif kind in ("backward", "accelerated_backward"):
        spec, res = _walk(fitter, trace, spec, res, "remove", strategy, "backward", max_params)
    elif kind == "accelerated_backward_forward":
        spec, res = _walk(fitter, trace, spec, res, "remove", strategy, "backward", max_params)
        spec, res = _walk(
            fitter, trace, spec, res, "add", strategy, "forward", max_params,
            min_order=3, max_order=3,
        )

    trace.final = spec
    if framework == "markov":
        trace.final_fit = fit(table, spec, n_starts=strategy.n_starts)
    else:
        trace.final_fit = ll_fit(table, spec, naive=strategy.naive)
    return trace


def detect_absorbing(
    table: ContingencyTable,
    strategy: Optional[SelectionStrategy] = None,
    include_loglinear: bool = True,
) -> List[Tuple[str, float]]:
    """Rank Markov models with each list absorbing (and the log-linear
    model) by the AIC of their selected fits; lowest first.

    Model ids are ``'M_L1'``..``'M_Lk'`` and ``'LL'``.
    """
    if table.k < 2:
        raise ValueError("detection needs at least two lists")
    strategy = strategy or SelectionStrategy("accelerated_forward")
    ranking = []
    for i in range(1, table.k + 1):
        try:
            tr = stepwise(table, ModelSpec.absorbing_list(table.k, i), strategy, "markov")
            ranking.append((f"M_L{i}", tr.final_fit.aic))
        except (FitError, ValueError) as exc:
            log.warning("absorbing model for list %d failed: %s", i, exc)
    if include_loglinear:
        try:
            tr = stepwise(table, LogLinearSpec(table.k), strategy, "loglinear")
            ranking.append(("LL", tr.final_fit.aic))
        except (FitError, ValueError) as exc:
            log.warning("log-linear model failed: %s", exc)
    ranking.sort(key=lambda t: (t[1], t[0]))
    return ranking
