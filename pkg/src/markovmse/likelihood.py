"""Likelihoods, maximum-likelihood fitting and intervals for the Markov model.

The observed cells are treated as independent Poisson counts with means
``N p_I``.  For fixed chain parameters the Poisson MLE of N is
``n / p_obs``, so the optimiser works on the profile (conditional)
log-likelihood over the log-rates and the log-multipliers only.
Gradients come from the adjoint of the matrix exponential.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import optimize
from scipy.special import gammaln, digamma
from scipy.stats import chi2, norm

from .generator import MarkovParams, ModelSpec, format_interaction
from .liststate import ContingencyTable, mark_structural_zeros, state_label
from .matexp import CellProbabilities, ChainKernel, ProbabilityError

log = logging.getLogger(__name__)

GTOL = 1e-8
MAX_ITER = 500
N_JITTER_STARTS = 2
JITTER = 0.3
START_SEED = 20240607
HESSIAN_STEP = 1e-4
BOUNDARY_RATIO = 1e6


class FitError(RuntimeError):
    """A fit could not produce any finite likelihood."""


@dataclass
class FitResult:
    """Outcome of a maximum-likelihood fit (either framework)."""

    framework: str
    spec: Any
    params: Any
    N_hat: float
    loglik: float
    aic: float
    n_params: int
    n_observed: int
    expected: Dict[int, float]
    converged: bool
    grad_norm: float
    n_iter: int
    boundary: bool = False
    message: str = ""
    se: Dict[str, float] = field(default_factory=dict)
    cov: Optional[np.ndarray] = None
    cov_names: List[str] = field(default_factory=list)
    ci_N: Optional[Tuple[float, float]] = None
    ci_method: str = ""
    ci_note: str = ""
    table: Optional[ContingencyTable] = field(default=None, repr=False)

    @property
    def selected_interactions(self) -> list:
        return list(self.spec.interactions)

    @property
    def se_N(self) -> Optional[float]:
        return self.se.get("N")

    def to_dict(self) -> dict:
        ints = [format_interaction(K) for K in self.spec.interactions]
        d = {
            "framework": self.framework,
            "spec": self.spec.to_dict(),
            "selected_interactions": ints,
            "params": self.params.to_dict(),
            "N_hat": self.N_hat,
            "loglik": self.loglik,
            "aic": self.aic,
            "n_params": self.n_params,
            "n_observed": self.n_observed,
            "expected_cells": {state_label(m): v for m, v in self.expected.items()},
            "se": dict(self.se),
            "ci_N": None if self.ci_N is None else [_json_float(x) for x in self.ci_N],
            "ci_method": self.ci_method,
            "ci_note": self.ci_note,
            "converged": self.converged,
            "boundary": self.boundary,
            "grad_norm": self.grad_norm,
            "n_iter": self.n_iter,
            "message": self.message,
        }
        return d

    def summary(self) -> str:
        ints = ",".join(format_interaction(K) for K in self.spec.interactions) or "none"
        lines = [
            f"framework     {self.framework}",
            f"model         {self.spec.describe() if hasattr(self.spec, 'describe') else ints}",
            f"N_hat         {self.N_hat:.2f}  (observed n = {self.n_observed})",
            f"loglik        {self.loglik:.4f}",
            f"AIC           {self.aic:.2f}  (p = {self.n_params})",
        ]
        if self.se_N is not None:
            lines.append(f"SE(N)         {self.se_N:.2f}")
        if self.ci_N is not None:
            lo, hi = self.ci_N
            lines.append(f"95% CI ({self.ci_method})  [{lo:.2f}, {_fmt_bound(hi)}]")
        elif self.ci_note:
            lines.append(f"CI            unavailable: {self.ci_note}")
        lines.append(f"converged     {self.converged}  (|grad|_inf = {self.grad_norm:.2e})")
        if self.boundary:
            lines.append("WARNING       estimate on the parameter boundary (N_hat unbounded)")
        return "\n".join(lines)


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _fmt_bound(x: float) -> str:
    return f"{x:.2f}" if math.isfinite(x) else "Inf"


def _log_factorials(counts: np.ndarray) -> float:
    return float(gammaln(counts + 1.0).sum())


def _table_cells(table: ContingencyTable, probs: CellProbabilities):
    states = table.observable_states
    n_I = table.count_vector(states)
    p_I = np.array([probs.get(m) for m in states])
    return n_I, p_I


def poisson_loglik(table: ContingencyTable, N: float, probs: CellProbabilities) -> float:
    """``sum_I n_I log(N p_I) - N p_I - log n_I!`` over observable cells.

    Returns ``-inf`` when a cell with a positive count has probability 0.
    """
    if N <= 0:
        raise ValueError("N must be positive")
    n_I, p_I = _table_cells(table, probs)
    m = N * p_I
    if np.any((m <= 0) & (n_I > 0)):
        log.warning("positive count on a zero-probability cell")
        return -math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n_I > 0, n_I * np.log(m), 0.0) - m
    return float(terms.sum() - _log_factorials(n_I))


def multinomial_loglik(table: ContingencyTable, N: float, probs: CellProbabilities) -> float:
    """Log of the full multinomial mass including the unobserved cell (real N)."""
    n_I, p_I = _table_cells(table, probs)
    n = n_I.sum()
    if N < n:
        return -math.inf
    p0 = probs.p_unobserved
    with np.errstate(divide="ignore"):
        cells = np.where(n_I > 0, n_I * np.log(p_I), 0.0).sum()
        hidden = (N - n) * math.log(p0) if N > n else 0.0
    return float(gammaln(N + 1) - gammaln(N - n + 1) - _log_factorials(n_I) + cells + hidden)


def multinomial_factorization(
    table: ContingencyTable, N: float, probs: CellProbabilities
) -> Tuple[float, float]:
    """``(log f1, log f2)``: binomial term in ``(N, p_obs)`` and the
    N-free multinomial term over the observed cells."""
    n_I, p_I = _table_cells(table, probs)
    n = n_I.sum()
    p_obs = p_I.sum()
    if not 0.0 < p_obs < 1.0:
        raise ValueError("p_obs must lie strictly between 0 and 1")
    if N < n:
        raise ValueError("N must be at least the observed total")
    log_f1 = (
        gammaln(N + 1) - gammaln(n + 1) - gammaln(N - n + 1)
        + n * math.log(p_obs) + (N - n) * math.log1p(-p_obs)
    )
    with np.errstate(divide="ignore"):
        log_f2 = (
            gammaln(n + 1) - _log_factorials(n_I)
            + np.where(n_I > 0, n_I * np.log(p_I / p_obs), 0.0).sum()
        )
    return float(log_f1), float(log_f2)


def conditional_N(table: ContingencyTable, probs: CellProbabilities) -> float:
    """Conditional estimate ``n / p_obs``."""
    n_I, p_I = _table_cells(table, probs)
    p_obs = p_I.sum()
    if p_obs <= 0:
        raise ValueError("probability of being observed is zero")
    return float(n_I.sum() / p_obs)


class MarkovObjective:
    """Log-likelihood pieces for one (table, spec) pair in log-parameter space."""

    def __init__(self, table: ContingencyTable, spec: ModelSpec):
        if table.k != spec.k:
            raise ValueError(f"table has k={table.k} but spec has k={spec.k}")
        if spec.topology == "ordered":
            table = mark_structural_zeros(table, spec)
        self.table = table
        self.spec = spec
        self.kernel = ChainKernel(spec)
        chain = self.kernel.chain
        index = {m: i for i, m in enumerate(chain.states)}
        missing = [m for m in table.observable_states if m not in index]
        if any(table.counts[m] for m in missing):
            raise ValueError("table has counts in cells the model cannot reach")
        states = [m for m in table.observable_states if m in index]
        if spec.n_params > len(states):
            raise ValueError(
                f"{spec.n_params} parameters exceed the {len(states)} observable cells"
            )
        self.cell_states = states
        self.cell_idx = np.array([index[m] for m in states], dtype=int)
        self.counts = table.count_vector(states)
        self.n = float(self.counts.sum())
        if self.n < 1:
            raise ValueError("table has no observed individuals")
        self.const = _log_factorials(self.counts)
        self.incidence = chain.incidence
        self.dim = chain.dim

    def probs(self, theta: np.ndarray) -> np.ndarray:
        return self.kernel.probabilities(self.kernel.chain.rates_from_log(theta))

    def _weights(self, p_cells, coef):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.counts > 0, self.counts / p_cells, 0.0) - coef

    def _forward(self, theta):
        with np.errstate(over="ignore"):
            rates = self.kernel.chain.rates_from_log(theta)
        try:
            p, vjp = self.kernel.probabilities_with_adjoint(rates)
        except (ProbabilityError, ValueError):
            return rates, None, None
        return rates, p, vjp

    def profile(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """Profile Poisson log-likelihood (N at ``n / q``) and its gradient."""
        rates, p, vjp = self._forward(theta)
        if p is None:
            return -math.inf, np.zeros_like(theta)
        pc = p[self.cell_idx]
        q = pc.sum()
        if q <= 0 or np.any((pc <= 0) & (self.counts > 0)):
            return -math.inf, np.zeros_like(theta)
        n = self.n
        with np.errstate(divide="ignore"):
            ll = float(np.where(self.counts > 0, self.counts * np.log(n * pc / q), 0.0).sum())
        ll += -n - self.const
        w = np.zeros(self.dim)
        w[self.cell_idx] = self._weights(pc, n / q)
        grad = self.incidence @ (rates * vjp(w))
        return ll, grad

    def full(self, log_N: float, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """Poisson log-likelihood in ``(log N, theta)`` and its gradient."""
        N = math.exp(log_N)
        rates, p, vjp = self._forward(theta)
        if p is None:
            return -math.inf, np.zeros(len(theta) + 1)
        pc = p[self.cell_idx]
        if np.any((pc <= 0) & (self.counts > 0)):
            return -math.inf, np.zeros(len(theta) + 1)
        with np.errstate(divide="ignore"):
            ll = float(np.where(self.counts > 0, self.counts * np.log(N * pc), 0.0).sum())
        ll += -N * pc.sum() - self.const
        w = np.zeros(self.dim)
        w[self.cell_idx] = self._weights(pc, N)
        g_theta = self.incidence @ (rates * vjp(w))
        return ll, np.concatenate([[self.n - N * pc.sum()], g_theta])

    def initial_theta(self) -> np.ndarray:
        N0 = 1.25 * self.n
        lam = [
            -math.log(max(1.0 - self.table.marginal(i + 1) / N0, 0.05))
            for i in range(self.spec.k)
        ]
        lam = np.maximum(lam, 1e-3)
        theta = np.zeros(self.incidence.shape[0])
        theta[: self.spec.k] = np.log(lam)
        return theta


def _maximize(fun, x0, gtol=GTOL, maxiter=MAX_ITER):
    """BFGS on ``-fun`` followed by a short Newton polish."""

    def neg(x):
        v, g = fun(x)
        if not math.isfinite(v):
            return 1e300, np.zeros_like(x)
        return -v, -g

    res = optimize.minimize(
        neg, x0, jac=True, method="BFGS",
        options={"gtol": gtol, "maxiter": maxiter, "norm": np.inf},
    )
    x = res.x
    val, grad = fun(x)
    nit = int(res.nit)
    for _ in range(8):
        gnorm = float(np.max(np.abs(grad))) if len(grad) else 0.0
        if gnorm < gtol or not math.isfinite(val):
            break
        H = _hessian_from_grad(lambda z: fun(z)[1], x, HESSIAN_STEP)
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > 5:
            break
        improved = False
        t = 1.0
        for _ in range(20):
            cand = x + t * step
            cv, cg = fun(cand)
            if math.isfinite(cv) and cv >= val - 1e-12:
                x, val, grad = cand, cv, cg
                improved = True
                break
            t *= 0.5
        nit += 1
        if not improved:
            break
    gnorm = float(np.max(np.abs(grad))) if len(grad) else 0.0
    return x, val, gnorm, nit


def _hessian_from_grad(grad_fun, x, h):
    d = len(x)
    H = np.zeros((d, d))
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        H[:, a] = (grad_fun(x + e) - grad_fun(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def fit(
    table: ContingencyTable,
    spec: ModelSpec,
    *,
    n_starts: int = 1 + N_JITTER_STARTS,
    compute_se: bool = True,
    seed: int = START_SEED,
    level: float = 0.95,
) -> FitResult:
    """Maximum-likelihood fit of the Markov model.

    Runs BFGS from the moment-based start and from ``n_starts - 1``
    jittered copies of it, and keeps the best optimum.  With
    ``compute_se`` the observed information is used for standard errors
    and a Wald interval for N.
    """
    obj = MarkovObjective(table, spec)
    theta0 = obj.initial_theta()
    rng = np.random.default_rng(seed)
    starts = [theta0] + [
        theta0 + rng.uniform(-JITTER, JITTER, size=theta0.shape) for _ in range(n_starts - 1)
    ]
    best = None
    for x0 in starts:
        try:
            x, val, gnorm, nit = _maximize(obj.profile, x0)
        except (ProbabilityError, ValueError, FloatingPointError) as exc:
            log.debug("start failed: %s", exc)
            continue
        if not math.isfinite(val):
            continue
        if best is None or val > best[1] + 1e-9:
            best = (x, val, gnorm, nit)
    if best is None:
        raise FitError("no start produced a finite likelihood")
    theta, ll, gnorm, nit = best
    return _markov_result(obj, theta, ll, gnorm, nit, compute_se, level)


def _markov_result(obj, theta, ll, gnorm, nit, compute_se, level):
    spec = obj.spec
    p = obj.probs(theta)
    q = p[obj.cell_idx].sum()
    N_hat = obj.n / q if q > 0 else math.inf
    params = MarkovParams.from_vector(spec, np.exp(theta))
    expected = {m: N_hat * p[i] for m, i in zip(obj.cell_states, obj.cell_idx)}
    expected[0] = N_hat * p[0]
    boundary = (not math.isfinite(N_hat)) or N_hat > BOUNDARY_RATIO * obj.n or bool(
        np.max(np.abs(theta), initial=0.0) > 30
    )
    converged = gnorm < GTOL
    res = FitResult(
        framework="markov",
        spec=spec,
        params=params,
        N_hat=float(N_hat),
        loglik=float(ll),
        aic=2 * spec.n_params - 2 * float(ll),
        n_params=spec.n_params,
        n_observed=int(obj.n),
        expected=expected,
        converged=bool(converged and not boundary),
        grad_norm=gnorm,
        n_iter=nit,
        boundary=bool(boundary),
        message="" if converged else "gradient tolerance not reached",
        table=obj.table,
    )
    res._theta = theta
    if compute_se and not boundary:
        _attach_markov_covariance(res, obj, theta, level)
    return res


def _attach_markov_covariance(res: FitResult, obj: MarkovObjective, theta, level):
    x = np.concatenate([[math.log(res.N_hat)], theta])
    H = _hessian_from_grad(lambda z: obj.full(z[0], z[1:])[1], x, HESSIAN_STEP)
    names = ["N"] + obj.spec.param_names
    res.cov_names = names
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        res.ci_note = "singular Hessian"
        return
    if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) < 0):
        res.ci_note = "Hessian is not negative definite"
        return
    res.cov = cov
    values = np.exp(x)
    res.se = {nm: float(v * math.sqrt(c)) for nm, v, c in zip(names, values, np.diag(cov))}
    res.ci_N = wald_ci(res, level)
    res.ci_method = "wald"


def wald_ci(fit_result: FitResult, level: float = 0.95) -> Optional[Tuple[float, float]]:
    """``N_hat -/+ z SE(N_hat)`` with the lower end floored at n."""
    se = fit_result.se.get("N")
    if se is None:
        return None
    z = norm.ppf(0.5 + level / 2.0)
    lo = max(fit_result.N_hat - z * se, float(fit_result.n_observed))
    return (float(lo), float(fit_result.N_hat + z * se))


def wald_ci_unfloored(fit_result: FitResult, level: float = 0.95) -> Tuple[float, float]:
    se = fit_result.se["N"]
    z = norm.ppf(0.5 + level / 2.0)
    return (fit_result.N_hat - z * se, fit_result.N_hat + z * se)


def _markov_profile_at(obj: MarkovObjective, N: float, theta0: np.ndarray):
    x, val, _, _ = _maximize(lambda th: _full_theta(obj, N, th), theta0, gtol=1e-6)
    return val, x


def _full_theta(obj, N, theta):
    v, g = obj.full(math.log(N), theta)
    return v, g[1:]


def profile_ci(
    table: ContingencyTable,
    spec: ModelSpec,
    level: float = 0.95,
    fit_result: Optional[FitResult] = None,
    max_ratio: float = 1e6,
) -> Tuple[float, float]:
    """Profile-likelihood interval for N.

    The interval collects every N whose profile log-likelihood is within
    ``chi2_1(level) / 2`` of the maximum.  The lower end is floored at n;
    the upper end is ``inf`` when the profile stays above the cut up to
    ``max_ratio * n``.
    """
    if fit_result is None:
        fit_result = fit(table, spec, compute_se=False)
    if level <= 0:
        return (fit_result.N_hat, fit_result.N_hat)
    obj = MarkovObjective(table, spec)
    theta_hat = fit_result._theta
    cut = chi2.ppf(level, 1) / 2.0
    ll_hat = fit_result.loglik
    cache = {"theta": theta_hat}

    def excess(N):
        val, th = _markov_profile_at(obj, N, cache["theta"])
        cache["theta"] = th
        return ll_hat - val - cut

    return _profile_bounds(excess, fit_result.N_hat, obj.n, max_ratio, cache, theta_hat)


def _profile_bounds(excess, N_hat, n, max_ratio, cache, theta_hat):
    # lower bound
    if N_hat <= n or excess(max(n, 1e-9)) <= 0:
        lo = float(n)
    else:
        cache["theta"] = theta_hat
        lo = optimize.brentq(excess, n, N_hat, xtol=1e-4 * N_hat, maxiter=100)
    # upper bound
    cache["theta"] = theta_hat
    a, b = N_hat, N_hat * 1.5
    hi = math.inf
    while b <= max_ratio * max(n, 1.0):
        if excess(b) > 0:
            hi = optimize.brentq(excess, a, b, xtol=1e-4 * N_hat, maxiter=100)
            break
        a, b = b, b * 2.0
    return (float(lo), float(hi))


def fit_multinomial(table: ContingencyTable, spec: ModelSpec) -> Tuple[float, float]:
    """Joint maximisation of the full multinomial likelihood over N and the
    chain parameters (N real via log-Gamma).  Returns ``(N_hat, loglik)``."""
    obj = MarkovObjective(table, spec)
    start = fit(table, spec, compute_se=False)
    n = obj.n

    def fun(z):
        eta, theta = z[0], z[1:]
        N = n + math.exp(eta)
        rates, p, vjp = obj._forward(theta)
        if p is None:
            return -math.inf, np.zeros_like(z)
        pc = p[obj.cell_idx]
        q = pc.sum()
        if q >= 1 or np.any((pc <= 0) & (obj.counts > 0)):
            return -math.inf, np.zeros_like(z)
        hidden = N - n
        ll = (
            gammaln(N + 1) - gammaln(hidden + 1) - obj.const
            + np.where(obj.counts > 0, obj.counts * np.log(pc), 0.0).sum()
            + hidden * math.log1p(-q)
        )
        g_eta = hidden * (digamma(N + 1) - digamma(hidden + 1) + math.log1p(-q))
        w = np.zeros(obj.dim)
        w[obj.cell_idx] = obj._weights(pc, hidden / (1 - q))
        g_theta = obj.incidence @ (rates * vjp(w))
        return float(ll), np.concatenate([[g_eta], g_theta])

    z0 = np.concatenate([[math.log(max(start.N_hat - n, 1e-3))], start._theta])
    z, val, _, _ = _maximize(fun, z0, gtol=1e-7)
    return float(n + math.exp(z[0])), float(val)
