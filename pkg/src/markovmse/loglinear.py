"""Hierarchical Poisson log-linear model for multi-list counts.

Each observed cell has mean ``exp(mu + sum_i alpha_i + sum_K alpha_K)``
over the lists and interaction sets it contains; the hidden cell has mean
``exp(mu)`` and ``N_hat = n + exp(mu_hat)``.  Fitting is Newton-Raphson on
the Poisson likelihood with step halving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy.special import gammaln
from scipy.stats import norm

from .generator import (
    Interaction,
    MarkovParams,
    format_interaction,
    is_hierarchical,
    normalize_interactions,
)
from .liststate import ContingencyTable, check_k, mask_from_lists, ordered_states
from .likelihood import FitResult

MAX_NEWTON = 200
GTOL = 1e-8
UNBOUNDED_SE = 25.0  # SE of log hidden count beyond which the upper bound is useless


@dataclass(frozen=True)
class LogLinearSpec:
    """Interaction sets of a hierarchical log-linear model.

    ``forced`` sets must stay in every model visited by selection.
    """

    k: int
    interactions: Tuple[Interaction, ...] = ()
    forced: Tuple[Interaction, ...] = ()

    def __post_init__(self):
        check_k(self.k)
        inter = normalize_interactions(self.interactions)
        forced = normalize_interactions(self.forced)
        for K in inter:
            if len(K) < 2 or K[0] < 1 or K[-1] > self.k:
                raise ValueError(f"invalid interaction {K}")
            if len(K) == self.k:
                raise ValueError("the k-way interaction is not estimable without the hidden cell")
        if not set(forced) <= set(inter):
            raise ValueError("forced interactions must be part of the model")
        if not is_hierarchical(inter):
            raise ValueError("interactions do not satisfy the hierarchical principle")
        object.__setattr__(self, "interactions", inter)
        object.__setattr__(self, "forced", forced)

    @property
    def n_params(self) -> int:
        return 1 + self.k + len(self.interactions)

    def with_interactions(self, interactions) -> "LogLinearSpec":
        return LogLinearSpec(self.k, tuple(interactions), self.forced)

    def describe(self) -> str:
        ints = ",".join(format_interaction(K) for K in self.interactions) or "none"
        return f"log-linear interactions={ints}"

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "interactions": [list(K) for K in self.interactions],
            "forced": [list(K) for K in self.forced],
        }

    @classmethod
    def from_dict(cls, d) -> "LogLinearSpec":
        return cls(
            int(d["k"]),
            tuple(tuple(K) for K in d.get("interactions", ())),
            tuple(tuple(K) for K in d.get("forced", ())),
        )


@dataclass
class LogLinearParams:
    mu: float
    alphas: np.ndarray
    alpha_K: Dict[Interaction, float] = field(default_factory=dict)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        self.alpha_K = {tuple(sorted(K)): float(v) for K, v in self.alpha_K.items()}

    def vector(self, spec: LogLinearSpec) -> np.ndarray:
        return np.concatenate(
            [[self.mu], self.alphas, [self.alpha_K.get(K, 0.0) for K in spec.interactions]]
        )

    @classmethod
    def from_vector(cls, spec: LogLinearSpec, beta) -> "LogLinearParams":
        beta = np.asarray(beta, dtype=float)
        k = spec.k
        return cls(float(beta[0]), beta[1:k + 1].copy(), dict(zip(spec.interactions, beta[k + 1:])))

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "alphas": [float(a) for a in self.alphas],
            "alpha_K": {format_interaction(K): v for K, v in self.alpha_K.items()},
        }


def design_matrix(states, spec: LogLinearSpec) -> np.ndarray:
    """Rows: cells; columns: intercept, main effects, interactions."""
    cols = [np.ones(len(states))]
    masks = np.array(states)
    for i in range(spec.k):
        cols.append(((masks >> i) & 1).astype(float))
    for K in spec.interactions:
        Km = mask_from_lists(K)
        cols.append(((masks & Km) == Km).astype(float))
    return np.column_stack(cols)


def ll_expected_cells(params: LogLinearParams, spec: LogLinearSpec) -> Dict[int, float]:
    """Expected count of every cell, hidden cell included."""
    states = ordered_states(spec.k)
    X = design_matrix(states, spec)
    m = np.exp(X @ params.vector(spec))
    return dict(zip(states, m))


def markov_to_loglinear(params: MarkovParams, N: float) -> LogLinearParams:
    """Map independent-list Markov parameters to log-linear ones.

    ``exp(mu) = N exp(-sum lambda)`` and ``exp(alpha_i) = exp(lambda_i) - 1``.
    """
    if any(v != 1.0 for v in params.mus.values()) or any(
        v != 1.0 for v in params.directional_mus.values()
    ):
        raise ValueError("the parameter map only holds for independent lists")
    lam = params.lambdas
    if np.any(lam <= 0):
        raise ValueError("a zero transition rate has no log-linear counterpart")
    return LogLinearParams(math.log(N) - float(lam.sum()), np.log(np.expm1(lam)))


def loglinear_to_markov(params: LogLinearParams) -> Tuple[MarkovParams, float]:
    """Inverse map: ``lambda_i = log(1 + exp(alpha_i))``, ``N = exp(mu + sum lambda)``."""
    if params.alpha_K:
        if any(v != 0.0 for v in params.alpha_K.values()):
            raise ValueError("the parameter map only holds for the independence model")
    lam = np.logaddexp(0.0, params.alphas)
    return MarkovParams(lam), float(math.exp(params.mu + lam.sum()))


def _cells(table: ContingencyTable, naive: bool):
    if naive:
        states = [m for m in ordered_states(table.k) if m]
        counts = np.array([table.counts.get(m, 0) for m in states], dtype=float)
    else:
        states = table.observable_states
        counts = table.count_vector(states)
    return states, counts


def _newton(X, y, beta0):
    def loglik(beta):
        eta = X @ beta
        return float(np.sum(y * eta - np.exp(eta)))

    beta = beta0.copy()
    ll = loglik(beta)
    grad = X.T @ (y - np.exp(X @ beta))
    it = 0
    for it in range(1, MAX_NEWTON + 1):
        m = np.exp(X @ beta)
        grad = X.T @ (y - m)
        if np.max(np.abs(grad)) < GTOL:
            break
        H = X.T @ (X * m[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            cl = loglik(cand)
            if np.isfinite(cl) and cl >= ll - 1e-12:
                break
            t *= 0.5
        else:
            break
        if abs(cl - ll) < 1e-14 * max(1.0, abs(ll)) and t < 1.0:
            beta, ll = cand, cl
            break
        beta, ll = cand, cl
    m = np.exp(X @ beta)
    grad = X.T @ (y - m)
    return beta, float(np.max(np.abs(grad))), it


def ll_fit(
    table: ContingencyTable,
    spec: LogLinearSpec,
    *,
    naive: bool = True,
    level: float = 0.95,
    compute_se: bool = True,
) -> FitResult:
    """Poisson maximum likelihood for a log-linear model.

    With ``naive`` (default) cells marked as structural zeros in the table
    are fitted as ordinary zero counts; otherwise they are left out.
    The interval for N is a Wald interval on the log of the hidden count,
    ``n + exp(mu_hat -/+ z SE(mu_hat))``.
    """
    if table.k != spec.k:
        raise ValueError(f"table has k={table.k} but spec has k={spec.k}")
    states, y = _cells(table, naive)
    n = float(y.sum())
    if n < 1:
        raise ValueError("table has no observed individuals")
    if spec.n_params > len(states):
        raise ValueError(f"{spec.n_params} parameters exceed the {len(states)} cells")
    X = design_matrix(states, spec)
    beta0 = np.linalg.lstsq(X, np.log(y + 0.5), rcond=None)[0]
    beta, gnorm, nit = _newton(X, y, beta0)
    m = np.exp(X @ beta)
    hidden = math.exp(beta[0])
    N_hat = n + hidden
    with np.errstate(divide="ignore"):
        ll = float(np.sum(np.where(y > 0, y * np.log(m), 0.0) - m) - gammaln(y + 1).sum())
    params = LogLinearParams.from_vector(spec, beta)
    expected = dict(zip(states, m))
    expected[0] = hidden
    res = FitResult(
        framework="loglinear",
        spec=spec,
        params=params,
        N_hat=float(N_hat),
        loglik=ll,
        aic=2 * spec.n_params - 2 * ll,
        n_params=spec.n_params,
        n_observed=int(n),
        expected=expected,
        converged=gnorm < 1e-6,
        grad_norm=gnorm,
        n_iter=nit,
        table=table,
    )
    res._beta = beta
    if compute_se:
        H = X.T @ (X * m[:, None])
        names = ["mu"] + [f"alpha{i + 1}" for i in range(spec.k)]
        names += ["alpha" + format_interaction(K) for K in spec.interactions]
        try:
            cov = np.linalg.inv(H)
            ok = np.all(np.isfinite(cov)) and np.all(np.diag(cov) >= 0)
        except np.linalg.LinAlgError:
            ok = False
        if ok:
            res.cov, res.cov_names = cov, names
            se = {nm: float(math.sqrt(c)) for nm, c in zip(names, np.diag(cov))}
            se["N"] = hidden * se["mu"]
            res.se = se
            z = norm.ppf(0.5 + level / 2.0)
            spread = z * se["mu"]
            hi = n + hidden * math.exp(spread) if spread < 700 else math.inf
            res.ci_N = (n + hidden * math.exp(-spread), hi)
            res.ci_method = "log-wald"
            if se["mu"] > UNBOUNDED_SE:
                res.boundary = True
                res.ci_note = "upper bound unstable (hidden-cell estimate not identified)"
        else:
            res.ci_note = "singular information matrix"
            res.boundary = True
    if res.boundary or gnorm >= 1e-6:
        res.converged = False
        res.message = res.ci_note or "Newton iterations did not converge"
    return res


def ll_profile_ci(
    table: ContingencyTable,
    spec: LogLinearSpec,
    level: float = 0.95,
    *,
    naive: bool = True,
    max_ratio: float = 1e6,
) -> Tuple[float, float]:
    """Profile-likelihood interval for N with the intercept fixed at
    ``log(N - n)``; the upper bound is ``inf`` when unbounded."""
    from scipy import optimize
    from scipy.stats import chi2

    fit_res = ll_fit(table, spec, naive=naive, compute_se=False)
    if level <= 0:
        return (fit_res.N_hat, fit_res.N_hat)
    states, y = _cells(table, naive)
    n = float(y.sum())
    X = design_matrix(states, spec)
    cut = chi2.ppf(level, 1) / 2.0
    beta_hat = fit_res._beta

    def prof(N):
        offset = math.log(max(N - n, 1e-300))
        Xr = X[:, 1:]
        yy = y

        def loglik(b):
            eta = offset + Xr @ b
            return float(np.sum(yy * eta - np.exp(eta)))

        b = beta_hat[1:].copy()
        for _ in range(100):
            m = np.exp(offset + Xr @ b)
            g = Xr.T @ (yy - m)
            if np.max(np.abs(g)) < 1e-9:
                break
            H = Xr.T @ (Xr * m[:, None])
            step = np.linalg.lstsq(H, g, rcond=None)[0]
            base = loglik(b)
            t = 1.0
            while t > 1e-10 and loglik(b + t * step) < base - 1e-12:
                t *= 0.5
            b = b + t * step
        m = np.exp(offset + Xr @ b)
        with np.errstate(divide="ignore"):
            return float(np.sum(np.where(y > 0, y * np.log(m), 0.0) - m) - gammaln(y + 1).sum())

    excess = lambda N: fit_res.loglik - prof(N) - cut
    N_hat = fit_res.N_hat
    lo_end = n + 1e-9 * max(N_hat - n, 1.0)
    if excess(lo_end) <= 0:
        lo = n
    else:
        lo = optimize.brentq(excess, lo_end, N_hat, xtol=1e-6 * N_hat)
    hi = math.inf
    a, b = N_hat, n + 2.0 * (N_hat - n) + 1.0
    while b < max_ratio * n:
        if excess(b) > 0:
            hi = optimize.brentq(excess, a, b, xtol=1e-6 * N_hat)
            break
        a, b = b, n + 2.0 * (b - n)
    return (float(lo), float(hi))
