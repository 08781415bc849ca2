"""Cell probabilities from the generator: first row of ``exp(tQ)``.

The exponential itself is scipy's scaling-and-squaring Pade routine, which
also handles the triangular, defective generators produced here (repeated
diagonal entries rule out an eigendecomposition).  Lists with restricted
recording windows are handled by splitting ``[0, 1]`` at every window
boundary and chaining piecewise-constant exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Tuple, Union

import numpy as np
from scipy.linalg import expm

from .generator import Chain, GeneratorMatrix, MarkovParams, ModelSpec, compile_chain
from .liststate import mask_from_lists, state_label

RENORMALIZE_TOL = 1e-9


class ProbabilityError(ArithmeticError):
    """Cell probabilities drifted too far from a distribution."""


def matrix_exponential(Q: Union[GeneratorMatrix, np.ndarray], t: float = 1.0) -> np.ndarray:
    """Transition matrix ``P(t) = exp(tQ)``."""
    A = Q.entries if isinstance(Q, GeneratorMatrix) else np.asarray(Q, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("generator must be a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("generator has non-finite entries")
    if t < 0:
        raise ValueError("time must be non-negative")
    return expm(t * A)


def clean_distribution(p: np.ndarray) -> np.ndarray:
    """Clamp round-off negatives; renormalise only for tiny drift."""
    if not np.all(np.isfinite(p)):
        raise ProbabilityError("non-finite probabilities")
    p = np.where(p < 0, 0.0, p)
    drift = abs(p.sum() - 1.0)
    if drift > RENORMALIZE_TOL:
        raise ProbabilityError(f"probabilities sum to 1 + {p.sum() - 1.0:.3g}")
    return p / p.sum()


@dataclass(frozen=True)
class CellProbabilities:
    """``p_{0,I}(1)`` for every state of the chain (index 0 is the empty state)."""

    states: Tuple[int, ...]
    probs: np.ndarray

    @property
    def p_obs(self) -> float:
        return float(1.0 - self.probs[0]) if self.states[0] == 0 else float(self.probs.sum())

    @property
    def p_unobserved(self) -> float:
        return float(self.probs[0])

    def get(self, mask: int) -> float:
        try:
            return float(self.probs[self.states.index(mask)])
        except ValueError:
            return 0.0

    def __getitem__(self, lists: Iterable[int]) -> float:
        return self.get(mask_from_lists(lists))

    def as_dict(self) -> dict:
        return {state_label(m): float(p) for m, p in zip(self.states, self.probs)}

    def expected_cells(self, N: float) -> dict:
        return {m: N * float(p) for m, p in zip(self.states, self.probs)}


def segments(spec: ModelSpec) -> List[Tuple[float, np.ndarray]]:
    """``(duration, active-lists mask)`` for each piece of ``[0, 1]``.

    Breakpoints are the sorted union of 0, 1 and all window bounds.
    Without windows there is one segment of length 1 with every list active.
    """
    if spec.windows is None:
        return [(1.0, np.ones(spec.k, dtype=bool))]
    points = sorted({0.0, 1.0, *(x for w in spec.windows for x in w)})
    out = []
    for a, b in zip(points[:-1], points[1:]):
        mid = 0.5 * (a + b)
        active = np.array([lo <= mid <= hi for lo, hi in spec.windows])
        out.append((b - a, active))
    return out


class ChainKernel:
    """Probability map ``rates -> p(1)`` for a compiled chain, with its adjoint.

    Used by the fitting code, which needs many evaluations for one spec.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.chain: Chain = compile_chain(spec)
        self.segments = [
            (dt, active[self.chain.new]) for dt, active in segments(spec)
        ]
        self.windowed = spec.windows is not None
        d = self.chain.dim
        self._e0 = np.zeros(d)
        self._e0[0] = 1.0

    def _segment_matrices(self, rates):
        mats = []
        for dt, act in self.segments:
            Q = self.chain.matrix(rates, act if self.windowed else None)
            with np.errstate(all="ignore"):
                E = expm(dt * Q)
            mats.append((dt, Q, E))
        return mats

    def probabilities(self, rates: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(rates)):
            raise ValueError("generator has non-finite entries")
        u = self._e0
        for dt, Q, E in self._segment_matrices(rates):
            u = u @ E
        return clean_distribution(u)

    def probabilities_with_adjoint(self, rates: np.ndarray):
        """Return ``p`` and a function mapping a weight vector ``w`` to the
        gradient of ``p . w`` with respect to the edge rates."""
        if not np.all(np.isfinite(rates)):
            raise ValueError("generator has non-finite entries")
        mats = self._segment_matrices(rates)
        lefts = [self._e0]
        for _, _, E in mats:
            lefts.append(lefts[-1] @ E)
        p_raw = lefts[-1]
        p = clean_distribution(p_raw)
        chain = self.chain
        d = chain.dim

        def vjp(w: np.ndarray) -> np.ndarray:
            grad = np.zeros(len(chain.src))
            r = np.asarray(w, dtype=float)
            for m in range(len(mats) - 1, -1, -1):
                dt, Q, E = mats[m]
                u = lefts[m]
                # exp of [[dtQ, r u^T], [0, dtQ]] carries the Frechet derivative.
                block = np.zeros((2 * d, 2 * d))
                block[:d, :d] = dt * Q
                block[d:, d:] = dt * Q
                block[:d, d:] = np.outer(r, u)
                with np.errstate(all="ignore"):
                    G = expm(block)[:d, d:].T * dt
                sens = G[chain.src, chain.dst] - G[chain.src, chain.src]
                if self.windowed:
                    sens = np.where(self.segments[m][1], sens, 0.0)
                grad += sens
                r = E @ r
            return grad

        return p, vjp


def cell_probabilities(params: MarkovParams, spec: ModelSpec) -> CellProbabilities:
    """Probabilities of ending the recording period in each state."""
    kernel = ChainKernel(spec)
    p = kernel.probabilities(kernel.chain.rates(params.vector(spec)))
    return CellProbabilities(kernel.chain.states, p)


def windowed_probabilities(params: MarkovParams, spec: ModelSpec) -> CellProbabilities:
    """Same as :func:`cell_probabilities`; requires per-list windows."""
    if spec.windows is None:
        raise ValueError("spec has no recording windows")
    return cell_probabilities(params, spec)
