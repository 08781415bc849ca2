"""Independent reference computations used by the tests.

Nothing here imports the package's chain compiler or exponential: the
generator is rebuilt straight from the rate formula over all 2^k subsets,
and the exponential is approximated by a Taylor series with scaling and by
fixed-step RK4 integration of p' = p Q.
"""

import itertools
import math

import numpy as np


def subsets(k):
    """All masks in cardinality-then-mask order."""
    return sorted(range(1 << k), key=lambda m: (bin(m).count("1"), m))


def members(mask):
    return tuple(i + 1 for i in range(mask.bit_length()) if mask >> i & 1)


def oracle_generator(k, lambdas, mus=None, absorbing=None, ordered=None, directional=None):
    """Dense generator over the full (or ordered-reduced) state space.

    ``mus`` maps sorted tuples to multipliers; ``directional`` maps
    ``(a, b)`` to the factor applied when ``b`` is added while ``a`` is held.
    Returns ``(states, Q)``.
    """
    mus = {tuple(sorted(K)): v for K, v in (mus or {}).items()}
    directional = directional or {}
    states = subsets(k)
    if ordered is not None:
        i, j = ordered
        states = [m for m in states if not (m >> (j - 1) & 1 and not m >> (i - 1) & 1)]
    index = {m: n for n, m in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for I in states:
        if absorbing is not None and I >> (absorbing - 1) & 1:
            continue
        for j in range(1, k + 1):
            if I >> (j - 1) & 1:
                continue
            J = I | 1 << (j - 1)
            if J not in index:
                continue
            rate = lambdas[j - 1]
            held = members(I)
            for r in range(1, len(held) + 1):
                for rest in itertools.combinations(held, r):
                    K = tuple(sorted(rest + (j,)))
                    rate *= mus.get(K, 1.0)
            for a in held:
                rate *= directional.get((a, j), 1.0)
            Q[index[I], index[J]] = rate
        Q[index[I], index[I]] = -Q[index[I]].sum()
    return states, Q


def taylor_expm(A, terms=30):
    """exp(A) by scaling, a truncated Taylor series and repeated squaring."""
    norm = np.abs(A).sum(axis=1).max()
    s = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0 else 0
    B = A / 2.0**s
    E = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for n in range(1, terms + 1):
        term = term @ B / n
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


def rk4_transition(Q_of_t, dim, t1=1.0, steps=4000, t0=0.0):
    """Integrate P' = P Q(t) from the identity with classical RK4.

    ``Q_of_t`` is taken piecewise constant over each step and evaluated at
    the step midpoint, so window breakpoints that fall on step boundaries
    are resolved exactly.
    """
    P = np.eye(dim)
    h = (t1 - t0) / steps
    for n in range(steps):
        Q = Q_of_t(t0 + (n + 0.5) * h)
        k1 = P @ Q
        k2 = (P + 0.5 * h * k1) @ Q
        k3 = (P + 0.5 * h * k2) @ Q
        k4 = (P + h * k3) @ Q
        P = P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return P


def independence_probability(lambdas, mask):
    """Closed form p_I = prod_{i in I}(1 - e^-l_i) prod_{j not in I} e^-l_j."""
    p = 1.0
    for i, lam in enumerate(lambdas):
        p *= -math.expm1(-lam) if mask >> i & 1 else math.exp(-lam)
    return p


def multinomial_logpmf(counts, probs):
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    N = counts.sum()
    return (
        math.lgamma(N + 1)
        - sum(math.lgamma(c + 1) for c in counts)
        + float(np.sum(np.where(counts > 0, counts * np.log(probs), 0.0)))
    )


def lincoln_petersen(n1, n2, m):
    return n1 * n2 / m
