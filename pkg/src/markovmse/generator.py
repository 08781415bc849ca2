"""Model specifications and generator matrices of the list-recording chain.

An individual starts in the empty state and moves to ``J = I + {L_j}`` at
rate ``lambda_j * prod(mu_K)``, the product running over the free
interaction sets ``K`` with ``L_j in K`` and ``K`` contained in ``J``.
Interactions that are not free are neutral (fixed at 1).

Topologies:

* ``standard`` -- every subset of lists is reachable.
* ``absorbing`` -- once recorded on the absorbing list nothing else happens,
  so rows of states containing it are zero.
* ``ordered`` -- list j can only be joined after list i; states holding j
  without i are removed and interactions containing both are redundant.

Directional pairs replace the symmetric ``mu_ij`` by two multipliers:
``mu_{i->j}`` scales the rate of joining ``L_j`` when ``L_i`` is already
held.  Per-list windows restrict when a list can record (see
:mod:`markovmse.matexp`).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .liststate import check_k, mask_from_lists, ordered_states

TOPOLOGIES = ("standard", "absorbing", "ordered")

Interaction = Tuple[int, ...]


def parse_interactions(text: str) -> Tuple[Interaction, ...]:
    """Parse ``'14,23,124'`` into ``((1, 4), (2, 3), (1, 2, 4))``.

    Tokens are comma separated.  A token is read digit by digit unless it
    contains ``-`` or ``.``, which allows list numbers above 9
    (``'3-10'``).
    """
    out = []
    for tok in text.replace(" ", "").split(","):
        if not tok or tok.lower() == "none":
            continue
        if "-" in tok or "." in tok:
            parts = tok.replace(".", "-").split("-")
            out.append(tuple(sorted(int(p) for p in parts)))
        else:
            out.append(tuple(sorted(int(c) for c in tok)))
    return tuple(out)


def format_interaction(K: Sequence[int]) -> str:
    if any(i > 9 for i in K):
        return "-".join(str(i) for i in K)
    return "".join(str(i) for i in K)


def interaction_key(K: Sequence[int]):
    return (len(K), tuple(K))


def normalize_interactions(sets: Iterable[Iterable[int]]) -> Tuple[Interaction, ...]:
    uniq = {tuple(sorted(int(i) for i in K)) for K in sets}
    for K in uniq:
        if len(set(K)) != len(K):
            raise ValueError(f"interaction {K} repeats a list")
    return tuple(sorted(uniq, key=interaction_key))


def is_hierarchical(sets: Iterable[Interaction], implied: Iterable[Interaction] = ()) -> bool:
    """True when every size >= 2 proper subset of each set is also present.

    ``implied`` holds sets that count as present without being listed
    (pairs carried by directional multipliers).
    """
    present = {tuple(K) for K in sets} | {tuple(sorted(K)) for K in implied}
    for K in present:
        for r in range(2, len(K)):
            for sub in itertools.combinations(K, r):
                if sub not in present:
                    return False
    return True


@dataclass(frozen=True)
class ModelSpec:
    """List topology plus the set of free (non-neutral) interactions.

    List numbers are 1-based.  ``windows`` holds one ``(start, end)``
    recording interval per list inside ``[0, 1]``; ``None`` means every list
    records over the whole period.
    """

    k: int
    topology: str = "standard"
    absorbing: Optional[int] = None
    ordered: Optional[Tuple[int, int]] = None
    interactions: Tuple[Interaction, ...] = ()
    directional: Tuple[Tuple[int, int], ...] = ()
    windows: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        check_k(self.k)
        k = self.k
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.topology == "absorbing":
            if self.absorbing is None or not 1 <= self.absorbing <= k:
                raise ValueError("absorbing topology needs a list number in 1..k")
        elif self.absorbing is not None:
            raise ValueError("absorbing list given for a non-absorbing topology")
        if self.topology == "ordered":
            if self.ordered is None:
                raise ValueError("ordered topology needs a pair (i, j)")
            i, j = (int(x) for x in self.ordered)
            if i == j or not (1 <= i <= k and 1 <= j <= k):
                raise ValueError(f"invalid ordered pair {self.ordered}")
            object.__setattr__(self, "ordered", (i, j))
        elif self.ordered is not None:
            raise ValueError("ordered pair given for a non-ordered topology")

        inter = normalize_interactions(self.interactions)
        for K in inter:
            if len(K) < 2:
                raise ValueError(f"interaction {K} must involve at least two lists")
            if K[0] < 1 or K[-1] > k:
                raise ValueError(f"interaction {K} refers to a list outside 1..{k}")
            if len(K) == k:
                raise ValueError("the full interaction is fixed to 1 for identifiability")
            if self.ordered is not None and set(self.ordered) <= set(K):
                raise ValueError(
                    f"interaction {format_interaction(K)} is redundant for ordered lists "
                    f"{self.ordered[0]}->{self.ordered[1]}"
                )
        object.__setattr__(self, "interactions", inter)

        directional = tuple(sorted({(int(a), int(b)) for a, b in self.directional}))
        for a, b in directional:
            if a == b or not (1 <= a <= k and 1 <= b <= k):
                raise ValueError(f"invalid directional pair {a}->{b}")
            if tuple(sorted((a, b))) in inter:
                raise ValueError(
                    f"pair {a}{b} declared both as a symmetric and a directional interaction"
                )
            if self.ordered is not None and {a, b} == set(self.ordered):
                raise ValueError("directional interaction on an ordered pair is redundant")
        object.__setattr__(self, "directional", directional)

        implied = {tuple(sorted(p)) for p in directional}
        if not is_hierarchical(inter, implied):
            raise ValueError("interactions do not satisfy the hierarchical principle")

        if self.windows is not None:
            win = tuple((float(a), float(b)) for a, b in self.windows)
            if len(win) != k:
                raise ValueError("one window per list is required")
            for a, b in win:
                if not (0.0 <= a < b <= 1.0):
                    raise ValueError(f"invalid window [{a}, {b}]")
            object.__setattr__(self, "windows", win)

        # the independence chain is always expressible (k=1 included); fitting
        # it still needs enough cells, which the fitter checks
        extra = self.interactions or self.directional
        if extra and self.n_params > self.n_observable:
            raise ValueError(
                f"{self.n_params} parameters exceed the {self.n_observable} observable cells"
            )

    # construction helpers
    @classmethod
    def standard(cls, k, interactions=(), **kw) -> "ModelSpec":
        return cls(k, "standard", interactions=tuple(interactions), **kw)

    @classmethod
    def absorbing_list(cls, k, i, interactions=(), **kw) -> "ModelSpec":
        return cls(k, "absorbing", absorbing=i, interactions=tuple(interactions), **kw)

    @classmethod
    def ordered_pair(cls, k, i, j, interactions=(), **kw) -> "ModelSpec":
        return cls(k, "ordered", ordered=(i, j), interactions=tuple(interactions), **kw)

    def with_interactions(self, interactions) -> "ModelSpec":
        return ModelSpec(
            self.k, self.topology, self.absorbing, self.ordered,
            tuple(interactions), self.directional, self.windows,
        )

    @property
    def states(self) -> list[int]:
        """Masks of the reachable state space, in cardinality-then-mask order."""
        removed = set(self.structural_zero_masks())
        return [m for m in ordered_states(self.k) if m not in removed]

    def structural_zero_masks(self) -> list[int]:
        if self.topology != "ordered":
            return []
        i, j = self.ordered
        bi, bj = 1 << (i - 1), 1 << (j - 1)
        return [m for m in range(1 << self.k) if m & bj and not m & bi]

    @property
    def n_observable(self) -> int:
        return len(self.states) - 1

    @property
    def param_names(self) -> list[str]:
        names = [f"lambda{i + 1}" for i in range(self.k)]
        names += ["mu" + format_interaction(K) for K in self.interactions]
        names += [f"mu{a}->{b}" for a, b in self.directional]
        return names

    @property
    def n_params(self) -> int:
        """Free parameters including N."""
        return 1 + self.k + len(self.interactions) + len(self.directional)

    def describe(self) -> str:
        topo = self.topology
        if self.topology == "absorbing":
            topo += f"(L{self.absorbing})"
        elif self.topology == "ordered":
            topo += f"(L{self.ordered[0]}->L{self.ordered[1]})"
        ints = ",".join(format_interaction(K) for K in self.interactions) or "none"
        extra = ""
        if self.directional:
            extra = " directional=" + ",".join(f"{a}->{b}" for a, b in self.directional)
        return f"{topo} interactions={ints}{extra}"

    def to_dict(self) -> dict:
        d = {"k": self.k, "topology": self.topology}
        if self.absorbing is not None:
            d["absorbing"] = self.absorbing
        if self.ordered is not None:
            d["ordered"] = list(self.ordered)
        d["interactions"] = [list(K) for K in self.interactions]
        if self.directional:
            d["directional"] = [list(p) for p in self.directional]
        if self.windows is not None:
            d["windows"] = [list(w) for w in self.windows]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(
            int(d["k"]),
            d.get("topology", "standard"),
            d.get("absorbing"),
            tuple(d["ordered"]) if d.get("ordered") is not None else None,
            tuple(tuple(K) for K in d.get("interactions", ())),
            tuple(tuple(p) for p in d.get("directional", ())),
            tuple(tuple(w) for w in d["windows"]) if d.get("windows") is not None else None,
        )


@dataclass
class MarkovParams:
    """Transition rates per unit recording time and interaction multipliers."""

    lambdas: np.ndarray
    mus: Dict[Interaction, float] = field(default_factory=dict)
    directional_mus: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        if np.any(self.lambdas < 0) or not np.all(np.isfinite(self.lambdas)):
            raise ValueError("transition rates must be finite and non-negative")
        self.mus = {tuple(sorted(K)): float(v) for K, v in self.mus.items()}
        self.directional_mus = {tuple(p): float(v) for p, v in self.directional_mus.items()}
        for v in list(self.mus.values()) + list(self.directional_mus.values()):
            if not (v > 0 and np.isfinite(v)):
                raise ValueError("interaction multipliers must be finite and positive")

    @property
    def k(self) -> int:
        return len(self.lambdas)

    def vector(self, spec: ModelSpec) -> np.ndarray:
        """Parameter values in ``spec.param_names`` order (neutral where unset)."""
        if self.k != spec.k:
            raise ValueError(f"params have {self.k} rates but the spec has k={spec.k}")
        extra = set(self.mus) - set(spec.interactions)
        for K in extra:
            if self.mus[K] != 1.0:
                raise ValueError(f"mu{format_interaction(K)} is not free in the spec but is != 1")
        extra_d = set(self.directional_mus) - set(spec.directional)
        for p in extra_d:
            if self.directional_mus[p] != 1.0:
                raise ValueError(f"directional mu{p[0]}->{p[1]} not declared in the spec")
        vals = list(self.lambdas)
        vals += [self.mus.get(K, 1.0) for K in spec.interactions]
        vals += [self.directional_mus.get(p, 1.0) for p in spec.directional]
        return np.array(vals, dtype=float)

    @classmethod
    def from_vector(cls, spec: ModelSpec, values: Sequence[float]) -> "MarkovParams":
        values = np.asarray(values, dtype=float)
        k = spec.k
        ni = len(spec.interactions)
        mus = dict(zip(spec.interactions, values[k:k + ni]))
        dmus = dict(zip(spec.directional, values[k + ni:]))
        return cls(values[:k].copy(), mus, dmus)

    def to_dict(self) -> dict:
        return {
            "lambdas": [float(x) for x in self.lambdas],
            "mus": {format_interaction(K): v for K, v in self.mus.items()},
            "directional_mus": {f"{a}->{b}": v for (a, b), v in self.directional_mus.items()},
        }


@dataclass(frozen=True)
class Chain:
    """Compiled transition structure of a spec.

    Each edge ``e`` goes from ``states[src[e]]`` to ``states[dst[e]]`` by
    joining list ``new[e]`` (0-based); ``incidence[a, e]`` is 1 when
    parameter ``a`` multiplies the rate of edge ``e``.
    """

    states: Tuple[int, ...]
    src: np.ndarray
    dst: np.ndarray
    new: np.ndarray
    incidence: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.states)

    def rates(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return np.prod(np.where(self.incidence > 0, values[:, None], 1.0), axis=0)

    def rates_from_log(self, theta: np.ndarray) -> np.ndarray:
        return np.exp(theta @ self.incidence)

    def matrix(self, rates: np.ndarray, active: Optional[np.ndarray] = None) -> np.ndarray:
        Q = np.zeros((self.dim, self.dim))
        if active is None:
            Q[self.src, self.dst] = rates
        else:
            Q[self.src[active], self.dst[active]] = rates[active]
        Q[np.diag_indices(self.dim)] = -Q.sum(axis=1)
        return Q


@lru_cache(maxsize=512)
def compile_chain(spec: ModelSpec) -> Chain:
    states = spec.states
    index = {m: i for i, m in enumerate(states)}
    k = spec.k
    inter_masks = [mask_from_lists(K) for K in spec.interactions]
    dir_pairs = [(1 << (a - 1), 1 << (b - 1)) for a, b in spec.directional]
    absorbing_bit = 1 << (spec.absorbing - 1) if spec.absorbing else 0
    src, dst, new, cols = [], [], [], []
    for I in states:
        if I & absorbing_bit:
            continue
        for j in range(k):
            bit = 1 << j
            if I & bit:
                continue
            J = I | bit
            if J not in index:
                continue
            col = np.zeros(spec.n_params - 1)
            col[j] = 1.0
            for a, Km in enumerate(inter_masks):
                if Km & bit and Km & J == Km:
                    col[k + a] = 1.0
            for a, (from_bit, to_bit) in enumerate(dir_pairs):
                if to_bit == bit and I & from_bit:
                    col[k + len(inter_masks) + a] = 1.0
            src.append(index[I])
            dst.append(index[J])
            new.append(j)
            cols.append(col)
    incidence = np.array(cols).T if cols else np.zeros((spec.n_params - 1, 0))
    return Chain(
        tuple(states),
        np.array(src, dtype=int),
        np.array(dst, dtype=int),
        np.array(new, dtype=int),
        incidence,
    )


@dataclass(frozen=True)
class GeneratorMatrix:
    """Dense rate matrix over ``states`` (masks in cardinality order)."""

    states: Tuple[int, ...]
    entries: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.states)

    def index(self, mask: int) -> int:
        return self.states.index(mask)

    def rate(self, I: Iterable[int], J: Iterable[int]) -> float:
        """Entry ``q_IJ`` addressed by 1-based list numbers."""
        return float(self.entries[self.index(mask_from_lists(I)), self.index(mask_from_lists(J))])


def build_generator(params: MarkovParams, spec: ModelSpec) -> GeneratorMatrix:
    """Generator matrix for any topology."""
    chain = compile_chain(spec)
    Q = chain.matrix(chain.rates(params.vector(spec)))
    return GeneratorMatrix(chain.states, Q)


def _require(spec: ModelSpec, topology: str):
    if spec.topology != topology:
        raise ValueError(f"expected a {topology} spec, got {spec.topology}")


def build_standard(params: MarkovParams, spec: ModelSpec) -> GeneratorMatrix:
    _require(spec, "standard")
    return build_generator(params, spec)


def build_absorbing(params: MarkovParams, spec: ModelSpec) -> GeneratorMatrix:
    _require(spec, "absorbing")
    return build_generator(params, spec)


def build_ordered(params: MarkovParams, spec: ModelSpec) -> GeneratorMatrix:
    _require(spec, "ordered")
    return build_generator(params, spec)


def build_directional(params: MarkovParams, spec: ModelSpec) -> GeneratorMatrix:
    if not spec.directional:
        raise ValueError("spec declares no directional pairs")
    return build_generator(params, spec)
