"""States over k lists and the observed multi-list contingency table.

A state is a subset of lists stored as an integer bitmask: bit ``i`` is set
when list ``L_{i+1}`` is in the subset.  All user-facing list numbers are
1-based; masks and array indices are 0-based.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

MAX_LISTS = 12


class TableFormatError(ValueError):
    """Raised when a delimited table cannot be parsed."""


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def check_k(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ValueError(f"number of lists must be a positive integer, got {k!r}")
    if k > MAX_LISTS:
        raise ValueError(
            f"at most {MAX_LISTS} lists are supported (dense 2^k matrices), got {k}"
        )


def ordered_states(k: int) -> list[int]:
    """All 2^k masks sorted by cardinality, then by mask value."""
    check_k(k)
    return sorted(range(1 << k), key=lambda m: (popcount(m), m))


def mask_from_lists(lists: Iterable[int]) -> int:
    """Convert 1-based list numbers to a bitmask."""
    mask = 0
    for i in lists:
        if i < 1:
            raise ValueError(f"list numbers are 1-based, got {i}")
        mask |= 1 << (i - 1)
    return mask


def lists_from_mask(mask: int) -> Tuple[int, ...]:
    """Convert a bitmask to sorted 1-based list numbers."""
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i + 1)
        mask >>= 1
        i += 1
    return tuple(out)


def state_label(mask: int) -> str:
    """Compact label such as ``'124'``; the empty state is ``'0'``."""
    if mask == 0:
        return "0"
    return "".join(str(i) if i < 10 else f"({i})" for i in lists_from_mask(mask))


@dataclass(frozen=True)
class State:
    """A subset of the k lists."""

    mask: int
    k: int

    def __post_init__(self):
        check_k(self.k)
        if not 0 <= self.mask < (1 << self.k):
            raise ValueError(f"mask {self.mask} out of range for k={self.k}")

    @classmethod
    def from_lists(cls, lists: Iterable[int], k: int) -> "State":
        return cls(mask_from_lists(lists), k)

    @property
    def size(self) -> int:
        return popcount(self.mask)

    @property
    def lists(self) -> Tuple[int, ...]:
        return lists_from_mask(self.mask)

    def __contains__(self, list_number: int) -> bool:
        return bool(self.mask >> (list_number - 1) & 1)

    def __str__(self) -> str:
        return state_label(self.mask)


@dataclass(frozen=True)
class ContingencyTable:
    """Observed counts ``n_I`` for every observable non-empty state.

    ``counts`` maps masks to counts.  Observable states missing from the
    mapping are sampling zeros and are filled in with 0.  States listed in
    ``structural_zeros`` are impossible under the declared list topology
    and take no part in any likelihood.
    """

    k: int
    counts: Mapping[int, int]
    structural_zeros: frozenset = field(default_factory=frozenset)
    list_labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        check_k(self.k)
        full = {}
        sz = frozenset(int(m) for m in self.structural_zeros)
        for m in sz:
            if not 0 < m < (1 << self.k):
                raise ValueError(f"structural zero {m} out of range")
        for m, c in self.counts.items():
            m = int(m)
            if not 0 < m < (1 << self.k):
                raise ValueError(f"cell mask {m} out of range for k={self.k}")
            if m in sz:
                if c:
                    raise ValueError(
                        f"cell {state_label(m)} is a structural zero but has count {c}"
                    )
                continue
            if int(c) != c or c < 0:
                raise ValueError(f"count for cell {state_label(m)} must be a non-negative integer")
            full[m] = int(c)
        for m in range(1, 1 << self.k):
            if m not in sz:
                full.setdefault(m, 0)
        object.__setattr__(self, "counts", dict(sorted(full.items())))
        object.__setattr__(self, "structural_zeros", sz)
        if self.list_labels is not None:
            labels = tuple(self.list_labels)
            if len(labels) != self.k:
                raise ValueError("list_labels must have one entry per list")
            object.__setattr__(self, "list_labels", labels)

    @property
    def observable_states(self) -> list[int]:
        """Observable non-empty masks in cardinality-then-mask order."""
        return [m for m in ordered_states(self.k) if m and m not in self.structural_zeros]

    def count_vector(self, states: Optional[Sequence[int]] = None) -> np.ndarray:
        if states is None:
            states = self.observable_states
        return np.array([self.counts[m] for m in states], dtype=float)

    @property
    def n(self) -> int:
        return total_observed(self)

    def marginal(self, list_number: int) -> int:
        """Number of observed individuals recorded on the given 1-based list."""
        bit = 1 << (list_number - 1)
        return sum(c for m, c in self.counts.items() if m & bit)

    def __getitem__(self, lists: Iterable[int]) -> int:
        mask = mask_from_lists(lists)
        if mask in self.structural_zeros:
            raise KeyError(f"cell {state_label(mask)} is a structural zero")
        return self.counts[mask]

    def with_structural_zeros(self, masks: Iterable[int]) -> "ContingencyTable":
        return ContingencyTable(
            self.k, self.counts, self.structural_zeros | frozenset(masks), self.list_labels
        )


def total_observed(table: ContingencyTable) -> int:
    """Total number of observed individuals, ``n = sum_I n_I``."""
    return int(sum(table.counts.values()))


def parse_table(text: str, k: Optional[int] = None) -> ContingencyTable:
    """Parse comma-separated multi-list counts.

    The header row is ``L1,...,Lk,count`` (any list names are accepted and
    kept as labels).  Body rows hold k binary indicators and a count.
    ``#`` lines are comments.  An all-zeros row is allowed only with a
    missing count (``?``, ``NA`` or empty).
    """
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise TableFormatError("table is empty")
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = [h.strip() for h in next(reader)]
    if len(header) < 2 or header[-1].lower() != "count":
        raise TableFormatError("header must end with a 'count' column")
    ncols = len(header) - 1
    if k is None:
        k = ncols
    elif ncols != k:
        raise TableFormatError(f"header has {ncols} list columns, expected {k}")
    try:
        check_k(k)
    except ValueError as exc:
        raise TableFormatError(str(exc)) from None
    counts: dict[int, int] = {}
    for lineno, row in enumerate(reader, start=2):
        row = [c.strip() for c in row]
        if len(row) != k + 1:
            raise TableFormatError(f"row {lineno}: expected {k + 1} fields, got {len(row)}")
        mask = 0
        for i, flag in enumerate(row[:k]):
            if flag not in ("0", "1"):
                raise TableFormatError(f"row {lineno}: indicator {flag!r} is not 0 or 1")
            if flag == "1":
                mask |= 1 << i
        raw = row[k]
        if mask == 0:
            if raw in ("", "?", "NA", "na", "nan"):
                continue
            raise TableFormatError(f"row {lineno}: the unobserved all-zeros cell cannot have a count")
        if mask in counts:
            raise TableFormatError(f"row {lineno}: duplicate cell {state_label(mask)}")
        try:
            value = int(raw)
        except ValueError:
            raise TableFormatError(f"row {lineno}: count {raw!r} is not an integer") from None
        if value < 0:
            raise TableFormatError(f"row {lineno}: negative count {value}")
        counts[mask] = value
    default = [f"L{i + 1}" for i in range(k)]
    labels = tuple(header[:-1]) if tuple(header[:-1]) != tuple(default) else None
    return ContingencyTable(k, counts, list_labels=labels)


def serialize_table(table: ContingencyTable) -> str:
    """Inverse of :func:`parse_table`; structural zeros are written as ``0``."""
    names = table.list_labels or tuple(f"L{i + 1}" for i in range(table.k))
    out = [",".join(names) + ",count"]
    for m in ordered_states(table.k):
        if m == 0:
            continue
        flags = ",".join(str(m >> i & 1) for i in range(table.k))
        out.append(f"{flags},{table.counts.get(m, 0)}")
    return "\n".join(out) + "\n"


def read_table(path) -> ContingencyTable:
    with open(path, encoding="utf-8") as fh:
        return parse_table(fh.read())


def load_dataset(name: str) -> ContingencyTable:
    """Bundled datasets: ``'stroke'`` (k=5) and ``'drug'`` (k=3)."""
    try:
        text = resources.files("markovmse.data").joinpath(f"{name}.csv").read_text("utf-8")
    except FileNotFoundError:
        raise ValueError(f"unknown dataset {name!r}; choose 'stroke' or 'drug'") from None
    return parse_table(text)


def mark_structural_zeros(table: ContingencyTable, spec) -> ContingencyTable:
    """Move the cells made impossible by an ordered topology to structural zeros.

    For an ordered pair i -> j every state holding ``L_j`` without ``L_i``
    is impossible; such cells must have an observed count of zero.
    """
    if spec.k != table.k:
        raise ValueError(f"spec has k={spec.k} but table has k={table.k}")
    impossible = spec.structural_zero_masks()
    bad = [m for m in impossible if table.counts.get(m, 0)]
    if bad:
        cells = ", ".join(state_label(m) for m in bad)
        raise ValueError(f"cells {cells} are impossible under the declared topology but have counts")
    return table.with_structural_zeros(impossible)
