"""Sparse branch representation of the bus (x) routing-tree pure state.

A branch is one computational-basis label with a complex amplitude. Tree
registers are stored as sparse maps holding only non-idle nodes (address idle
is ``W``, data idle is ``0``), so a branch costs O(path length) memory.

Branch labels are plain tuples so they hash cheaply::

    (bus_address, bus_data, control, spare, tree_address, tree_data)

where the two tree fields are sorted ``((flat, value), ...)`` tuples. ``spare``
holds the packed contents of a second bus register (used by error filtration)
and ``control`` the filtration control register; both are zero otherwise.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .topology import NodeId, TreeShape, address_bit

DROP_THRESHOLD = 1e-12


class QutritValue(enum.IntEnum):
    """Address qudit levels, ordered as the basis ``{|W>, |0>, |1>}``."""

    W = 0
    ZERO = 1
    ONE = 2


class BranchingGateError(ValueError):
    """A gate that maps a basis state onto a superposition was supplied."""


class ZeroStateError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Branch:
    amplitude: complex
    bus_address: int = 0
    bus_data: int = 0
    control: int = 0
    spare: int = 0
    tree_address: Mapping[int, int] = field(default_factory=dict)
    tree_data: Mapping[int, int] = field(default_factory=dict)

    @property
    def key(self) -> tuple:
        return make_key(self.bus_address, self.bus_data, self.control, self.spare,
                        self.tree_address, self.tree_data)


def make_key(bus_address, bus_data, control=0, spare=0, tree_address=None, tree_data=None):
    ta = tuple(sorted((f, v) for f, v in (tree_address or {}).items() if v))
    td = tuple(sorted((f, v) for f, v in (tree_data or {}).items() if v))
    return (bus_address, bus_data, control, spare, ta, td)


class SparseState:
    """Weighted collection of basis branches; colliding labels are merged."""

    def __init__(self, shape: TreeShape, branches: Mapping[tuple, complex] | None = None,
                 drop_threshold: float = DROP_THRESHOLD, norm_tolerance: float = 1e-9):
        self.shape = shape
        self.drop_threshold = drop_threshold
        self.norm_tolerance = norm_tolerance
        self.branches: dict[tuple, complex] = {}
        if branches:
            for key, amp in branches.items():
                self.add(key, amp)
            self.prune()

    # construction -----------------------------------------------------------
    @classmethod
    def from_amplitudes(cls, shape: TreeShape, amplitudes: Mapping[tuple[int, int], complex],
                        control: int = 0) -> "SparseState":
        """Bus-only state from ``{(address, data): amplitude}`` with an idle tree."""
        return cls(shape, {(a, d, control, 0, (), ()): complex(v) for (a, d), v in amplitudes.items()})

    @classmethod
    def uniform(cls, shape: TreeShape, addresses: Iterable[int], data: int = 0) -> "SparseState":
        addresses = list(addresses)
        amp = 1 / np.sqrt(len(addresses))
        return cls.from_amplitudes(shape, {(a, data): amp for a in addresses})

    @classmethod
    def from_branches(cls, shape: TreeShape, branches: Iterable[Branch]) -> "SparseState":
        state = cls(shape)
        for b in branches:
            state.add(b.key, b.amplitude)
        state.prune()
        return state

    def copy(self) -> "SparseState":
        new = SparseState(self.shape, drop_threshold=self.drop_threshold,
                          norm_tolerance=self.norm_tolerance)
        new.branches = dict(self.branches)
        return new

    def with_branches(self, branches: dict[tuple, complex]) -> "SparseState":
        new = SparseState(self.shape, drop_threshold=self.drop_threshold,
                          norm_tolerance=self.norm_tolerance)
        new.branches = branches
        return new

    # basic access -------------------------------------------------------------
    def add(self, key: tuple, amplitude: complex) -> None:
        self.branches[key] = self.branches.get(key, 0j) + amplitude

    def prune(self) -> "SparseState":
        thr = self.drop_threshold
        self.branches = {k: v for k, v in self.branches.items() if abs(v) > thr}
        return self

    def __len__(self):
        return len(self.branches)

    def __iter__(self):
        return iter(self.branches.items())

    def iter_branches(self):
        for key, amp in self.branches.items():
            a, d, c, s, ta, td = key
            yield Branch(amp, a, d, c, s, dict(ta), dict(td))

    def norm2(self) -> float:
        return float(sum(abs(v) ** 2 for v in self.branches.values()))

    def is_normalized(self) -> bool:
        return abs(self.norm2() - 1.0) <= self.norm_tolerance

    def bus_amplitudes(self) -> dict[tuple, complex]:
        """Amplitudes keyed by ``(address, data, control, spare)``; requires an idle tree."""
        out: dict[tuple, complex] = {}
        for (a, d, c, s, ta, td), amp in self.branches.items():
            if ta or td:
                raise ValueError("state has a non-idle tree")
            out[(a, d, c, s)] = out.get((a, d, c, s), 0j) + amp
        return out

    def addresses(self) -> set[int]:
        return {k[0] for k in self.branches}

    def __repr__(self):
        return f"SparseState(n={self.shape.n}, k={self.shape.k}, branches={len(self)})"


def normalize(state: SparseState) -> tuple[SparseState, float]:
    """Rescale to unit norm; returns the new state and the prior squared norm."""
    w = state.norm2()
    if w <= 0.0:
        raise ZeroStateError("cannot normalize the zero state")
    if w == 1.0:
        return state.copy(), 1.0
    s = 1.0 / np.sqrt(w)
    return state.with_branches({k: v * s for k, v in state.branches.items()}), w


def overlap(a: SparseState, b: SparseState) -> complex:
    """Inner product <a|b> over shared labels."""
    if len(a) > len(b):
        return complex(np.conj(overlap(b, a)))
    bb = b.branches
    return complex(sum(np.conj(v) * bb[k] for k, v in a.branches.items() if k in bb))


def bus_fidelity(state: SparseState, ideal_bus: SparseState) -> float:
    """Fidelity of the bus registers with the routing tree traced out.

    ``sum_Q |sum_{branches with tree Q} conj(ideal(bus)) * amp|^2``.
    """
    ideal = ideal_bus.bus_amplitudes()
    groups: dict[tuple, complex] = {}
    for (a, d, c, s, ta, td), amp in state.branches.items():
        ref = ideal.get((a, d, c, s))
        if ref is None:
            continue
        q = (ta, td)
        groups[q] = groups.get(q, 0j) + np.conj(ref) * amp
    f = float(sum(abs(v) ** 2 for v in groups.values()))
    return min(max(f, 0.0), 1.0)


def full_fidelity(state: SparseState, ideal: SparseState) -> float:
    """|<ideal|state>|^2 including the tree register."""
    return min(abs(overlap(ideal, state)) ** 2, 1.0)


# --------------------------------------------------------------------------
# non-branching gates on label coordinates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Coord:
    """One label coordinate.

    ``field`` is one of ``bus_address`` (index = address bit t, MSB first),
    ``bus_data`` / ``control`` (index = bit), ``tree_address`` (index = flat node)
    and ``tree_data`` (index = flat node, ``bit`` selects the data bit).
    """

    field: str
    index: int = 0
    bit: int = 0

    @property
    def dim(self) -> int:
        return 3 if self.field == "tree_address" else 2

    @classmethod
    def node(cls, field: str, node: NodeId, bit: int = 0) -> "Coord":
        return cls(field, node.flat, bit)


@dataclass(frozen=True)
class PermutationGate:
    targets: tuple[Coord, ...]
    table: dict  # input value tuple -> (output value tuple, phase) or None (annihilated)
    name: str = "gate"


def monomial_gate(matrix, targets, name: str = "gate") -> PermutationGate:
    """Build a gate from a matrix with at most one nonzero per row and column.

    The matrix acts on the product space of ``targets`` in row-major order
    (first target most significant).
    """
    targets = tuple(targets)
    m = np.asarray(matrix, dtype=complex)
    dims = [t.dim for t in targets]
    size = int(np.prod(dims))
    if m.shape != (size, size):
        raise ValueError(f"matrix shape {m.shape} does not match targets of dim {size}")
    nz = np.abs(m) > 1e-15
    if (nz.sum(axis=0) > 1).any() or (nz.sum(axis=1) > 1).any():
        raise BranchingGateError(f"{name} is a branching gate")
    table = {}
    for col, values in enumerate(itertools.product(*[range(d) for d in dims])):
        rows = np.flatnonzero(nz[:, col])
        if len(rows) == 0:
            table[values] = None
            continue
        row = int(rows[0])
        out = tuple(int(x) for x in np.unravel_index(row, dims))
        table[values] = (out, complex(m[row, col]))
    return PermutationGate(targets, table, name)


def x_gate(target: Coord) -> PermutationGate:
    if target.dim == 3:
        raise ValueError("x_gate acts on bits; use a qutrit operator for address qudits")
    return monomial_gate([[0, 1], [1, 0]], [target], "X")


def z_gate(target: Coord) -> PermutationGate:
    return monomial_gate(np.diag([1, -1]), [target], "Z")


def cz_gate(a: Coord, b: Coord) -> PermutationGate:
    return monomial_gate(np.diag([1, 1, 1, -1]), [a, b], "CZ")


def swap_gate(a: Coord, b: Coord) -> PermutationGate:
    if a.dim != b.dim:
        raise ValueError("swap needs coordinates of equal dimension")
    d = a.dim
    m = np.zeros((d * d, d * d))
    for i in range(d):
        for j in range(d):
            m[j * d + i, i * d + j] = 1
    return monomial_gate(m, [a, b], "SWAP")


def cswap_gate(control: Coord, a: Coord, b: Coord, when: Iterable[int] = (1,)) -> PermutationGate:
    """Swap ``a`` and ``b`` when ``control`` holds one of the values in ``when``."""
    when = set(when)
    sw = swap_gate(a, b).table
    dims = [control.dim, a.dim, b.dim]
    size = int(np.prod(dims))
    m = np.zeros((size, size))
    for c in range(control.dim):
        for (va, vb), ((oa, ob), _) in sw.items():
            src = (c, va, vb)
            dst = (c, oa, ob) if c in when else src
            m[np.ravel_multi_index(dst, dims), np.ravel_multi_index(src, dims)] = 1
    return monomial_gate(m, [control, a, b], "CSWAP")


def classical_x(target: Coord, condition: int) -> PermutationGate:
    """X applied only when the classical ``condition`` bit is set."""
    return monomial_gate([[0, 1], [1, 0]] if condition & 1 else np.eye(2), [target], "cX")


def _get(rec: list, c: Coord, n: int) -> int:
    f = c.field
    if f == "bus_address":
        return address_bit(rec[0], c.index, n)
    if f == "bus_data":
        return (rec[1] >> c.index) & 1
    if f == "control":
        return (rec[2] >> c.index) & 1
    if f == "tree_address":
        return rec[4].get(c.index, 0)
    if f == "tree_data":
        return (rec[5].get(c.index, 0) >> c.bit) & 1
    raise ValueError(f"unknown coordinate field {f!r}")


def _set(rec: list, c: Coord, n: int, v: int) -> None:
    f = c.field
    if f == "bus_address":
        shift = n - 1 - c.index
        rec[0] = (rec[0] & ~(1 << shift)) | (v << shift)
    elif f == "bus_data":
        rec[1] = (rec[1] & ~(1 << c.index)) | (v << c.index)
    elif f == "control":
        rec[2] = (rec[2] & ~(1 << c.index)) | (v << c.index)
    elif f == "tree_address":
        if v:
            rec[4][c.index] = v
        else:
            rec[4].pop(c.index, None)
    else:
        d = (rec[5].get(c.index, 0) & ~(1 << c.bit)) | (v << c.bit)
        if d:
            rec[5][c.index] = d
        else:
            rec[5].pop(c.index, None)


def apply_permutation(state: SparseState, gate: PermutationGate) -> SparseState:
    """Apply a non-branching gate to every branch independently."""
    n = state.shape.n
    out: dict[tuple, complex] = {}
    for key, amp in state.branches.items():
        a, d, c, s, ta, td = key
        rec = [a, d, c, s, dict(ta), dict(td)]
        values = tuple(_get(rec, t, n) for t in gate.targets)
        res = gate.table[values]
        if res is None:
            continue
        new_values, phase = res
        for t, v in zip(gate.targets, new_values):
            _set(rec, t, n, v)
        k2 = make_key(*rec)
        out[k2] = out.get(k2, 0j) + amp * phase
    return state.with_branches(out).prune()
