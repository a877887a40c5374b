"""Binary routing tree geometry: node indexing, routing paths and fault pruning sets.

Nodes are stored top-down, left-to-right; layer ``l`` holds ``2**l`` nodes whose
flat indices start at ``2**l - 1``. Address bit ``a_0`` is the most significant
bit and steers the root; bit value 0 selects the left child.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable


class Register(enum.Enum):
    ADDRESS = "address"
    DATA = "data"


@dataclass(frozen=True, order=True)
class NodeId:
    layer: int
    pos: int

    def __post_init__(self):
        if self.layer < 0 or not 0 <= self.pos < (1 << self.layer):
            raise ValueError(f"invalid node ({self.layer}, {self.pos})")

    @property
    def flat(self) -> int:
        return flat_index(self)

    @classmethod
    def from_flat(cls, index: int) -> "NodeId":
        if index < 0:
            raise ValueError(f"negative node index {index}")
        layer = (index + 1).bit_length() - 1
        return cls(layer, index - (1 << layer) + 1)


@dataclass(frozen=True)
class TreeShape:
    n: int
    k: int = 1

    def __post_init__(self):
        if self.n < 1 or self.k < 1:
            raise ValueError(f"need n >= 1 and k >= 1, got n={self.n}, k={self.k}")

    @property
    def num_cells(self) -> int:
        return 1 << self.n

    @property
    def num_nodes(self) -> int:
        return (1 << (self.n + 1)) - 1

    @property
    def first_leaf(self) -> int:
        return (1 << self.n) - 1


@dataclass(frozen=True)
class FaultSite:
    """A (qudit, timestep) location. ``bit`` selects the data bit when k > 1."""

    timestep: int
    node: NodeId
    register: Register = Register.ADDRESS
    bit: int = 0

    def sort_key(self):
        return (self.timestep, self.node.flat, self.register is Register.DATA, self.bit)


def flat_index(node: NodeId) -> int:
    """Flat storage index of ``node``: ``2**layer - 1 + pos``."""
    if node.layer < 0 or not 0 <= node.pos < (1 << node.layer):
        raise ValueError(f"invalid node ({node.layer}, {node.pos})")
    return (1 << node.layer) - 1 + node.pos


def layer_of(flat: int) -> int:
    return (flat + 1).bit_length() - 1


def address_bit(address: int, t: int, n: int) -> int:
    """Bit ``a_t`` of ``address`` (``a_0`` is the most significant)."""
    return (address >> (n - 1 - t)) & 1


def routing_path(address: int, shape: TreeShape) -> list[tuple[NodeId, int]]:
    """Routing nodes visited by ``address`` with the direction taken at each.

    Entry ``t`` is the layer-``t`` node reached by following bits ``a_0..a_{t-1}``
    from the root, paired with ``a_t``.
    """
    n = shape.n
    if not 0 <= address < (1 << n):
        raise ValueError(f"address {address} out of range for n={n}")
    return [(NodeId(t, address >> (n - t)), address_bit(address, t, n)) for t in range(n)]


def path_flats(address: int, n: int) -> list[int]:
    """Flat indices of every node on the path of ``address``, root to leaf (n + 1 nodes)."""
    return [(1 << l) - 1 + (address >> (n - l)) for l in range(n + 1)]


def affected_range(fault: FaultSite | NodeId, shape: TreeShape) -> tuple[int, int]:
    """Closed interval of addresses whose routing path enters the fault node's subtree."""
    node = fault.node if isinstance(fault, FaultSite) else fault
    if node.layer > shape.n:
        raise ValueError(f"node layer {node.layer} deeper than n={shape.n}")
    width = 1 << (shape.n - node.layer)
    lo = width * node.pos
    return lo, lo + width - 1


def unreliable_set(faults: Iterable[FaultSite | NodeId], shape: TreeShape) -> set[int]:
    """Union of the affected ranges of all faults."""
    out: set[int] = set()
    for lo, hi in merged_ranges(faults, shape):
        out.update(range(lo, hi + 1))
    return out


def merged_ranges(faults: Iterable[FaultSite | NodeId], shape: TreeShape) -> list[tuple[int, int]]:
    """Affected ranges of ``faults`` merged into disjoint sorted intervals."""
    ranges = sorted({affected_range(f, shape) for f in faults})
    merged: list[tuple[int, int]] = []
    for lo, hi in ranges:
        if merged and lo <= merged[-1][1] + 1:
            if hi > merged[-1][1]:
                merged[-1] = (merged[-1][0], hi)
        else:
            merged.append((lo, hi))
    return merged


def in_ranges(address: int, ranges: list[tuple[int, int]]) -> bool:
    # ranges are few; a linear scan beats bisect bookkeeping here
    for lo, hi in ranges:
        if lo <= address <= hi:
            return True
    return False
