"""Kraus channels, fault-location sampling and trajectory resolution of noise spots.

Every channel is unravelled the same way. The spot rate ``s`` is the largest
eigenvalue of ``sum_{i>=1} K_i^dag K_i``; a location becomes a noise spot with
probability ``s``. At a spot, error operator ``K_i`` is chosen with probability
``||K_i psi||^2 / s`` and the leftover mass goes to ``K_0``. Outside spots the
default operator ``K_0`` is applied. For a mixed-unitary channel ``K_0`` is a
scaled identity and the spot probabilities no longer depend on the state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .sparse_state import BranchingGateError, SparseState, ZeroStateError, make_key
from .topology import FaultSite, NodeId, Register, TreeShape

OMEGA = complex(np.cos(2 * np.pi / 3), np.sin(2 * np.pi / 3))
COMPLETENESS_TOL = 1e-10


class ChannelKind(enum.Enum):
    MIXED_UNITARY = "mixed-unitary"
    BIASED = "biased"


@dataclass(frozen=True, eq=False)
class KrausChannel:
    operators: tuple[np.ndarray, ...]
    kind: ChannelKind
    strength: float
    name: str
    labels: tuple[str, ...] = ()
    # per-operator lookup: table[i][value] -> (new value, amplitude factor) or None
    tables: tuple = field(init=False, repr=False)
    probabilities: tuple[float, ...] = field(init=False, repr=False)
    spot_rate: float = field(init=False)

    def __post_init__(self):
        ops = tuple(np.asarray(k, dtype=complex) for k in self.operators)
        object.__setattr__(self, "operators", ops)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"K{i}" for i in range(len(ops))))
        dim = ops[0].shape[0]
        total = sum(k.conj().T @ k for k in ops)
        if not np.allclose(total, np.eye(dim), atol=COMPLETENESS_TOL):
            raise ValueError(f"{self.name}: Kraus operators are not complete")
        tables = []
        for k in ops:
            nz = np.abs(k) > 1e-15
            if (nz.sum(axis=0) > 1).any():
                raise BranchingGateError(f"{self.name}: Kraus operator is branching")
            row = []
            for v in range(dim):
                rows = np.flatnonzero(nz[:, v])
                row.append((int(rows[0]), complex(k[rows[0], v])) if len(rows) else None)
            tables.append(tuple(row))
        object.__setattr__(self, "tables", tuple(tables))
        err = sum((k.conj().T @ k for k in ops[1:]), np.zeros((dim, dim)))
        s = float(np.max(np.linalg.eigvalsh(err))) if len(ops) > 1 else 0.0
        object.__setattr__(self, "spot_rate", min(max(s, 0.0), 1.0))
        if self.kind is ChannelKind.MIXED_UNITARY:
            probs = tuple(float(np.real(np.trace(k.conj().T @ k))) / dim for k in ops)
        else:
            probs = ()
        object.__setattr__(self, "probabilities", probs)

    @property
    def dim(self) -> int:
        return self.operators[0].shape[0]

    @property
    def default(self) -> np.ndarray:
        return self.operators[0]

    def conditional_probabilities(self, weights: Sequence[float]) -> np.ndarray:
        """Outcome distribution at a spot given the total branch weight on each basis value."""
        m = len(self.operators)
        q = np.zeros(m)
        if m == 1 or self.spot_rate == 0.0:
            q[0] = 1.0
            return q
        if self.kind is ChannelKind.MIXED_UNITARY:
            q[1:] = np.asarray(self.probabilities[1:]) / self.spot_rate
            q /= q.sum()
            return q
        w = np.asarray(weights, dtype=float)
        wt = w.sum()
        if wt <= 0:
            raise ZeroStateError("noise spot on a zero-weight state")
        for i in range(1, m):
            mag = np.abs(np.array([t[1] if t else 0.0 for t in self.tables[i]])) ** 2
            q[i] = float(mag @ w) / (self.spot_rate * wt)
        q[0] = max(0.0, 1.0 - q[1:].sum())
        q /= q.sum()
        return q


def _check_strength(x: float, name: str):
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {x}")


def qutrit_shift() -> np.ndarray:
    """Cyclic shift |W> -> |0> -> |1> -> |W>."""
    return np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], dtype=complex)


def qutrit_clock() -> np.ndarray:
    return np.diag([1, OMEGA, OMEGA ** 2])


def qutrit_depolarizing(eps: float) -> KrausChannel:
    _check_strength(eps, "epsilon")
    a1, a2 = qutrit_shift(), qutrit_clock()
    mp = np.linalg.matrix_power
    errors = [
        ("A1", a1), ("A2", a2), ("A1^2", mp(a1, 2)), ("A2^2", mp(a2, 2)),
        ("A1A2", a1 @ a2), ("A1^2A2", mp(a1, 2) @ a2), ("A1A2^2", a1 @ mp(a2, 2)),
        ("A1^2A2^2", mp(a1, 2) @ mp(a2, 2)),
    ]
    ops, labels = [np.sqrt(1 - eps) * np.eye(3)], ["I"]
    if eps > 0:
        ops += [np.sqrt(eps / 8) * u for _, u in errors]
        labels += [lab for lab, _ in errors]
    return KrausChannel(tuple(ops), ChannelKind.MIXED_UNITARY, eps, "qutrit-depolarizing", tuple(labels))


def _proj(i, j, dim=3):
    m = np.zeros((dim, dim), dtype=complex)
    m[i, j] = 1
    return m


def qutrit_damping(eps: float) -> KrausChannel:
    _check_strength(eps, "epsilon")
    W, Z, O = 0, 1, 2
    ops = [_proj(W, W) + np.sqrt(1 - eps) * (_proj(Z, Z) + _proj(O, O))]
    labels = ["E0"]
    if eps > 0:
        ops += [np.sqrt(eps) * _proj(W, Z), np.sqrt(eps) * _proj(W, O)]
        labels += ["W<-0", "W<-1"]
    return KrausChannel(tuple(ops), ChannelKind.BIASED, eps, "qutrit-damping", tuple(labels))


def qutrit_heating(eps: float) -> KrausChannel:
    _check_strength(eps, "epsilon")
    W, Z, O = 0, 1, 2
    ops = [_proj(Z, Z) + _proj(O, O) + np.sqrt(1 - eps) * _proj(W, W)]
    labels = ["E0"]
    if eps > 0:
        ops += [np.sqrt(eps / 2) * _proj(Z, W), np.sqrt(eps / 2) * _proj(O, W)]
        labels += ["0<-W", "1<-W"]
    return KrausChannel(tuple(ops), ChannelKind.BIASED, eps, "qutrit-heating", tuple(labels))


PAULIS = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def qubit_depolarizing(p: float) -> KrausChannel:
    _check_strength(p, "p")
    ops, labels = [np.sqrt(1 - p) * PAULIS["I"]], ["I"]
    if p > 0:
        for lab in "XYZ":
            ops.append(np.sqrt(p / 3) * PAULIS[lab])
            labels.append(lab)
    return KrausChannel(tuple(ops), ChannelKind.MIXED_UNITARY, p, "qubit-depolarizing", tuple(labels))


def qubit_amplitude_damping(gamma: float) -> KrausChannel:
    _check_strength(gamma, "gamma")
    ops = [np.array([[1, 0], [0, np.sqrt(1 - gamma)]], dtype=complex)]
    labels = ["E0"]
    if gamma > 0:
        ops.append(np.sqrt(gamma) * _proj(0, 1, 2))
        labels.append("E1")
    return KrausChannel(tuple(ops), ChannelKind.BIASED, gamma, "qubit-amplitude-damping", tuple(labels))


# --------------------------------------------------------------------------
# noise models and fault events
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Channels acting on tree qudits.

    Each entry of ``channels`` pairs a qutrit channel for address qudits with an
    optional qubit channel for every data bit. ``locations`` is ``"gate"`` (only
    qudits a layer operation touches in that timestep) or ``"all"`` (every tree
    qudit at every timestep).
    """

    channels: tuple[tuple[KrausChannel, KrausChannel | None], ...]
    locations: str = "gate"

    def __post_init__(self):
        if self.locations not in ("gate", "all"):
            raise ValueError(f"unknown location model {self.locations!r}")

    @classmethod
    def build(cls, channel: str = "depolarizing", epsilon: float = 0.0, gamma: float = 0.0,
              scope: str = "all-qudits", locations: str = "gate") -> "NoiseModel":
        """Standard configurations.

        ``depolarizing`` puts qutrit depolarizing on address qudits and qubit
        depolarizing on data bits; ``damping``/``heating`` act on address qudits
        only. A nonzero ``gamma`` adds qutrit damping as a second channel.
        """
        if scope not in ("all-qudits", "address-only"):
            raise ValueError(f"unknown noise scope {scope!r}")
        data_on = scope == "all-qudits"
        chans = []
        if channel == "depolarizing":
            if epsilon > 0:
                chans.append((qutrit_depolarizing(epsilon), qubit_depolarizing(epsilon) if data_on else None))
        elif channel == "damping":
            if epsilon > 0:
                chans.append((qutrit_damping(epsilon), None))
        elif channel == "heating":
            if epsilon > 0:
                chans.append((qutrit_heating(epsilon), None))
        else:
            raise ValueError(f"channel {channel!r} is not a tree channel")
        if gamma > 0:
            chans.append((qutrit_damping(gamma), None))
        return cls(tuple(chans), locations)

    @property
    def noiseless(self) -> bool:
        return not self.channels

    @property
    def mixed_unitary(self) -> bool:
        return all(a.kind is ChannelKind.MIXED_UNITARY and (d is None or d.kind is ChannelKind.MIXED_UNITARY)
                   for a, d in self.channels)

    def channel_for(self, event: "FaultEvent") -> KrausChannel:
        a, d = self.channels[event.channel]
        return a if event.site.register is Register.ADDRESS else d


class Resolution(enum.Enum):
    PENDING = "pending"
    SAMPLED_UNITARY = "sampled-unitary"
    QUASI_MEASURED = "quasi-measured"


@dataclass
class FaultEvent:
    site: FaultSite
    channel: int = 0
    outcome: int | None = None
    resolution: Resolution = Resolution.PENDING

    def sort_key(self):
        return self.site.sort_key() + (self.channel,)

    def resolve(self, outcome: int, kind: ChannelKind):
        if self.resolution is not Resolution.PENDING:
            raise RuntimeError(f"fault event at {self.site} resolved twice")
        self.outcome = outcome
        self.resolution = (Resolution.SAMPLED_UNITARY if kind is ChannelKind.MIXED_UNITARY
                           else Resolution.QUASI_MEASURED)


def forced_fault(timestep: int, layer: int, pos: int, outcome: int | None = None,
                 register: Register = Register.ADDRESS, bit: int = 0, channel: int = 0) -> FaultEvent:
    """Fault at a fixed site, optionally with a preset Kraus outcome (for tests)."""
    return FaultEvent(FaultSite(timestep, NodeId(layer, pos), register, bit), channel, outcome)


class LocationLayout:
    """Enumerates noise locations as contiguous blocks of (timestep, layer, register).

    A block covers all ``2**layer`` nodes of the layer (times ``k`` data bits
    for the data register), so an integer location index decodes in O(log).
    """

    def __init__(self, shape: TreeShape, touched: Sequence[Sequence[tuple[int, Register]]],
                 data_on: bool = True):
        self.shape = shape
        blocks = []
        for t, groups in enumerate(touched):
            for layer, reg in sorted(set(groups), key=lambda g: (g[0], g[1] is Register.DATA)):
                if reg is Register.DATA and not data_on:
                    continue
                width = 1 << layer
                count = width * (shape.k if reg is Register.DATA else 1)
                blocks.append((t, layer, reg, count))
        self.blocks = blocks
        self.offsets = np.cumsum([0] + [b[3] for b in blocks])
        self.size = int(self.offsets[-1])
        self.touched = [frozenset(g for g in groups if data_on or g[1] is Register.ADDRESS)
                        for groups in touched]

    @classmethod
    def full(cls, shape: TreeShape, schedule_length: int, data_on: bool = True) -> "LocationLayout":
        groups = [(l, r) for l in range(shape.n + 1) for r in (Register.ADDRESS, Register.DATA)]
        return cls(shape, [groups] * schedule_length, data_on)

    def decode(self, indices: np.ndarray) -> list[FaultSite]:
        idx = np.sort(np.asarray(indices, dtype=np.int64))
        b = np.searchsorted(self.offsets, idx, side="right") - 1
        out = []
        k = self.shape.k
        for i, bi in zip(idx.tolist(), b.tolist()):
            t, layer, reg, _ = self.blocks[bi]
            r = i - int(self.offsets[bi])
            if reg is Register.DATA:
                pos, bit = divmod(r, k)
            else:
                pos, bit = r, 0
            out.append(FaultSite(t, NodeId(layer, pos), reg, bit))
        return out


def sample_location_indices(size: int, rate: float, rng: np.random.Generator,
                            at_least_one: bool = False) -> np.ndarray:
    """Indices of locations hit by independent Bernoulli(``rate``) draws.

    With ``at_least_one`` the draw is conditioned on a nonempty result: the first
    hit is drawn from its truncated geometric law and later locations stay iid.
    """
    if size <= 0 or rate <= 0.0:
        if at_least_one:
            raise ValueError("cannot condition on a fault with zero rate")
        return np.empty(0, dtype=np.int64)
    if rate >= 1.0:
        return np.arange(size, dtype=np.int64)
    if not at_least_one:
        count = int(rng.binomial(size, rate))
        if count == 0:
            return np.empty(0, dtype=np.int64)
        return np.sort(rng.choice(size, size=count, replace=False))
    logq = np.log1p(-rate)
    total = -np.expm1(size * logq)
    u = rng.random()
    first = int(np.floor(np.log1p(-u * total) / logq))
    first = min(max(first, 0), size - 1)
    rest_size = size - first - 1
    rest = sample_location_indices(rest_size, rate, rng) + first + 1
    return np.concatenate([[first], rest]).astype(np.int64)


def no_fault_probability(size: int, rate: float) -> float:
    return float(np.exp(size * np.log1p(-rate))) if rate < 1 else float(size == 0)


def sample_streams(sizes: Sequence[int], rates: Sequence[float], rng: np.random.Generator,
                   at_least_one: bool = False) -> list[np.ndarray]:
    """Independent Bernoulli location draws for several streams.

    With ``at_least_one`` the joint draw is conditioned on a nonempty union:
    the first nonempty stream is chosen with its exact probability, earlier
    streams are empty and later ones unconstrained.
    """
    forced = None
    if at_least_one:
        pn = np.array([1 - no_fault_probability(sz, r) if r > 0 else 0.0 for sz, r in zip(sizes, rates)])
        first, none_before = [], 1.0
        for p in pn:
            first.append(none_before * p)
            none_before *= 1 - p
        total = sum(first)
        if total <= 0:
            raise ValueError("cannot condition on a fault with zero rate")
        forced = int(rng.choice(len(sizes), p=np.array(first) / total))
    out = []
    for j, (size, rate) in enumerate(zip(sizes, rates)):
        if forced is not None and j < forced:
            out.append(np.empty(0, dtype=np.int64))
            continue
        out.append(sample_location_indices(size, rate, rng, at_least_one=(j == forced)))
    return out


def fault_streams(layout: LocationLayout, model: NoiseModel) -> list[tuple[int, Register, float]]:
    """(channel index, register, spot rate) for every independent location stream."""
    streams = []
    for ci, (achan, dchan) in enumerate(model.channels):
        streams.append((ci, Register.ADDRESS, achan.spot_rate))
        if dchan is not None:
            streams.append((ci, Register.DATA, dchan.spot_rate))
    return streams


def sample_fault_events(layout: LocationLayout, model: NoiseModel, rng: np.random.Generator,
                        at_least_one: bool = False, invocations: int = 1) -> list:
    """Sample every channel of ``model`` over ``layout``; events sorted by site.

    With ``invocations > 1`` the locations of that many back-to-back runs are
    drawn jointly and a list of per-run event lists is returned.
    """
    streams = fault_streams(layout, model)
    subs = [_register_layout(layout, reg) for _, reg, _ in streams]
    idx = sample_streams([sub.size * invocations for sub in subs], [r for _, _, r in streams], rng,
                         at_least_one)
    runs: list[list[FaultEvent]] = [[] for _ in range(invocations)]
    for (ci, _, _), sub, ix in zip(streams, subs, idx):
        if not len(ix):
            continue
        inv, local = np.divmod(ix, sub.size)
        for r in np.unique(inv):
            for site in sub.decode(local[inv == r]):
                runs[int(r)].append(FaultEvent(site, ci))
    for run in runs:
        run.sort(key=FaultEvent.sort_key)
    return runs[0] if invocations == 1 else runs


def streams_no_fault_probability(layout: LocationLayout, model: NoiseModel, invocations: int = 1) -> float:
    p = 1.0
    for _, reg, rate in fault_streams(layout, model):
        p *= no_fault_probability(_register_layout(layout, reg).size * invocations, rate)
    return p


def _register_layout(layout: LocationLayout, reg: Register) -> LocationLayout:
    cache = layout.__dict__.setdefault("_by_register", {})
    if reg not in cache:
        sub = LocationLayout.__new__(LocationLayout)
        sub.shape = layout.shape
        sub.blocks = [b for b in layout.blocks if b[2] is reg]
        sub.offsets = np.cumsum([0] + [b[3] for b in sub.blocks])
        sub.size = int(sub.offsets[-1])
        sub.touched = layout.touched
        cache[reg] = sub
    return cache[reg]


def sample_fault_locations(schedule_length: int, shape: TreeShape, eps: float,
                           rng: np.random.Generator) -> list[FaultEvent]:
    """Bernoulli(``eps``) draw for every (tree qudit, timestep) pair, address and data."""
    _check_strength(eps, "epsilon")
    layout = LocationLayout.full(shape, schedule_length)
    idx = sample_location_indices(layout.size, eps, rng)
    return [FaultEvent(site) for site in layout.decode(idx)]


# --------------------------------------------------------------------------
# applying channels to branch records
# --------------------------------------------------------------------------
# A record is ``[bus_address, bus_data, control, spare, A, D, amplitude]`` where
# A and D are mutable sparse maps; see query_engine for the stepping loop.

AMP = 6


def _value(rec, site: FaultSite) -> int:
    f = flat_of(site)
    if site.register is Register.ADDRESS:
        return rec[4].get(f, 0)
    return (rec[5].get(f, 0) >> site.bit) & 1


def flat_of(site: FaultSite) -> int:
    return (1 << site.node.layer) - 1 + site.node.pos


def _apply_table(records: list, site: FaultSite, table, scale: complex = 1.0) -> list:
    f = flat_of(site)
    out = []
    if site.register is Register.ADDRESS:
        for rec in records:
            A = rec[4]
            res = table[A.get(f, 0)]
            if res is None:
                continue
            v, fac = res
            if v:
                A[f] = v
            else:
                A.pop(f, None)
            rec[AMP] *= fac * scale
            out.append(rec)
    else:
        b = site.bit
        mask = 1 << b
        for rec in records:
            D = rec[5]
            d = D.get(f, 0)
            res = table[(d >> b) & 1]
            if res is None:
                continue
            v, fac = res
            d = (d & ~mask) | (v << b)
            if d:
                D[f] = d
            else:
                D.pop(f, None)
            rec[AMP] *= fac * scale
            out.append(rec)
    return out


def merge_records(records: list) -> list:
    merged: dict = {}
    for rec in records:
        # a trailing marker keeps a record (the pruning representative) out of merges
        key = make_key(rec[0], rec[1], rec[2], rec[3], rec[4], rec[5]) + (len(rec) > AMP + 1,)
        if key in merged:
            merged[key][AMP] += rec[AMP]
        else:
            merged[key] = rec
    return [r for r in merged.values() if abs(r[AMP]) > 1e-300]


def _injective(table) -> bool:
    outs = [t[0] for t in table if t is not None]
    return len(outs) == len(set(outs))


def resolve_spot(records: list, event: FaultEvent, channel: KrausChannel,
                 rng: np.random.Generator) -> list:
    """Sample the outcome at a noise spot, apply it and renormalize.

    Consumes exactly one uniform draw from ``rng`` unless the outcome is preset.
    """
    if event.outcome is None:
        weights = np.zeros(channel.dim)
        if channel.kind is ChannelKind.BIASED:
            for rec in records:
                weights[_value(rec, event.site)] += abs(rec[AMP]) ** 2
        q = channel.conditional_probabilities(weights)
        u = rng.random()
        i = int(np.searchsorted(np.cumsum(q), u, side="right"))
        i = min(i, len(q) - 1)
        while q[i] == 0.0:  # guard against round-off landing on an empty outcome
            i -= 1
        event.resolve(i, channel.kind)
    i = event.outcome
    table = channel.tables[i]
    if channel.kind is ChannelKind.MIXED_UNITARY:
        p = channel.probabilities[i]
        out = _apply_table(records, event.site, table, 1 / np.sqrt(p))
        return out
    out = _apply_table(records, event.site, table)
    if not _injective(table):
        out = merge_records(out)
    w = sum(abs(r[AMP]) ** 2 for r in out)
    if w <= 0:
        raise ZeroStateError(f"outcome {i} at {event.site} annihilated the state")
    s = 1 / np.sqrt(w)
    for r in out:
        r[AMP] *= s
    return out


def state_to_records(state: SparseState) -> list:
    return [[a, d, c, s, dict(ta), dict(td), amp] for (a, d, c, s, ta, td), amp in state.branches.items()]


def records_to_state(shape: TreeShape, records: list, like: SparseState | None = None) -> SparseState:
    out: dict = {}
    for rec in records:
        key = make_key(rec[0], rec[1], rec[2], rec[3], rec[4], rec[5])
        out[key] = out.get(key, 0j) + rec[AMP]
    st = SparseState(shape) if like is None else like.with_branches({})
    st.branches = out
    return st.prune()


def apply_mixed_unitary(state: SparseState, event: FaultEvent, channel: KrausChannel,
                        rng: np.random.Generator) -> SparseState:
    """Sample ``U_i`` with probability ``p_i`` (from the full channel) and apply it."""
    if channel.kind is not ChannelKind.MIXED_UNITARY:
        raise ValueError("apply_mixed_unitary needs a mixed-unitary channel")
    if event.outcome is None:
        u = rng.random()
        i = int(np.searchsorted(np.cumsum(channel.probabilities), u, side="right"))
        event.resolve(min(i, len(channel.operators) - 1), channel.kind)
    recs = _apply_table(state_to_records(state), event.site, channel.tables[event.outcome],
                        1 / np.sqrt(channel.probabilities[event.outcome]))
    return records_to_state(state.shape, recs, state)


def quasi_measure(state: SparseState, event: FaultEvent, channel: KrausChannel,
                  rng: np.random.Generator) -> SparseState:
    """Resolve a noise spot of a biased channel by sampling a Kraus outcome."""
    if channel.kind is not ChannelKind.BIASED:
        raise ValueError("quasi_measure needs a biased channel")
    recs = resolve_spot(state_to_records(state), event, channel, rng)
    return records_to_state(state.shape, recs, state)
