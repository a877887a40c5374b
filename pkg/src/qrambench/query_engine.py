"""Bucket-brigade query schedule and the noiseless, full and pruned simulators.

The schedule has three stages. Address setting sends bit ``a_t`` from the bus
into the root, routes it down ``t`` layers and deposits it into the layer-``t``
node with an internal swap. Data fetch sends the bus data down the active path,
XORs the classical cell into the leaf and brings it back. Uncompute replays the
address-setting stage backwards, which returns the tree to idle.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .noise_model import (
    AMP, ChannelKind, FaultEvent, LocationLayout, NoiseModel, resolve_spot,
    sample_fault_events, streams_no_fault_probability,
)
from .sparse_state import SparseState, ZeroStateError, bus_fidelity, make_key
from .topology import Register, TreeShape, in_ranges, merged_ranges


class OpKind(enum.Enum):
    INJECT_ADDRESS = "inject-address"
    INJECT_DATA = "inject-data"
    ROUTE = "route"
    INTERNAL_SWAP = "internal-swap"
    MEMORY = "memory-access"


@dataclass(frozen=True)
class LayerOp:
    """One batched operation on every node of ``layer``.

    ``span`` is the width of the address range hanging below each node of the
    layer, so node ``p`` covers addresses ``[span * p, span * (p + 1) - 1]``.
    """

    kind: OpKind
    layer: int = 0
    bit: int = 0
    span: int = 1

    def touched(self, n: int) -> frozenset:
        A, D = Register.ADDRESS, Register.DATA
        k = self.kind
        if k in (OpKind.INJECT_ADDRESS, OpKind.INJECT_DATA):
            return frozenset({(0, D)})
        if k is OpKind.ROUTE:
            return frozenset({(self.layer, A), (self.layer, D), (self.layer + 1, D)})
        if k is OpKind.INTERNAL_SWAP:
            out = {(self.layer, A), (self.layer, D)}
            if self.layer:
                out.add((self.layer - 1, A))
            return frozenset(out)
        return frozenset({(n - 1, A), (n, D)})


@dataclass
class QuerySchedule:
    shape: TreeShape
    timesteps: tuple[tuple[LayerOp, ...], ...]
    stages: tuple[int, int, int]
    _layouts: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.timesteps)

    @property
    def tau(self) -> int:
        return len(self.timesteps)

    def touched(self, t: int) -> frozenset:
        out = set()
        for op in self.timesteps[t]:
            out |= op.touched(self.shape.n)
        return frozenset(out)

    def layout(self, locations: str = "gate") -> LocationLayout:
        """Noise locations: qudits touched by a gate (``gate``) or every tree qudit (``all``)."""
        if locations not in self._layouts:
            if locations == "gate":
                lay = LocationLayout(self.shape, [self.touched(t) for t in range(self.tau)])
            elif locations == "all":
                lay = LocationLayout.full(self.shape, self.tau)
            else:
                raise ValueError(f"unknown location model {locations!r}")
            self._layouts[locations] = lay
        return self._layouts[locations]


def schedule_length(n: int) -> int:
    return n * n + 3 * n + 1


def build_schedule(shape: TreeShape) -> QuerySchedule:
    n = shape.n

    def op(kind, layer=0, bit=0):
        return LayerOp(kind, layer, bit, 1 << max(n - layer, 0))

    setting = []
    for t in range(n):
        if t == 0:
            setting.append((op(OpKind.INJECT_ADDRESS, 0, 0), op(OpKind.INTERNAL_SWAP, 0)))
            continue
        setting.append((op(OpKind.INJECT_ADDRESS, 0, t), op(OpKind.ROUTE, 0)))
        for l in range(1, t):
            setting.append((op(OpKind.ROUTE, l),))
        setting.append((op(OpKind.INTERNAL_SWAP, t),))
    fetch = [(op(OpKind.INJECT_DATA), op(OpKind.ROUTE, 0))]
    fetch += [(op(OpKind.ROUTE, l),) for l in range(1, n)]
    fetch.append((op(OpKind.MEMORY, n),))
    fetch += [(op(OpKind.ROUTE, l),) for l in range(n - 1, 0, -1)]
    fetch.append((op(OpKind.ROUTE, 0), op(OpKind.INJECT_DATA)))
    uncompute = [tuple(reversed(ts)) for ts in reversed(setting)]
    steps = tuple(setting + fetch + uncompute)
    return QuerySchedule(shape, steps, (len(setting), len(fetch), len(uncompute)))


# --------------------------------------------------------------------------
# classical data
# --------------------------------------------------------------------------

@dataclass
class DataTable:
    entries: np.ndarray
    k: int = 1

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.uint64)
        if e.ndim != 1 or len(e) < 2 or len(e) & (len(e) - 1):
            raise ValueError(f"table length must be a power of two >= 2, got {len(e)}")
        if self.k < 1 or self.k > 63:
            raise ValueError(f"data width k={self.k} out of range")
        if len(e) and int(e.max()) >> self.k:
            raise ValueError(f"table entry exceeds {self.k} bits")
        self.entries = e
        self.values = [int(v) for v in e]

    @property
    def n(self) -> int:
        return len(self.entries).bit_length() - 1

    @property
    def nbytes(self) -> int:
        return int(self.entries.nbytes)

    def __getitem__(self, address: int) -> int:
        return self.values[address]

    @classmethod
    def random(cls, shape: TreeShape, seed: int = 0) -> "DataTable":
        rng = np.random.default_rng(seed)
        return cls(rng.integers(0, 1 << shape.k, size=shape.num_cells, dtype=np.uint64), shape.k)

    @classmethod
    def load(cls, path: str | Path, k: int = 1, n: int | None = None) -> "DataTable":
        """Read ``.csv`` (address,value rows) or raw little-endian binary records."""
        path = Path(path)
        if path.suffix.lower() == ".csv":
            rows = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2, comments="#")
            if rows.size and not np.issubdtype(rows.dtype, np.integer):
                raise ValueError("non-integer entries in table csv")
            size = 1 << n if n is not None else int(rows[:, 0].max()) + 1 if len(rows) else 0
            entries = np.zeros(size, dtype=np.uint64)
            if len(rows):
                if rows[:, 0].min() < 0 or rows[:, 0].max() >= size:
                    raise ValueError("address out of range in table csv")
                entries[rows[:, 0]] = rows[:, 1].astype(np.uint64)
            return cls(entries, k)
        width = (k + 7) // 8
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if len(raw) % width:
            raise ValueError(f"binary table size {len(raw)} is not a multiple of {width}")
        recs = raw.reshape(-1, width).astype(np.uint64)
        entries = np.zeros(len(recs), dtype=np.uint64)
        for b in range(width):
            entries |= recs[:, b] << np.uint64(8 * b)
        table = cls(entries, k)
        if n is not None and table.n != n:
            raise ValueError(f"table has 2^{table.n} entries, expected 2^{n}")
        return table

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix.lower() == ".csv":
            with open(path, "w") as fh:
                fh.write("# address,value\n")
                for a, v in enumerate(self.values):
                    fh.write(f"{a},{v}\n")
            return
        width = (self.k + 7) // 8
        out = np.zeros((len(self.entries), width), dtype=np.uint8)
        for b in range(width):
            out[:, b] = (self.entries >> np.uint64(8 * b)) & np.uint64(0xFF)
        path.write_bytes(out.tobytes())


def _check_table(table: DataTable, shape: TreeShape):
    if len(table.entries) != shape.num_cells:
        raise ValueError(f"table has {len(table.entries)} entries, tree has {shape.num_cells} cells")
    if table.k != shape.k:
        raise ValueError(f"table width k={table.k} does not match shape k={shape.k}")


# --------------------------------------------------------------------------
# layer operations on branch records [a, d, c, s, A, D, amp]
# --------------------------------------------------------------------------

def _inject_address(recs, t, n):
    shift = n - 1 - t
    for r in recs:
        D = r[5]
        root = D.get(0, 0)
        if ((r[0] >> shift) & 1) != (root & 1):
            r[0] ^= 1 << shift
            root ^= 1
            if root:
                D[0] = root
            else:
                del D[0]


def _inject_data(recs):
    for r in recs:
        D = r[5]
        root = D.get(0, 0)
        if root != r[1]:
            if r[1]:
                D[0] = r[1]
            else:
                del D[0]
            r[1] = root


def _route(recs, layer):
    lo, hi = (1 << layer) - 1, (1 << (layer + 1)) - 1
    for r in recs:
        A = r[4]
        if not A:
            continue
        D = r[5]
        for f, v in A.items():
            if lo <= f < hi:
                c = 2 * f + v
                x, y = D.get(f, 0), D.get(c, 0)
                if x != y:
                    if y:
                        D[f] = y
                    else:
                        del D[f]
                    if x:
                        D[c] = x
                    else:
                        del D[c]


def _internal_swap(recs, layer):
    lo, hi = ((1 << (layer - 1)) - 1, (1 << layer) - 1) if layer else (0, 0)
    for r in recs:
        A, D = r[4], r[5]
        if layer == 0:
            targets = (0,)
        else:
            targets = [2 * f + v for f, v in A.items() if lo <= f < hi]
        for v in targets:
            a, d = A.get(v, 0), D.get(v, 0)
            if a == 0 and d < 2:
                A[v] = d + 1
                if d:
                    del D[v]
            elif a and d == 0:
                del A[v]
                if a == 2:
                    D[v] = 1


def _memory(recs, n, values):
    lo, hi = (1 << (n - 1)) - 1, (1 << n) - 1
    for r in recs:
        A, D = r[4], r[5]
        for f, v in A.items():
            if lo <= f < hi:
                leaf = 2 * f + v
                x = values[leaf - hi]
                if x:
                    y = D.get(leaf, 0) ^ x
                    if y:
                        D[leaf] = y
                    else:
                        del D[leaf]


def _apply_op(recs, op: LayerOp, n: int, values):
    k = op.kind
    if k is OpKind.ROUTE:
        _route(recs, op.layer)
    elif k is OpKind.INTERNAL_SWAP:
        _internal_swap(recs, op.layer)
    elif k is OpKind.INJECT_ADDRESS:
        _inject_address(recs, op.bit, n)
    elif k is OpKind.INJECT_DATA:
        _inject_data(recs)
    else:
        _memory(recs, n, values)


def _to_records(state: SparseState) -> list:
    return [[a, d, c, s, dict(ta), dict(td), amp] for (a, d, c, s, ta, td), amp in state.branches.items()]


def _from_records(like: SparseState, recs, extra: dict | None = None) -> SparseState:
    out: dict = dict(extra) if extra else {}
    for r in recs:
        key = make_key(r[0], r[1], r[2], r[3], r[4], r[5])
        out[key] = out.get(key, 0j) + r[AMP]
    return like.with_branches(out).prune()


# --------------------------------------------------------------------------
# simulators
# --------------------------------------------------------------------------

def run_noiseless(state: SparseState, table: DataTable, schedule: QuerySchedule | None = None) -> SparseState:
    """Ideal query ``|i>|j> -> |i>|j XOR d_i>`` evaluated branch by branch.

    The gate-level schedule returns the tree to idle, so the ideal output never
    needs the tree; ``run_schedule`` steps the gates and agrees with this.
    """
    _check_table(table, state.shape)
    vals = table.values
    out: dict = {}
    for (a, d, c, s, ta, td), amp in state.branches.items():
        if ta or td:
            raise ValueError("noiseless query needs idle trees")
        key = (a, d ^ vals[a], c, s, (), ())
        out[key] = out.get(key, 0j) + amp
    return state.with_branches(out)


def run_schedule(state: SparseState, table: DataTable, schedule: QuerySchedule) -> SparseState:
    """Step every gate of the schedule on every branch without noise."""
    _check_table(table, state.shape)
    recs = _to_records(state)
    n = state.shape.n
    for ops in schedule.timesteps:
        for op in ops:
            _apply_op(recs, op, n, table.values)
    return _from_records(state, recs)


@dataclass
class ShotOutcome:
    final: SparseState
    faults: list[FaultEvent]
    reliable: frozenset
    fidelity: float
    mode: str
    stats: dict = field(default_factory=dict)


def _fid(final: SparseState, ideal: SparseState | None, wanted: bool) -> float:
    return bus_fidelity(final, ideal) if wanted else float("nan")


def shot_rng(seed: int, shot: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(shot)])


def _biased_ratios(chan):
    k0 = chan.tables[0]
    if any(t is None or t[0] != v for v, t in enumerate(k0)):
        raise ValueError(f"{chan.name}: default operator must be diagonal")
    base = k0[0][1]
    return [t[1] / base for t in k0]


def _apply_defaults(recs, t_touched, chan_pair, spots, shape: TreeShape):
    """Default Kraus factors on every touched non-spot location, relative to the idle value."""
    achan, dchan = chan_pair
    layers_a = {l for l, r in t_touched if r is Register.ADDRESS}
    layers_d = {l for l, r in t_touched if r is Register.DATA}
    spot_a = {(1 << e.site.node.layer) - 1 + e.site.node.pos for e in spots if e.site.register is Register.ADDRESS}
    spot_d = {((1 << e.site.node.layer) - 1 + e.site.node.pos, e.site.bit)
              for e in spots if e.site.register is Register.DATA}
    ra = _biased_ratios(achan) if achan.kind is ChannelKind.BIASED and achan.spot_rate < 1 else None
    rd = (_biased_ratios(dchan) if dchan is not None and dchan.kind is ChannelKind.BIASED
          and dchan.spot_rate < 1 else None)
    if ra is None and rd is None:
        return recs
    k = shape.k
    for r in recs:
        fac = 1.0
        if ra is not None:
            for f, v in r[4].items():
                if (f + 1).bit_length() - 1 in layers_a and f not in spot_a:
                    fac *= ra[v]
        if rd is not None:
            for f, v in r[5].items():
                if (f + 1).bit_length() - 1 in layers_d:
                    for b in range(k):
                        if (v >> b) & 1 and (f, b) not in spot_d:
                            fac *= rd[1]
        r[AMP] *= fac
    return [r for r in recs if r[AMP] != 0]


def _normalize_records(recs):
    w = sum(abs(r[AMP]) ** 2 for r in recs)
    if w <= 0:
        raise ZeroStateError("trajectory collapsed to the zero state")
    s = 1.0 / np.sqrt(w)
    for r in recs:
        r[AMP] *= s


def _evolve(recs, schedule: QuerySchedule, table: DataTable, noise: NoiseModel,
            by_step: dict, rng, stats: dict, track_memory: bool = True):
    n = schedule.shape.n
    vals = table.values
    biased = not noise.mixed_unitary
    layout = schedule.layout(noise.locations) if biased else None
    peak = 0
    for t, ops in enumerate(schedule.timesteps):
        for op in ops:
            _apply_op(recs, op, n, vals)
        events = by_step.get(t, ())
        if biased or events:
            for ci, pair in enumerate(noise.channels):
                spots = [e for e in events if e.channel == ci]
                if biased:
                    recs = _apply_defaults(recs, layout.touched[t], pair, spots, schedule.shape)
                for e in spots:
                    recs = resolve_spot(recs, e, noise.channel_for(e), rng)
            if biased:
                _normalize_records(recs)
        if track_memory:
            size = sum(len(r[4]) + len(r[5]) for r in recs)
            if size > peak:
                peak = size
    stats["peak_entries"] = peak
    return recs


def sample_faults(schedule: QuerySchedule, noise: NoiseModel, rng, at_least_one: bool = False):
    if noise.noiseless:
        if at_least_one:
            raise ValueError("cannot condition on a fault without noise")
        return []
    return sample_fault_events(schedule.layout(noise.locations), noise, rng, at_least_one)


def run_noisy(state: SparseState, table: DataTable, schedule: QuerySchedule, noise: NoiseModel,
              seed: int = 0, mode: str = "pruned", shot: int = 0, faults: list[FaultEvent] | None = None,
              rng: np.random.Generator | None = None, ideal: SparseState | None = None,
              at_least_one: bool = False, compute_fidelity: bool = True,
              track_memory: bool = True) -> ShotOutcome:
    """One noisy trajectory of the query.

    Faults are sampled first (or taken from ``faults``), then every noise spot is
    resolved in site order with draws from the same generator, so ``full`` and
    ``pruned`` runs with one seed follow the same trajectory. In ``pruned`` mode
    only branches whose address lies below a fault (or whose tree starts
    non-idle) are stepped, along with one reliable representative whose final
    tree and amplitude are shared by every reliable branch. ``track_memory``
    records the peak number of non-idle tree entries in ``stats``.
    """
    if mode not in ("full", "pruned"):
        raise ValueError(f"unknown mode {mode!r}")
    _check_table(table, state.shape)
    shape = state.shape
    if rng is None:
        rng = shot_rng(seed, shot)
    if faults is None:
        faults = sample_faults(schedule, noise, rng, at_least_one)
    else:
        # copies, so a forced fault list can be replayed in another run
        faults = sorted((replace(e) for e in faults), key=FaultEvent.sort_key)
        for e in faults:
            if not 0 <= e.site.timestep < schedule.tau or e.site.node.layer > shape.n:
                raise ValueError(f"fault site {e.site} outside the schedule")
    if ideal is None and compute_fidelity:
        ideal = run_noiseless(state.with_branches({k: v for k, v in state.branches.items() if not (k[4] or k[5])}),
                              table)
    by_step: dict = {}
    for e in faults:
        by_step.setdefault(e.site.timestep, []).append(e)
    stats = {"faults": len(faults)}
    biased = not noise.mixed_unitary

    if mode == "full" or (biased and any(d is not None and d.kind is ChannelKind.BIASED
                                         for _, d in noise.channels)):
        # data-dependent default factors break the shared-representative argument
        recs = _to_records(state)
        stats["simulated"] = len(recs)
        stats["reliable"] = 0
        # stepped even without faults so the tree footprint is accounted for
        recs = _evolve(recs, schedule, table, noise, by_step, rng, stats, track_memory)
        final = _from_records(state, recs)
        ranges = merged_ranges([e.site for e in faults], shape)
        reliable = frozenset(a for a in state.addresses() if not in_ranges(a, ranges))
        return ShotOutcome(final, faults, reliable, _fid(final, ideal, compute_fidelity), mode, stats)

    ranges = merged_ranges([e.site for e in faults], shape)
    sim, good = [], []
    for key, amp in state.branches.items():
        a, d, c, s, ta, td = key
        if ta or td or in_ranges(a, ranges):
            sim.append([a, d, c, s, dict(ta), dict(td), amp])
        else:
            good.append((key, amp))
    stats["simulated"] = len(sim)
    stats["reliable"] = len(good)
    reliable = frozenset(k[0] for k, _ in good)
    vals = table.values
    if not faults and not biased:
        stats["peak_entries"] = 0
        out = {}
        for (a, d, c, s, _, _), amp in good:
            key = (a, d ^ vals[a], c, s, (), ())
            out[key] = out.get(key, 0j) + amp
        final = _from_records(state, [], out) if not sim else _from_records(
            state, _evolve(sim, schedule, table, noise, by_step, rng, stats, track_memory), out)
        return ShotOutcome(final, faults, reliable, _fid(final, ideal, compute_fidelity), mode, stats)

    rep = None
    if good:
        w = float(np.sqrt(sum(abs(amp) ** 2 for _, amp in good)))
        (a, d, c, s, _, _), _ = good[0]
        rep = [a, d, c, s, {}, {}, complex(w), True]
        sim.append(rep)
    recs = _evolve(sim, schedule, table, noise, by_step, rng, stats, track_memory)
    out: dict = {}
    rep_final = next((r for r in recs if len(r) > AMP + 1), None)
    if rep_final is not None:
        scale = rep_final[AMP] / w
        ta = tuple(sorted(rep_final[4].items()))
        td = tuple(sorted(rep_final[5].items()))
        for (a, d, c, s, _, _), amp in good:
            key = (a, d ^ vals[a], c, s, ta, td)
            out[key] = out.get(key, 0j) + amp * scale
    others = [r for r in recs if len(r) == AMP + 1]
    final = _from_records(state, others, out)
    return ShotOutcome(final, faults, reliable, _fid(final, ideal, compute_fidelity), mode, stats)


@dataclass
class FidelityEstimate:
    mean: float
    stderr: float
    reliable_fraction: float
    shots: int
    p_no_fault: float = 0.0

    @property
    def infidelity(self) -> float:
        return 1.0 - self.mean


def no_fault_probability_for(schedule: QuerySchedule, noise: NoiseModel, invocations: int = 1) -> float:
    return streams_no_fault_probability(schedule.layout(noise.locations), noise, invocations)


def estimate_fidelity(state: SparseState, table: DataTable, schedule: QuerySchedule, noise: NoiseModel,
                      shots: int, seed: int = 0, mode: str = "pruned", rare_event: bool = False) -> FidelityEstimate:
    """Mean bus fidelity over independent trajectories.

    With ``rare_event`` every shot is drawn conditioned on at least one fault and
    combined with the exactly known fault-free stratum (fidelity 1). This is
    unbiased for mixed-unitary noise and cuts the variance by the inverse of the
    fault probability.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    ideal = run_noiseless(state, table)
    total = len(state.addresses())
    if noise.noiseless:
        return FidelityEstimate(1.0, 0.0, 1.0, shots, 1.0)
    p0 = 0.0
    if rare_event:
        if not noise.mixed_unitary:
            raise ValueError("rare-event estimation needs a mixed-unitary noise model")
        p0 = no_fault_probability_for(schedule, noise)
    fids = np.empty(shots)
    rel = np.empty(shots)
    for i in range(shots):
        out = run_noisy(state, table, schedule, noise, seed=seed, mode=mode, shot=i, ideal=ideal,
                        at_least_one=rare_event, track_memory=False)
        fids[i] = out.fidelity
        rel[i] = len(out.reliable) / total
    err = fids.std(ddof=1) / np.sqrt(shots) if shots > 1 else 0.0
    if rare_event:
        return FidelityEstimate(float(p0 + (1 - p0) * fids.mean()), float((1 - p0) * err),
                                float(p0 + (1 - p0) * rel.mean()), shots, p0)
    return FidelityEstimate(float(fids.mean()), float(err), float(rel.mean()), shots, p0)
