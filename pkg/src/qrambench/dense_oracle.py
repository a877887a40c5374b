"""Brute-force dense simulator for tiny trees, used as an independent reference.

Every qudit of the bus and the tree is its own tensor axis. Gates are built as
explicit matrices by enumerating basis states and contracted onto their axes;
noise applies the full Kraus operators (or, for trajectories, the sampled one
followed by renormalization). Nothing here reuses the sparse record code.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .noise_model import ChannelKind, FaultEvent, NoiseModel
from .query_engine import DataTable, OpKind, QuerySchedule, sample_faults, shot_rng
from .sparse_state import SparseState
from .topology import Register, TreeShape

MAX_DENSE_SIZE = 1 << 22
MAX_CHANNEL_DIM = 1024


class DimensionError(ValueError):
    pass


def _axis_dims(shape: TreeShape) -> list[int]:
    n, k, m = shape.n, shape.k, shape.num_nodes
    return [2] * n + [2] * k + [3] * m + [2] * (m * k)


def dense_size(shape: TreeShape) -> int:
    return int(np.prod(_axis_dims(shape), dtype=object))


@dataclass
class DenseState:
    tensor: np.ndarray
    shape: TreeShape

    @property
    def dimension(self) -> int:
        return self.tensor.size

    # axis helpers
    def addr_axis(self, t: int) -> int:
        return t

    def data_axis(self, b: int) -> int:
        return self.shape.n + b

    def a_axis(self, f: int) -> int:
        return self.shape.n + self.shape.k + f

    def d_axis(self, f: int, b: int) -> int:
        return self.shape.n + self.shape.k + self.shape.num_nodes + f * self.shape.k + b

    def d_axes(self, f: int) -> list[int]:
        return [self.d_axis(f, b) for b in range(self.shape.k)]

    def vector(self) -> np.ndarray:
        return self.tensor.reshape(-1)

    def norm2(self) -> float:
        return float(np.vdot(self.tensor, self.tensor).real)


def to_dense(state: SparseState) -> DenseState:
    shape = state.shape
    size = dense_size(shape)
    if size > MAX_DENSE_SIZE:
        raise DimensionError(f"dense state of size {size} exceeds the oracle limit")
    psi = np.zeros(_axis_dims(shape), dtype=complex)
    n, k, m = shape.n, shape.k, shape.num_nodes
    for (a, d, c, s, ta, td), amp in state.branches.items():
        if c or s:
            raise ValueError("the dense oracle has no control or spare registers")
        idx = [(a >> (n - 1 - t)) & 1 for t in range(n)]
        idx += [(d >> b) & 1 for b in range(k)]
        tam, tdm = dict(ta), dict(td)
        idx += [tam.get(f, 0) for f in range(m)]
        idx += [(tdm.get(f, 0) >> b) & 1 for f in range(m) for b in range(k)]
        psi[tuple(idx)] += amp
    return DenseState(psi, shape)


def apply_local(psi: np.ndarray, axes: list[int], mat: np.ndarray) -> np.ndarray:
    """Contract ``mat`` (acting on the product space of ``axes``) into ``psi``.

    Matrices with at most one nonzero per column are applied as a gather,
    which is much cheaper than a dense contraction on large tensors.
    """
    dims = [psi.shape[a] for a in axes]
    nz = np.abs(mat) > 0
    if (nz.sum(axis=1) <= 1).all():
        out = psi.copy()
        full = [slice(None)] * psi.ndim
        for o, local in enumerate(itertools.product(*[range(d) for d in dims])):
            if not nz[o].any():
                io = list(full)
                for ax, vo in zip(axes, local):
                    io[ax] = vo
                out[tuple(io)] = 0
                continue
            j = int(nz[o].argmax())
            if j == o and mat[o, j] == 1:
                continue
            src = np.unravel_index(j, dims)
            io, isrc = list(full), list(full)
            for ax, vo, vs in zip(axes, local, src):
                io[ax], isrc[ax] = vo, vs
            out[tuple(io)] = mat[o, int(nz[o].argmax())] * psi[tuple(isrc)]
        return out
    u = mat.reshape(dims + dims)
    out = np.tensordot(u, psi, axes=(list(range(len(dims), 2 * len(dims))), axes))
    return np.moveaxis(out, list(range(len(dims))), axes)


def _perm_matrix(dims: list[int], fn) -> np.ndarray:
    size = int(np.prod(dims))
    mat = np.zeros((size, size), dtype=complex)
    for inp in itertools.product(*[range(d) for d in dims]):
        out = fn(inp)
        mat[np.ravel_multi_index(out, dims), np.ravel_multi_index(inp, dims)] = 1
    return mat


def _bits_value(bits) -> int:
    return sum(b << i for i, b in enumerate(bits))


def _value_bits(v: int, k: int) -> tuple:
    return tuple((v >> i) & 1 for i in range(k))


class DenseQuery:
    """Dense gate set for one tree shape and data table."""

    def __init__(self, shape: TreeShape, table: DataTable):
        self.shape = shape
        self.table = table
        self._cache: dict = {}
        self.ref = DenseState(np.zeros((1,) * len(_axis_dims(shape))), shape)

    def _gate(self, key, dims, fn):
        if key not in self._cache:
            self._cache[key] = _perm_matrix(dims, fn)
        return self._cache[key]

    def layer_gates(self, op) -> list[tuple[list[int], np.ndarray]]:
        """(axes, matrix) pairs realizing a layer operation."""
        r, k, n = self.ref, self.shape.k, self.shape.n
        out = []
        if op.kind is OpKind.INJECT_ADDRESS:
            m = self._gate("swap", [2, 2], lambda x: (x[1], x[0]))
            out.append(([r.addr_axis(op.bit), r.d_axis(0, 0)], m))
        elif op.kind is OpKind.INJECT_DATA:
            m = self._gate("swap", [2, 2], lambda x: (x[1], x[0]))
            for b in range(k):
                out.append(([r.data_axis(b), r.d_axis(0, b)], m))
        elif op.kind is OpKind.ROUTE:
            def route(x):
                a, dv, d0, d1 = x[0], x[1:1 + k], x[1 + k:1 + 2 * k], x[1 + 2 * k:]
                if a == 1:
                    dv, d0 = d0, dv
                elif a == 2:
                    dv, d1 = d1, dv
                return (a,) + tuple(dv) + tuple(d0) + tuple(d1)
            m = self._gate("route", [3] + [2] * (3 * k), route)
            for p in range(1 << op.layer):
                f = (1 << op.layer) - 1 + p
                out.append(([r.a_axis(f)] + r.d_axes(f) + r.d_axes(2 * f + 1) + r.d_axes(2 * f + 2), m))
        elif op.kind is OpKind.INTERNAL_SWAP:
            def exchange(a, bits):
                d = _bits_value(bits)
                if a == 0 and d < 2:
                    return d + 1, _value_bits(0, k)
                if a and d == 0:
                    return 0, _value_bits(a - 1, k)
                return a, tuple(bits)

            if op.layer == 0:
                m = self._gate("iswap-root", [3] + [2] * k,
                               lambda x: (lambda a, b: (a,) + b)(*exchange(x[0], x[1:])))
                out.append(([r.a_axis(0)] + r.d_axes(0), m))
            else:
                for p in range(1 << op.layer):
                    v = (1 << op.layer) - 1 + p
                    parent = (v - 1) // 2
                    want = 1 + (v - (2 * parent + 1))

                    def cond_exchange(x, want=want):
                        if x[0] != want:
                            return x
                        a, b = exchange(x[1], x[2:])
                        return (x[0], a) + b
                    m = self._gate(("iswap", want), [3, 3] + [2] * k, cond_exchange)
                    out.append(([r.a_axis(parent), r.a_axis(v)] + r.d_axes(v), m))
        else:
            leaf0 = (1 << n) - 1
            for p in range(1 << n):
                v = leaf0 + p
                parent = (v - 1) // 2
                want = 1 + (v - (2 * parent + 1))
                val = self.table[p]

                def xor(x, want=want, val=val):
                    if x[0] != want:
                        return x
                    return (x[0],) + _value_bits(_bits_value(x[1:]) ^ val, k)
                m = self._gate(("mem", want, val), [3] + [2] * k, xor)
                out.append(([r.a_axis(parent)] + r.d_axes(v), m))
        return out

    def site_axis(self, site) -> int:
        f = (1 << site.node.layer) - 1 + site.node.pos
        if site.register is Register.ADDRESS:
            return self.ref.a_axis(f)
        return self.ref.d_axis(f, site.bit)

    def locations(self, touched) -> list[tuple[Register, int]]:
        """Axes of every location in a set of touched (layer, register) groups."""
        out = []
        for layer, reg in sorted(touched, key=lambda g: (g[0], g[1] is Register.DATA)):
            for p in range(1 << layer):
                f = (1 << layer) - 1 + p
                if reg is Register.ADDRESS:
                    out.append((reg, self.ref.a_axis(f)))
                else:
                    out.extend((reg, self.ref.d_axis(f, b)) for b in range(self.shape.k))
        return out


def dense_trajectory(state: SparseState, table: DataTable, schedule: QuerySchedule,
                     noise: NoiseModel, seed: int = 0, shot: int = 0,
                     faults: list[FaultEvent] | None = None) -> DenseState:
    """Dense replay of one sparse trajectory (same fault list, same spot draws)."""
    dense = to_dense(state)
    psi = dense.tensor
    q = DenseQuery(state.shape, table)
    rng = shot_rng(seed, shot)
    if faults is None:
        faults = sample_faults(schedule, noise, rng)
    faults = sorted((replace(e) for e in faults), key=FaultEvent.sort_key)
    layout = schedule.layout(noise.locations)
    for t, ops in enumerate(schedule.timesteps):
        for op in ops:
            for axes, m in q.layer_gates(op):
                psi = apply_local(psi, axes, m)
        events = [e for e in faults if e.site.timestep == t]
        for ci, (achan, dchan) in enumerate(noise.channels):
            spots = [e for e in events if e.channel == ci]
            spot_axes = {q.site_axis(e.site) for e in spots}
            for reg, ax in q.locations(layout.touched[t]):
                chan = achan if reg is Register.ADDRESS else dchan
                if chan is None or chan.kind is ChannelKind.MIXED_UNITARY or ax in spot_axes:
                    continue
                if chan.spot_rate < 1:
                    psi = apply_local(psi, [ax], chan.default)
            for e in spots:
                chan = achan if e.site.register is Register.ADDRESS else dchan
                ax = q.site_axis(e.site)
                if e.outcome is None:
                    w = float(np.vdot(psi, psi).real)
                    probs = np.zeros(len(chan.operators))
                    for i in range(1, len(chan.operators)):
                        phi = apply_local(psi, [ax], chan.operators[i])
                        probs[i] = float(np.vdot(phi, phi).real) / (chan.spot_rate * w)
                    probs[0] = max(0.0, 1.0 - probs[1:].sum())
                    probs /= probs.sum()
                    u = rng.random()
                    i = min(int(np.searchsorted(np.cumsum(probs), u, side="right")), len(probs) - 1)
                    while probs[i] == 0.0:
                        i -= 1
                    e.resolve(i, chan.kind)
                psi = apply_local(psi, [ax], chan.operators[e.outcome])
                psi /= np.sqrt(np.vdot(psi, psi).real)
        if not noise.mixed_unitary:
            psi /= np.sqrt(np.vdot(psi, psi).real)
    return DenseState(psi, state.shape)


def ideal_bus_vector(state: SparseState, table: DataTable) -> np.ndarray:
    """Ideal bus output as a dense vector over (address bits, data bits)."""
    n, k = state.shape.n, state.shape.k
    vec = np.zeros([2] * (n + k), dtype=complex)
    for (a, d, c, s, ta, td), amp in state.branches.items():
        d2 = d ^ table[a]
        idx = [(a >> (n - 1 - t)) & 1 for t in range(n)] + [(d2 >> b) & 1 for b in range(k)]
        vec[tuple(idx)] += amp
    return vec.reshape(-1)


def dense_bus_fidelity(dense: DenseState, ideal: np.ndarray) -> float:
    """``<ideal| Tr_tree |psi><psi| |ideal>`` by explicit partial trace."""
    shape = dense.shape
    nb = 2 ** (shape.n + shape.k)
    m = dense.tensor.reshape(nb, -1)
    rho_bus = m @ m.conj().T
    return float(np.real(ideal.conj() @ rho_bus @ ideal))


def dense_channel_fidelity(state: SparseState, table: DataTable, schedule: QuerySchedule,
                           noise: NoiseModel) -> float:
    """Exact bus fidelity of the full Kraus channel (no sampling) by density-matrix evolution."""
    shape = state.shape
    size = dense_size(shape)
    if size > MAX_CHANNEL_DIM:
        raise DimensionError(f"density matrix of dimension {size} exceeds the oracle limit")
    psi = to_dense(state).tensor
    nax = psi.ndim
    rho = np.multiply.outer(psi, psi.conj())
    q = DenseQuery(shape, table)
    layout = schedule.layout(noise.locations)

    def both(r, axes, mat):
        r = apply_local(r, axes, mat)
        return apply_local(r, [a + nax for a in axes], mat.conj())

    for t, ops in enumerate(schedule.timesteps):
        for op in ops:
            for axes, m in q.layer_gates(op):
                rho = both(rho, axes, m)
        for achan, dchan in noise.channels:
            for reg, ax in q.locations(layout.touched[t]):
                chan = achan if reg is Register.ADDRESS else dchan
                if chan is None:
                    continue
                rho = sum(both(rho, [ax], K) for K in chan.operators)
    nb = 2 ** (shape.n + shape.k)
    mat = rho.reshape(nb, size // nb, nb, size // nb)
    rho_bus = np.einsum("iaja->ij", mat)
    ideal = ideal_bus_vector(state, table)
    return float(np.real(ideal.conj() @ rho_bus @ ideal))
