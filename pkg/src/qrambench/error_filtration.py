"""Error filtration (EF) over a noisy operation, post-selection accounting and bounds.

A level-``T`` run prepares a ``T``-qubit control register in uniform
superposition and calls the noisy operation ``2**T`` times on one physical
slot. For control value ``c`` the memory register is swapped into the slot for
invocation ``c`` only; the ancilla sits in the slot for every other call.
Finally the control is rotated back with Hadamards and projected onto all
zeros. Noise is sampled once per invocation and acts on the whole superposed
state, so erroneous components interfere away on projection.

The memory register is parked in the ``spare`` label and the slot is the bus.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .noise_model import (
    FaultEvent, NoiseModel, qubit_depolarizing, sample_streams, sample_fault_events,
    streams_no_fault_probability,
)
from .query_engine import (
    DataTable, QuerySchedule, build_schedule, run_noiseless, run_noisy, shot_rng,
)
from .sparse_state import SparseState, bus_fidelity
from .topology import FaultSite, NodeId, Register, TreeShape

EF_COLUMNS = ("n", "epsilon", "T", "F0", "FT", "ratio", "PS", "bound_worst", "bound_original",
              "bound_refined", "shots", "seed", "call_error")


# --------------------------------------------------------------------------
# noisy operations
# --------------------------------------------------------------------------

class PauliRegisterOperation:
    """Identity or CNOT on an ``N_r``-qubit register followed by independent depolarizing.

    The register lives in the bus data label (the bus address stays 0).
    """

    def __init__(self, num_qubits: int, gate: str = "identity", p: float = 0.0):
        if gate not in ("identity", "cnot"):
            raise ValueError(f"unknown gate {gate!r}")
        if gate == "cnot" and num_qubits < 2:
            raise ValueError("cnot needs at least two qubits")
        self.num_qubits = num_qubits
        self.gate = gate
        self.p = p
        self.channel = qubit_depolarizing(p)
        self.shape = TreeShape(1, num_qubits)
        self.mixed_unitary = True

    @property
    def label(self) -> str:
        return self.gate

    def _unitary(self, d: int) -> int:
        if self.gate == "cnot":
            d ^= (d & 1) << 1
        return d

    def ideal(self, state: SparseState) -> SparseState:
        out: dict = {}
        for (a, d, c, s, ta, td), amp in state.branches.items():
            key = (a, self._unitary(d), c, s, ta, td)
            out[key] = out.get(key, 0j) + amp
        return state.with_branches(out)

    def sample_faults(self, rng, invocations: int = 1, at_least_one: bool = False):
        idx = sample_streams([self.num_qubits * invocations], [self.channel.spot_rate], rng, at_least_one)[0]
        runs = [[] for _ in range(invocations)]
        for i in idx.tolist():
            inv, q = divmod(i, self.num_qubits)
            runs[inv].append(FaultEvent(FaultSite(0, NodeId(0, 0), Register.DATA, q)))
        return runs

    def no_fault_probability(self, invocations: int = 1) -> float:
        return (1 - self.p) ** (self.num_qubits * invocations)

    def apply(self, state: SparseState, rng, faults: list[FaultEvent]) -> SparseState:
        out = self.ideal(state)
        chan = self.channel
        for e in faults:
            if e.outcome is None:
                probs = np.asarray(chan.probabilities[1:]) / chan.spot_rate
                u = rng.random()
                i = min(int(np.searchsorted(np.cumsum(probs), u, side="right")), len(probs) - 1) + 1
                e.resolve(i, chan.kind)
            table = chan.tables[e.outcome]
            scale = 1 / np.sqrt(chan.probabilities[e.outcome])
            q = e.site.bit
            new: dict = {}
            for (a, d, c, s, ta, td), amp in out.branches.items():
                v, fac = table[(d >> q) & 1]
                key = (a, (d & ~(1 << q)) | (v << q), c, s, ta, td)
                new[key] = new.get(key, 0j) + amp * fac * scale
            out = out.with_branches(new)
        return out


class QueryOperation:
    """One noisy bucket-brigade query with fresh faults per invocation.

    With ``reset_tree`` the routing tree is traced out after every call (its
    configuration is sampled with Born weights and then set back to idle), so
    each call sees a fresh tree, as for a memoryless channel on the bus.
    """

    def __init__(self, table: DataTable, shape: TreeShape, noise: NoiseModel, mode: str = "pruned",
                 reset_tree: bool = True):
        self.table = table
        self.shape = shape
        self.noise = noise
        self.mode = mode
        self.reset_tree = reset_tree
        self.schedule: QuerySchedule = build_schedule(shape)
        self.mixed_unitary = noise.mixed_unitary

    label = "qram"

    def ideal(self, state: SparseState) -> SparseState:
        return run_noiseless(state, self.table)

    def sample_faults(self, rng, invocations: int = 1, at_least_one: bool = False):
        if self.noise.noiseless:
            return [[] for _ in range(invocations)]
        runs = sample_fault_events(self.schedule.layout(self.noise.locations), self.noise, rng,
                                   at_least_one, invocations)
        return [runs] if invocations == 1 else runs

    def no_fault_probability(self, invocations: int = 1) -> float:
        if self.noise.noiseless:
            return 1.0
        return streams_no_fault_probability(self.schedule.layout(self.noise.locations), self.noise,
                                            invocations)

    def apply(self, state: SparseState, rng, faults: list[FaultEvent]) -> SparseState:
        out = run_noisy(state, self.table, self.schedule, self.noise, mode=self.mode, faults=faults,
                        rng=rng, compute_fidelity=False, track_memory=False).final
        if self.reset_tree and faults:
            out = trace_out_tree(out, rng)
        return out


def trace_out_tree(state: SparseState, rng) -> SparseState:
    """Sample a tree configuration with its Born weight, keep that slice and idle the tree."""
    groups: dict = {}
    for key, amp in state.branches.items():
        groups.setdefault((key[4], key[5]), []).append((key, amp))
    if len(groups) == 1 and next(iter(groups)) == ((), ()):
        return state
    order = sorted(groups)
    weights = np.array([sum(abs(a) ** 2 for _, a in groups[q]) for q in order])
    u = rng.random()
    i = min(int(np.searchsorted(np.cumsum(weights) / weights.sum(), u, side="right")), len(order) - 1)
    scale = 1 / np.sqrt(weights[i])
    out: dict = {}
    for (a, d, c, s, _, _), amp in groups[order[i]]:
        out[(a, d, c, s, (), ())] = amp * scale
    return state.with_branches(out)


# --------------------------------------------------------------------------
# protocol
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EFConfig:
    T: int = 1
    estimator: str = "weight"
    ancilla_equals_memory: bool = True
    rare_event: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"filtration level must be >= 1, got T={self.T}")
        if self.estimator not in ("weight", "sampled"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.rare_event and self.estimator != "weight":
            raise ValueError("rare-event conditioning needs the weight estimator")


@dataclass(frozen=True)
class EFStep:
    kind: str  # "hadamard", "cswap", "invoke", "project"
    invocation: int = -1


@dataclass(frozen=True)
class EFSchedule:
    T: int
    steps: tuple[EFStep, ...]

    @property
    def invocations(self) -> int:
        return sum(s.kind == "invoke" for s in self.steps)

    @property
    def cswap_layers(self) -> int:
        return sum(s.kind == "cswap" for s in self.steps)

    @property
    def hadamards(self) -> int:
        return sum(s.kind == "hadamard" for s in self.steps)


def build_ef_schedule(T: int, op=None, memory_shape: TreeShape | None = None) -> EFSchedule:
    """Step list: H, then per invocation c: SWAP if control == c, call, SWAP back; H, project."""
    if T < 1:
        raise ValueError(f"filtration level must be >= 1, got T={T}")
    if op is not None and memory_shape is not None and (op.shape.n, op.shape.k) != (memory_shape.n, memory_shape.k):
        raise ValueError("memory register shape does not match the operated slot")
    steps = [EFStep("hadamard")]
    for c in range(1 << T):
        steps += [EFStep("cswap", c), EFStep("invoke", c), EFStep("cswap", c)]
    steps += [EFStep("hadamard"), EFStep("project")]
    return EFSchedule(T, tuple(steps))


@dataclass
class EFShotRecord:
    pass_weight: float
    conditional_fidelity: float
    faults: int
    accepted: bool | None = None


@dataclass
class EFResult:
    P_S: float
    P_S_err: float
    F_T: float
    F_T_err: float
    records: list[EFShotRecord] = field(repr=False)
    p_no_fault: float = 0.0

    @property
    def infidelity(self) -> float:
        return 1.0 - self.F_T


def _pack(a: int, d: int, k: int) -> int:
    return (a << k) | d


def _unpack(s: int, k: int) -> tuple[int, int]:
    return s >> k, s & ((1 << k) - 1)


def _swap_if(state: SparseState, control: int, k: int) -> SparseState:
    out: dict = {}
    for (a, d, c, s, ta, td), amp in state.branches.items():
        if c == control:
            a2, d2 = _unpack(s, k)
            key = (a2, d2, c, _pack(a, d, k), ta, td)
        else:
            key = (a, d, c, s, ta, td)
        out[key] = out.get(key, 0j) + amp
    return state.with_branches(out)


def ef_shot(psi: SparseState, phi: SparseState, op, T: int, rng, faults=None,
            ideal_memory: dict | None = None) -> tuple[float, float, SparseState]:
    """One trajectory of the level-``T`` circuit; returns (pass weight, fidelity, projected state)."""
    k = psi.shape.k
    m = 1 << T
    if faults is None:
        faults = op.sample_faults(rng, m)
    norm = 1 / np.sqrt(m)
    branches: dict = {}
    for (pa, pd, _, _, pta, ptd), x in psi.branches.items():
        if pta or ptd:
            raise ValueError("EF inputs need idle trees")
        for (fa, fd, _, _, _, _), y in phi.branches.items():
            for c in range(m):
                key = (fa, fd, c, _pack(pa, pd, k), (), ())
                branches[key] = branches.get(key, 0j) + x * y * norm
    state = psi.with_branches(branches)
    for c in range(m):
        state = _swap_if(state, c, k)
        state = op.apply(state, rng, faults[c])
        state = _swap_if(state, c, k)
    proj: dict = {}
    for (a, d, c, s, ta, td), amp in state.branches.items():
        key = (a, d, 0, s, ta, td)
        proj[key] = proj.get(key, 0j) + amp * norm
    projected = state.with_branches(proj).prune()
    pw = projected.norm2()
    if ideal_memory is None:
        ideal_memory = _ideal_memory(psi, op)
    if pw <= 0:
        return 0.0, float("nan"), projected
    groups: dict = {}
    for (a, d, c, s, ta, td), amp in projected.branches.items():
        ref = ideal_memory.get(s)
        if ref is None:
            continue
        g = (a, d, ta, td)
        groups[g] = groups.get(g, 0j) + np.conj(ref) * amp
    fid = float(sum(abs(v) ** 2 for v in groups.values())) / pw
    return float(pw), min(max(fid, 0.0), 1.0), projected


def _ideal_memory(psi: SparseState, op) -> dict:
    k = psi.shape.k
    out = {}
    for (a, d, c, s, ta, td), amp in op.ideal(psi).branches.items():
        out[_pack(a, d, k)] = out.get(_pack(a, d, k), 0j) + amp
    return out


def _ratio_stats(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """Ratio of means and its delta-method standard error."""
    n = len(num)
    mn, md = num.mean(), den.mean()
    if md <= 0:
        raise ArithmeticError("all pass weights are zero; post-selected fidelity undefined")
    r = mn / md
    if n < 2:
        return float(r), 0.0
    resid = num - r * den
    return float(r), float(resid.std(ddof=1) / (np.sqrt(n) * md))


def run_ef(psi: SparseState, phi: SparseState | None, op, cfg: EFConfig, shots: int,
           seed: int = 0, shot_offset: int = 0) -> EFResult:
    """Estimate the post-selection probability and post-selected fidelity.

    ``weight`` accumulates the projection norm of every shot; ``sampled``
    draws the control measurement. With ``cfg.rare_event`` every shot is
    conditioned on at least one fault and mixed with the fault-free stratum,
    which has pass weight 1 and fidelity 1.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if phi is None or cfg.ancilla_equals_memory:
        if phi is not None and phi.branches != psi.branches:
            raise ValueError("ancilla_equals_memory requires phi == psi")
        phi = psi
    if (psi.shape.n, psi.shape.k) != (op.shape.n, op.shape.k):
        raise ValueError("memory register shape does not match the operated slot")
    if cfg.rare_event and not op.mixed_unitary:
        raise ValueError("rare-event conditioning needs a mixed-unitary operation")
    m = 1 << cfg.T
    ideal_memory = _ideal_memory(psi, op)
    records = []
    pw = np.empty(shots)
    pf = np.empty(shots)
    for i in range(shots):
        rng = shot_rng(seed, shot_offset + i)
        faults = op.sample_faults(rng, m, at_least_one=cfg.rare_event)
        w, f, _ = ef_shot(psi, phi, op, cfg.T, rng, faults, ideal_memory)
        rec = EFShotRecord(w, f, sum(len(x) for x in faults))
        if cfg.estimator == "sampled":
            rec.accepted = bool(rng.random() < w)
        records.append(rec)
        pw[i] = w
        pf[i] = w * f if w > 0 else 0.0
    if cfg.estimator == "sampled":
        acc = np.array([r.accepted for r in records])
        ps = acc.mean()
        ps_err = acc.std(ddof=1) / np.sqrt(shots) if shots > 1 else 0.0
        if not acc.any():
            raise ArithmeticError("no shot passed post-selection")
        fs = np.array([r.conditional_fidelity for r in records])[acc]
        ft = fs.mean()
        ft_err = fs.std(ddof=1) / np.sqrt(len(fs)) if len(fs) > 1 else 0.0
        return EFResult(float(ps), float(ps_err), float(ft), float(ft_err), records)
    p0 = op.no_fault_probability(m) if cfg.rare_event else 0.0
    # stratified means: fault-free shots pass with weight 1 and fidelity 1
    num = p0 + (1 - p0) * pf
    den = p0 + (1 - p0) * pw
    ps = float(den.mean())
    ps_err = float((1 - p0) * pw.std(ddof=1) / np.sqrt(shots)) if shots > 1 else 0.0
    ft, ft_err = _ratio_stats(num, den)
    return EFResult(ps, ps_err, ft, ft_err, records, p0)


@dataclass
class BaseEstimate:
    F0: float
    F0_err: float
    p_no_fault: float = 0.0

    @property
    def infidelity(self) -> float:
        return 1.0 - self.F0


def base_fidelity(psi: SparseState, op, shots: int, seed: int = 0, rare_event: bool = False,
                  shot_offset: int = 0) -> BaseEstimate:
    """Fidelity of one unfiltered call of ``op`` on ``psi``."""
    ideal = op.ideal(psi)
    fs = np.empty(shots)
    for i in range(shots):
        rng = shot_rng(seed, 10**9 + shot_offset + i)
        faults = op.sample_faults(rng, 1, at_least_one=rare_event)[0]
        fs[i] = bus_fidelity(op.apply(psi, rng, faults), ideal)
    p0 = op.no_fault_probability(1) if rare_event else 0.0
    err = fs.std(ddof=1) / np.sqrt(shots) if shots > 1 else 0.0
    return BaseEstimate(float(p0 + (1 - p0) * fs.mean()), float((1 - p0) * err), p0)


# --------------------------------------------------------------------------
# random inputs and sweeps
# --------------------------------------------------------------------------

def haar_state(shape: TreeShape, addresses: Sequence[int], rng, data_values: Sequence[int] | None = None) -> SparseState:
    """Haar-random pure state on span{|a>|d>} for the given addresses and data values."""
    if data_values is None:
        data_values = range(1 << shape.k)
    labels = [(a, d) for a in addresses for d in data_values]
    z = rng.normal(size=len(labels)) + 1j * rng.normal(size=len(labels))
    z /= np.linalg.norm(z)
    return SparseState.from_amplitudes(shape, dict(zip(labels, z)))


def product_state(num_qubits: int, rng) -> SparseState:
    """Haar-random single-qubit states tensored together, in the bus data label."""
    vec = np.array([1.0 + 0j])
    for _ in range(num_qubits):
        z = rng.normal(size=2) + 1j * rng.normal(size=2)
        z /= np.linalg.norm(z)
        vec = np.kron(z, vec)  # qubit q is bit q of the label
    shape = TreeShape(1, num_qubits)
    return SparseState.from_amplitudes(shape, {(0, d): v for d, v in enumerate(vec)})


@dataclass
class EFPoint:
    n: int
    epsilon: float
    T: int
    F0: float
    F0_err: float
    FT: float
    FT_err: float
    PS: float
    PS_err: float
    shots: int
    seed: int
    call_error: float = float("nan")

    @property
    def ratio(self) -> float:
        return suppression_ratio(self.F0, self.FT)

    @property
    def collapsed_ratio(self) -> float:
        """Measured ratio divided by the post-selection probability."""
        return self.ratio / self.PS

    def row(self) -> dict:
        # the bounds are stated for the probability that one call errs at all
        eps = self.epsilon if math.isnan(self.call_error) else self.call_error
        b = ef_bounds(min(eps, 0.5), self.T)
        # a sweep that saw no base error has no defined ratio
        ratio = self.ratio if self.F0 < 1 else float("nan")
        return {"n": self.n, "epsilon": self.epsilon, "T": self.T, "F0": self.F0, "FT": self.FT,
                "ratio": ratio, "PS": self.PS, "bound_worst": b.worst, "bound_original": b.original,
                "bound_refined": b.refined, "shots": self.shots, "seed": self.seed,
                "call_error": eps}


def ef_sweep(make_input, op, T_values: Sequence[int], states: int, shots_per_state: int,
             seed: int = 0, rare_event: bool = False, n: int = 0, epsilon: float = 0.0,
             base_shots: int | None = None) -> list[EFPoint]:
    """Pool F0, F_T and P_S over ``states`` random inputs for each level in ``T_values``.

    ``make_input(rng)`` draws one input; it serves as both memory and ancilla.
    """
    rng = np.random.default_rng([seed, 7])
    inputs = [make_input(rng) for _ in range(states)]
    base_shots = base_shots or shots_per_state
    bases = [base_fidelity(s, op, base_shots, seed, rare_event, shot_offset=i * base_shots)
             for i, s in enumerate(inputs)]
    f0 = float(np.mean([b.F0 for b in bases]))
    f0_err = float(np.sqrt(sum(b.F0_err ** 2 for b in bases)) / len(bases))
    call_error = 1.0 - op.no_fault_probability(1)
    points = []
    for T in T_values:
        cfg = EFConfig(T, rare_event=rare_event)
        results = [run_ef(s, s, op, cfg, shots_per_state, seed * 1000 + T, shot_offset=i * shots_per_state)
                   for i, s in enumerate(inputs)]
        # pool the stratified per-shot numerators and denominators across inputs
        nums, dens = [], []
        for r in results:
            pw = np.array([x.pass_weight for x in r.records])
            pf = np.array([x.pass_weight * x.conditional_fidelity if x.pass_weight > 0 else 0.0
                           for x in r.records])
            nums.append(r.p_no_fault + (1 - r.p_no_fault) * pf)
            dens.append(r.p_no_fault + (1 - r.p_no_fault) * pw)
        num, den = np.concatenate(nums), np.concatenate(dens)
        ft, ft_err = _ratio_stats(num, den)
        ps = float(den.mean())
        ps_err = float(den.std(ddof=1) / np.sqrt(len(den))) if len(den) > 1 else 0.0
        points.append(EFPoint(n, epsilon, T, f0, f0_err, ft, ft_err, ps, ps_err,
                              states * shots_per_state, seed, call_error))
    return points


def write_ef_csv(points: Sequence[EFPoint], path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=EF_COLUMNS)
        w.writeheader()
        for p in points:
            w.writerow(p.row())
    finally:
        if own:
            fh.close()


# --------------------------------------------------------------------------
# analytic toolkit
# --------------------------------------------------------------------------

def suppression_ratio(F0: float, FT: float) -> float:
    """(1 - F0) / (1 - FT); infinite when the filtered fidelity is exactly 1."""
    if F0 >= 1:
        raise ValueError("base fidelity must be below 1")
    if FT >= 1:
        return math.inf
    return (1 - F0) / (1 - FT)


def predicted_ratio(T: int, P_S: float) -> float:
    return (2 ** T) * P_S


@dataclass(frozen=True)
class EFBounds:
    epsilon: float
    T: int
    worst: float
    original: float
    refined: float
    dynamic_refined: float

    def check(self, P_S: float, sigma: float = 0.0, ancilla_equals_memory: bool = True) -> dict:
        """Which lower bounds the measured P_S satisfies within 3 sigma.

        The refined forms assume identical memory and ancilla inputs and are
        reported as ``None`` otherwise.
        """
        slack = 3 * sigma
        out = {"worst": P_S >= self.worst - slack, "original": P_S >= self.original - slack}
        if ancilla_equals_memory:
            out["refined"] = P_S >= self.refined - slack
            out["dynamic_refined"] = P_S >= self.dynamic_refined - slack
        else:
            out["refined"] = out["dynamic_refined"] = None
        return out


def ef_bounds(epsilon: float, T: int) -> EFBounds:
    if not 0 <= epsilon <= 0.5:
        raise ValueError(f"epsilon must lie in [0, 0.5], got {epsilon}")
    if T < 1:
        raise ValueError("T must be >= 1")
    return EFBounds(epsilon, T,
                    worst=1 - 2 ** T * epsilon,
                    original=1 - 4 * epsilon + epsilon / 2 ** T,
                    refined=1 - 2 * epsilon,
                    dynamic_refined=1 - 2 * epsilon * (1 - 2.0 ** -T))


def progressive_limit(c_bound: float) -> float:
    """Largest per-call error for which level T still beats level T - 1, given P_S >= 1 - C*eps."""
    if c_bound <= 0:
        raise ValueError("bound constant must be positive")
    return 1 / (2 * c_bound)


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    prefactor: float
    r2: float

    def predict(self, n):
        return self.prefactor * np.asarray(n, dtype=float) ** self.exponent


def fit_power_law(ns: Sequence[float], ys: Sequence[float]) -> PowerLawFit:
    """Least-squares line through (log n, log y)."""
    x = np.asarray(ns, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) < 3:
        raise ValueError("need at least three points")
    if (y <= 0).any() or (x <= 0).any():
        raise ValueError("power-law fit needs positive values")
    lx, ly = np.log(x), np.log(y)
    b, a = np.polyfit(lx, ly, 1)
    pred = a + b * lx
    ss_res = float(((ly - pred) ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return PowerLawFit(float(b), float(np.exp(a)), r2)


def max_feasible_n(fit: PowerLawFit, eps_max: float) -> int:
    """Largest integer n with fitted infidelity at most ``eps_max`` (0 if none)."""
    if fit.exponent <= 0:
        raise ValueError("infidelity must grow with n for a finite limit")
    x = (eps_max / fit.prefactor) ** (1 / fit.exponent)
    n = int(math.floor(x))
    # guard against floating error at an exact integer boundary
    if fit.predict(n + 1) <= eps_max * (1 + 1e-12):
        n += 1
    while n > 0 and fit.predict(n) > eps_max * (1 + 1e-12):
        n -= 1
    return max(n, 0)
