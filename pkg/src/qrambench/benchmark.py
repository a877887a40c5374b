"""Runtime and memory measurement of the simulator itself.

Memory is simulator-internal accounting rather than process RSS: every stored
branch costs ``BRANCH_BYTES``, every non-idle tree entry held at the worst
timestep costs ``ENTRY_BYTES``, and the classical table is counted by its packed
size. The numbers are deterministic for a given seed, so only timings vary
between reruns.

Regions follow ``x = n**2 * p * 2**n``: I below 1, II up to 256, III above.
"""

from __future__ import annotations

import csv
import enum
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .error_filtration import fit_power_law
from .noise_model import NoiseModel, sample_fault_events
from .query_engine import DataTable, build_schedule, no_fault_probability_for, run_noiseless, run_noisy
from .sparse_state import SparseState
from .topology import TreeShape, merged_ranges

SCHEMA_VERSION = "1"
BRANCH_BYTES = 64
ENTRY_BYTES = 16
REGION_I_UPPER = 1.0
REGION_II_UPPER = 256.0
# the shorter bound quoted alongside 256; kept in metadata only
REGION_II_ALTERNATIVE = 100.0
MIN_TIMED = 0.005  # seconds per static repetition before dividing by the loop count


class Region(str, enum.Enum):
    I = "I"
    II = "II"
    III = "III"


def region_x(n: int, p: float) -> float:
    return n * n * p * 2.0 ** n


def classify_region(n: int, p: float) -> Region:
    x = region_x(n, p)
    if x < REGION_I_UPPER:
        return Region.I
    if x <= REGION_II_UPPER:
        return Region.II
    return Region.III


@dataclass
class CostSample:
    n: int
    branch_count: int
    epsilon: float
    gamma: float
    mode: str
    wall_time: float
    peak_memory: float
    unreliable_branches: float
    region: str
    seed: int
    kind: str = "static"
    branch_bytes: float = 0.0
    table_bytes: int = 0
    time_spread: float = 0.0
    shots: int = 0
    delta_time: float = float("nan")
    delta_memory: float = float("nan")
    time_floor: float = float("nan")
    memory_floor: float = float("nan")
    reference_time: float = float("nan")

    def __post_init__(self):
        if not self.wall_time > 0:
            raise ValueError(f"wall_time must be positive, got {self.wall_time}")
        expected = classify_region(self.n, self.epsilon).value
        if self.region != expected:
            raise ValueError(f"region {self.region} inconsistent with n={self.n}, p={self.epsilon}")

    @property
    def key(self) -> tuple:
        return (self.n, self.branch_count, self.epsilon, self.gamma, self.seed)

    @property
    def at_noise_floor(self) -> bool:
        return abs(self.delta_time) <= self.time_floor and abs(self.delta_memory) <= self.memory_floor


COLUMNS = [f.name for f in fields(CostSample)]


def _robust_sigma(x: np.ndarray) -> float:
    if len(x) < 2:
        return 0.0
    return float(1.4826 * np.median(np.abs(x - np.median(x))))


def noiseless_memory(branches: int, table: DataTable) -> int:
    return branches * BRANCH_BYTES + table.nbytes


def shot_memory(outcome, table: DataTable) -> int:
    """Accounted bytes for one noisy shot: stored branches, peak tree entries, table."""
    st = outcome.stats
    stored = st.get("simulated", 0) + st.get("reliable", 0)
    if outcome.mode == "pruned" and outcome.faults and st.get("reliable", 0):
        stored += 1  # the shared representative of the reliable branches
    return stored * BRANCH_BYTES + st.get("peak_entries", 0) * ENTRY_BYTES + table.nbytes


def _branch_state(shape: TreeShape, size: int, rng: np.random.Generator) -> SparseState:
    if not 1 <= size <= shape.num_cells:
        raise ValueError(f"branch size {size} must lie in [1, 2**{shape.n}]")
    if size == shape.num_cells:
        addrs = np.arange(size)
    else:
        addrs = np.sort(rng.choice(shape.num_cells, size=size, replace=False))
    return SparseState.uniform(shape, [int(a) for a in addrs])


def _cell_inputs(n: int, size: int, seed: int):
    shape = TreeShape(n)
    rng = np.random.default_rng([seed, n, size])
    table = DataTable.random(shape, seed=int(rng.integers(2 ** 31)))
    return shape, table, _branch_state(shape, size, rng)


def _time_repeated(fn, repetitions: int) -> np.ndarray:
    """Per-call seconds for each repetition, looping each until MIN_TIMED elapses."""
    number = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        if time.perf_counter() - t0 >= MIN_TIMED:
            break
        number *= 2
    out = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        out[i] = (time.perf_counter() - t0) / number
    return out


def measure_static(n_range: Iterable[int], branch_sizes: Sequence[int], repetitions: int = 5,
                   seed: int = 0) -> list[CostSample]:
    """Noiseless cost per (n, branch size) cell, median over ``repetitions``."""
    out: list[CostSample] = []
    if repetitions <= 0:
        return out
    for n in n_range:
        for size in branch_sizes:
            shape, table, state = _cell_inputs(n, size, seed)
            times = _time_repeated(lambda: run_noiseless(state, table), repetitions)
            out.append(CostSample(
                n=n, branch_count=size, epsilon=0.0, gamma=0.0, mode="noiseless",
                wall_time=float(np.median(times)), peak_memory=float(noiseless_memory(size, table)),
                unreliable_branches=0.0, region=Region.I.value, seed=seed, kind="static",
                branch_bytes=float(size * BRANCH_BYTES), table_bytes=table.nbytes,
                time_spread=_robust_sigma(times), shots=repetitions))
    return out


def _noise(epsilon: float, gamma: float, channel: str, scope: str, locations: str) -> NoiseModel:
    return NoiseModel.build(channel, epsilon, gamma, scope=scope, locations=locations)


def _one_shot(args):
    state, table, schedule, noise, seed, mode, shot = args
    t0 = time.perf_counter()
    res = run_noisy(state, table, schedule, noise, seed=seed, mode=mode, shot=shot, compute_fidelity=False)
    dt = time.perf_counter() - t0
    return dt, shot_memory(res, table), len(state.addresses()) - len(res.reliable)


def measure_dynamic(n_range: Iterable[int], noise_grid: Sequence[tuple[float, float]], branch_size: int,
                    shots: int, baseline: Sequence[CostSample], mode: str = "pruned", seed: int = 0,
                    channel: str = "depolarizing", scope: str = "all-qudits", locations: str = "gate",
                    workers: int = 1) -> list[CostSample]:
    """Noisy cost per (n, epsilon, gamma) cell, with the difference to the static baseline.

    Each shot is timed on its own; the cell reports the median shot time and the
    mean accounted memory. The time delta is taken against the same engine run
    with the noise switched off (``reference_time``), so it isolates the cost of
    noise from the fixed bookkeeping of the noisy code path; the memory delta is
    taken against the static baseline, whose accounting a fault-free shot matches
    exactly. The time floor is three robust standard deviations of a
    single-measurement difference, the memory floor three standard errors of the
    mean. With ``workers > 1`` shots run in a process pool and per-shot timing is
    meaningless, so time deltas are left as NaN.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if mode not in ("full", "pruned"):
        raise ValueError(f"unknown mode {mode!r}")
    base = {(s.n, s.branch_count): s for s in baseline if s.kind == "static"}
    out: list[CostSample] = []
    for n in n_range:
        b = base.get((n, branch_size))
        if b is None:
            raise ValueError(f"no static baseline for n={n}, branch size {branch_size}")
        shape, table, state = _cell_inputs(n, branch_size, b.seed)
        schedule = build_schedule(shape)
        quiet = _noise(0.0, 0.0, channel, scope, locations)
        for eps, gamma in noise_grid:
            noise = _noise(eps, gamma, channel, scope, locations)
            jobs = [(state, table, schedule, noise, seed, mode, i) for i in range(shots)]
            if workers > 1:
                t0 = time.perf_counter()
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    res = list(pool.map(_one_shot, jobs, chunksize=max(1, shots // (4 * workers))))
                elapsed = time.perf_counter() - t0
            else:
                # reference and noisy shots alternate so slow drifts cancel
                res, ref_times = [], np.empty(shots)
                for i, j in enumerate(jobs):
                    ref_times[i] = _one_shot((state, table, schedule, quiet, seed, mode, i))[0]
                    res.append(_one_shot(j))
            times = np.array([r[0] for r in res])
            mem = np.array([r[1] for r in res], dtype=float)
            unrel = np.array([r[2] for r in res], dtype=float)
            mem_err = mem.std(ddof=1) / np.sqrt(shots) if shots > 1 else 0.0
            if workers > 1:
                wall, dt, floor, ref = elapsed / shots, float("nan"), float("nan"), float("nan")
            else:
                wall = float(np.median(times))
                ref = float(np.median(ref_times))
                dt = wall - ref
                floor = 3.0 * float(np.hypot(_robust_sigma(times), _robust_sigma(ref_times)))
            out.append(CostSample(
                n=n, branch_count=branch_size, epsilon=eps, gamma=gamma, mode=mode,
                wall_time=wall, peak_memory=float(mem.mean()), unreliable_branches=float(unrel.mean()),
                region=classify_region(n, eps).value, seed=seed, kind="dynamic",
                branch_bytes=float(mem.mean() - table.nbytes), table_bytes=table.nbytes,
                time_spread=_robust_sigma(times), shots=shots, delta_time=dt,
                delta_memory=float(mem.mean() - b.peak_memory), time_floor=floor,
                memory_floor=3.0 * float(mem_err), reference_time=ref))
    return out


def expected_unreliable_branches(n: int, p: float, shots: int, seed: int = 0, channel: str = "depolarizing",
                                 locations: str = "gate") -> tuple[float, float]:
    """Mean number of unreliable addresses per shot with every address active, and its standard error.

    Only fault sites matter here, so no state is evolved. Shots are drawn
    conditioned on at least one fault and rescaled by the exact fault probability,
    which keeps the estimate precise when faults are rare.
    """
    shape = TreeShape(n)
    schedule = build_schedule(shape)
    noise = _noise(p, 0.0, channel, "all-qudits", locations)
    layout = schedule.layout(locations)
    p_hit = 1.0 - no_fault_probability_for(schedule, noise)
    counts = np.empty(shots)
    for i in range(shots):
        rng = np.random.default_rng([seed, i])
        faults = sample_fault_events(layout, noise, rng, at_least_one=True)
        counts[i] = sum(hi - lo + 1 for lo, hi in merged_ranges([e.site for e in faults], shape))
    err = counts.std(ddof=1) / np.sqrt(shots) if shots > 1 else 0.0
    return p_hit * float(counts.mean()), p_hit * float(err)


@dataclass
class ModeRatio:
    n: int
    branch_count: int
    epsilon: float
    gamma: float
    seed: int
    region: str
    time_ratio: float
    memory_ratio: float


def compare_modes(samples_full: Sequence[CostSample], samples_pruned: Sequence[CostSample]) -> list[ModeRatio]:
    """Pruned over full ratios for cells present in both lists."""
    full = {s.key: s for s in samples_full}
    out = []
    for s in samples_pruned:
        f = full.get(s.key)
        if f is None:
            warnings.warn(f"no full-mode cell for {s.key}; skipped")
            continue
        out.append(ModeRatio(s.n, s.branch_count, s.epsilon, s.gamma, s.seed, s.region,
                             s.wall_time / f.wall_time, s.peak_memory / f.peak_memory))
    missing = set(full) - {s.key for s in samples_pruned}
    for k in sorted(missing):
        warnings.warn(f"no pruned-mode cell for {k}; skipped")
    return out


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return fit_power_law(xs, ys).exponent


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Slope, intercept and R^2 of an ordinary least-squares line."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two points")
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icept), r2


def write_csv(samples: Sequence[CostSample], path: str | Path | None = None, stream=None) -> None:
    """One row per sample in ``COLUMNS`` order, to ``path`` or an open text stream."""
    def _write(fh):
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in samples:
            w.writerow(asdict(s))
    if stream is not None:
        _write(stream)
    else:
        with open(path, "w", newline="") as fh:
            _write(fh)


def read_csv(path: str | Path) -> list[CostSample]:
    types = {f.name: f.type for f in fields(CostSample)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k, v in row.items():
                t = types[k]
                vals[k] = int(v) if t == "int" else float(v) if t == "float" else v
            out.append(CostSample(**vals))
    return out


def summarize(samples: Sequence[CostSample]) -> dict:
    """JSON-ready summary: region tags per cell plus log-log slopes where they can be fitted."""
    summary: dict = {
        "schema_version": SCHEMA_VERSION,
        "region_thresholds": {"I_upper": REGION_I_UPPER, "II_upper": REGION_II_UPPER,
                              "II_upper_alternative": REGION_II_ALTERNATIVE},
        "cells": [{"n": s.n, "branch_count": s.branch_count, "epsilon": s.epsilon, "mode": s.mode,
                   "kind": s.kind, "region": s.region} for s in samples],
        "static_time_slopes": {},
        "unreliable_slopes": {},
    }
    groups: dict = {}
    for s in samples:
        groups.setdefault((s.kind, s.mode, s.branch_count, s.epsilon, s.gamma), []).append(s)
    for (kind, mode, size, eps, gamma), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda s: s.n)
        if len(rows) < 3:
            continue
        ns = [r.n for r in rows]
        if kind == "static":
            summary["static_time_slopes"][str(size)] = loglog_slope(ns, [r.wall_time for r in rows])
        elif all(r.unreliable_branches > 0 for r in rows):
            summary["unreliable_slopes"][f"{mode}:{size}:{eps}:{gamma}"] = loglog_slope(
                ns, [r.unreliable_branches for r in rows])
    return summary


def write_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
