import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qrambench.noise_model import NoiseModel, forced_fault
from qrambench.query_engine import (DataTable, OpKind, build_schedule, estimate_fidelity, no_fault_probability_for,
                                    run_noiseless, run_noisy, run_schedule, schedule_length)
from qrambench.sparse_state import SparseState, make_key, normalize
from qrambench.topology import Register, TreeShape

# frozen from an independent hand trace of the n = 2 schedule
N2_SCHEDULE = [
    [("inject-address", 0), ("internal-swap", 0)],
    [("inject-address", 0), ("route", 0)], [("internal-swap", 1)],
    [("inject-data", 0), ("route", 0)], [("route", 1)], [("memory-access", 2)], [("route", 1)],
    [("route", 0), ("inject-data", 0)],
    [("internal-swap", 1)], [("route", 0), ("inject-address", 0)],
    [("internal-swap", 0), ("inject-address", 0)],
]


@pytest.mark.parametrize("n,tau", [(1, 5), (2, 11), (3, 19), (4, 29), (10, 131)])
def test_schedule_length(n, tau):
    assert schedule_length(n) == tau
    assert build_schedule(TreeShape(n)).tau == tau


def test_n2_schedule_structure():
    sched = build_schedule(TreeShape(2))
    assert [[(op.kind.value, op.layer) for op in ts] for ts in sched.timesteps] == N2_SCHEDULE
    assert sched.stages == (3, 5, 3)


def test_touched_sets_for_gate_locations():
    sched = build_schedule(TreeShape(3))
    memory_step = next(t for t, ts in enumerate(sched.timesteps) if ts[0].kind is OpKind.MEMORY)
    assert sched.touched(memory_step) == {(2, Register.ADDRESS), (3, Register.DATA)}
    assert sched.layout("gate").size == 134
    assert sched.layout("all").size == 19 * 30


def random_state(shape, rng, count=None):
    count = count or shape.num_cells
    addrs = rng.choice(shape.num_cells, size=count, replace=False)
    amps = {(int(a), int(rng.integers(1 << shape.k))): complex(*rng.normal(size=2)) for a in addrs}
    return normalize(SparseState.from_amplitudes(shape, amps))[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_stepped_schedule_equals_direct_lookup(n, k, seed):
    shape = TreeShape(n, k)
    rng = np.random.default_rng(seed)
    table = DataTable.random(shape, seed)
    state = random_state(shape, rng, count=min(4, shape.num_cells))
    stepped = run_schedule(state, table, build_schedule(shape))
    direct = run_noiseless(state, table)
    assert stepped.branches.keys() == direct.branches.keys()
    for key, amp in direct.branches.items():
        assert stepped.branches[key] == pytest.approx(amp, abs=1e-12)
        # the tree ends idle and data is XORed in
        assert key[4] == () and key[5] == ()


def test_noiseless_query_xors_table():
    shape = TreeShape(2)
    table = DataTable(np.array([0, 1, 1, 0]))
    state = SparseState.from_amplitudes(shape, {(1, 1): 0.6, (2, 0): 0.8})
    out = run_noiseless(state, table)
    assert out.branches == {make_key(1, 0): 0.6, make_key(2, 1): 0.8}


@pytest.mark.parametrize("suffix,k", [(".csv", 1), (".csv", 5), (".bin", 3), (".bin", 12)])
def test_table_round_trip(tmp_path, suffix, k):
    shape = TreeShape(3, k)
    table = DataTable.random(shape, 2)
    path = tmp_path / f"t{suffix}"
    table.save(path)
    back = DataTable.load(path, k=k, n=3)
    assert back.values == table.values
    if suffix == ".bin":
        assert path.stat().st_size == 8 * ((k + 7) // 8)


def test_table_errors(tmp_path):
    with pytest.raises(ValueError):
        DataTable(np.array([0, 1, 1]))
    p = tmp_path / "t.bin"
    p.write_bytes(b"\x00" * 3)
    with pytest.raises(ValueError):
        DataTable.load(p, k=9)
    shape = TreeShape(2)
    with pytest.raises(ValueError):
        run_noiseless(SparseState.uniform(shape, [0]), DataTable.random(TreeShape(3)))


# frozen outputs of seed-matched shots, n = 3, uniform input, depolarizing 2e-2
FROZEN_SHOTS = {
    0: (1, 0.5625, [0, 1, 2, 3, 6, 7]),
    1: (1, 1.0, [2, 3, 4, 5, 6, 7]),
    2: (1, 0.765625, [0, 1, 2, 3, 5, 6, 7]),
    3: (1, 0.59375, [2, 3, 4, 5, 6, 7]),
}


@pytest.mark.parametrize("seed", sorted(FROZEN_SHOTS))
def test_frozen_noisy_shots(seed):
    shape = TreeShape(3)
    out = run_noisy(SparseState.uniform(shape, range(8)), DataTable.random(shape, 4), build_schedule(shape),
                    NoiseModel.build("depolarizing", 2e-2), seed=seed)
    nf, fid, reliable = FROZEN_SHOTS[seed]
    assert len(out.faults) == nf
    assert out.fidelity == pytest.approx(fid, abs=1e-12)
    assert sorted(out.reliable) == reliable


@pytest.mark.parametrize("channel,eps", [("depolarizing", 1e-2), ("damping", 2e-2), ("heating", 2e-2)])
@pytest.mark.parametrize("n", [2, 4])
def test_pruned_matches_full(channel, eps, n):
    shape = TreeShape(n)
    table = DataTable.random(shape, 1)
    sched = build_schedule(shape)
    state = random_state(shape, np.random.default_rng(n), count=min(6, shape.num_cells))
    noise = NoiseModel.build(channel, eps)
    for seed in range(6):
        a = run_noisy(state, table, sched, noise, seed=seed, mode="full")
        b = run_noisy(state, table, sched, noise, seed=seed, mode="pruned")
        assert a.final.branches.keys() == b.final.branches.keys()
        for key, amp in a.final.branches.items():
            assert b.final.branches[key] == pytest.approx(amp, abs=1e-10)
        assert a.fidelity == pytest.approx(b.fidelity, abs=1e-10)


def test_root_fault_makes_every_branch_unreliable():
    shape = TreeShape(3)
    state = SparseState.uniform(shape, range(8))
    # an A1 shift on the idle root at t = 0, right after the first internal swap
    out = run_noisy(state, DataTable.random(shape), build_schedule(shape), NoiseModel.build("depolarizing", 0.1),
                    faults=[forced_fault(0, 0, 0, outcome=1)])
    assert out.reliable == frozenset()
    assert out.stats["simulated"] == 8


def test_forced_faults_replay_identically():
    shape = TreeShape(3)
    args = (SparseState.uniform(shape, range(8)), DataTable.random(shape), build_schedule(shape),
            NoiseModel.build("depolarizing", 0.1))
    faults = [forced_fault(7, 2, 1, outcome=3)]
    a = run_noisy(*args, faults=faults)
    b = run_noisy(*args, faults=faults)
    assert faults[0].outcome == 3 and a.final.branches == b.final.branches


def test_unknown_mode_and_out_of_schedule_fault():
    shape = TreeShape(2)
    args = (SparseState.uniform(shape, [0]), DataTable.random(shape), build_schedule(shape),
            NoiseModel.build("depolarizing", 0.1))
    with pytest.raises(ValueError):
        run_noisy(*args, mode="fast")
    with pytest.raises(ValueError):
        run_noisy(*args, faults=[forced_fault(11, 0, 0)])


def test_noiseless_model_gives_unit_fidelity():
    shape = TreeShape(3)
    est = estimate_fidelity(SparseState.uniform(shape, range(8)), DataTable.random(shape), build_schedule(shape),
                            NoiseModel.build("depolarizing", 0.0), shots=3)
    assert est.mean == 1.0 and est.reliable_fraction == 1.0


def test_rare_event_estimate_agrees_with_plain():
    shape = TreeShape(3)
    args = (SparseState.uniform(shape, range(8)), DataTable.random(shape, 4), build_schedule(shape),
            NoiseModel.build("depolarizing", 1e-3))
    plain = estimate_fidelity(*args, shots=400, seed=1)
    rare = estimate_fidelity(*args, shots=400, seed=1, rare_event=True)
    assert rare.p_no_fault == pytest.approx(no_fault_probability_for(args[2], args[3]))
    assert rare.p_no_fault == pytest.approx(0.8745314299402542, rel=1e-12)
    assert abs(plain.mean - rare.mean) < 3 * np.hypot(plain.stderr, rare.stderr)
    assert rare.stderr < plain.stderr
    with pytest.raises(ValueError):
        estimate_fidelity(*args[:3], NoiseModel.build("damping", 1e-3), shots=2, rare_event=True)
