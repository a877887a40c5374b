import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qrambench.noise_model import (OMEGA, ChannelKind, FaultEvent, KrausChannel, LocationLayout, NoiseModel,
                                   Resolution, apply_mixed_unitary, forced_fault, no_fault_probability,
                                   quasi_measure, qubit_amplitude_damping, qubit_depolarizing, qutrit_clock,
                                   qutrit_damping, qutrit_depolarizing, qutrit_heating, qutrit_shift,
                                   sample_fault_locations, sample_location_indices, sample_streams)
from qrambench.sparse_state import SparseState, make_key
from qrambench.topology import FaultSite, NodeId, Register, TreeShape

W, ZERO, ONE = 0, 1, 2


@pytest.mark.parametrize("make", [qutrit_depolarizing, qutrit_damping, qutrit_heating,
                                  qubit_depolarizing, qubit_amplitude_damping])
@pytest.mark.parametrize("eps", [0.0, 1e-3, 0.3])
def test_channels_complete_and_spot_rate(make, eps):
    ch = make(eps)
    total = sum(k.conj().T @ k for k in ch.operators)
    assert np.allclose(total, np.eye(ch.dim))
    # every shipped channel has largest error weight equal to its strength
    assert ch.spot_rate == pytest.approx(eps)


def test_depolarizing_outcome_probabilities():
    ch = qutrit_depolarizing(0.08)
    assert ch.kind is ChannelKind.MIXED_UNITARY
    assert len(ch.operators) == 9
    assert ch.probabilities[0] == pytest.approx(0.92)
    assert ch.probabilities[1:] == pytest.approx([0.01] * 8)
    assert ch.labels[:3] == ("I", "A1", "A2")


def test_shift_is_cyclic_and_clock_commutes_with_phase():
    a1, a2 = qutrit_shift(), qutrit_clock()
    assert np.allclose(np.linalg.matrix_power(a1, 3), np.eye(3))
    assert a1[ZERO, W] == 1 and a1[ONE, ZERO] == 1 and a1[W, ONE] == 1
    assert np.allclose(a2 @ a1, OMEGA * a1 @ a2)


def test_incomplete_operators_rejected():
    with pytest.raises(ValueError):
        KrausChannel((np.eye(2) * 0.5,), ChannelKind.BIASED, 0.0, "bad")


@pytest.mark.parametrize("make", [qutrit_depolarizing, qubit_depolarizing])
def test_strength_out_of_range(make):
    with pytest.raises(ValueError):
        make(1.5)


def test_damping_conditional_probabilities():
    ch = qutrit_damping(0.1)
    q = ch.conditional_probabilities([0.5, 0.25, 0.25])
    assert q == pytest.approx([0.5, 0.25, 0.25])
    # a spot on an idle qutrit always resolves to the no-jump outcome
    assert ch.conditional_probabilities([1.0, 0.0, 0.0]) == pytest.approx([1, 0, 0])


def test_heating_conditional_probabilities():
    ch = qutrit_heating(0.2)
    assert ch.conditional_probabilities([1.0, 0.0, 0.0]) == pytest.approx([0.0, 0.5, 0.5])
    assert ch.conditional_probabilities([0.0, 0.3, 0.7]) == pytest.approx([1.0, 0.0, 0.0])


def test_noise_model_build_configurations():
    dep = NoiseModel.build("depolarizing", 1e-3)
    assert dep.mixed_unitary and dep.channels[0][1].name == "qubit-depolarizing"
    addr_only = NoiseModel.build("depolarizing", 1e-3, scope="address-only")
    assert addr_only.channels[0][1] is None
    mixed = NoiseModel.build("depolarizing", 1e-3, gamma=1e-3)
    assert len(mixed.channels) == 2 and not mixed.mixed_unitary
    assert NoiseModel.build("damping", 0.0).noiseless
    for bad in [dict(channel="thermal"), dict(scope="everything"), dict(locations="some")]:
        with pytest.raises(ValueError):
            NoiseModel.build(**{"epsilon": 1e-3, **bad})


def test_fault_event_resolves_once():
    e = forced_fault(3, 1, 0)
    assert e.resolution is Resolution.PENDING
    e.resolve(2, ChannelKind.MIXED_UNITARY)
    assert e.resolution is Resolution.SAMPLED_UNITARY
    with pytest.raises(RuntimeError):
        e.resolve(1, ChannelKind.MIXED_UNITARY)


def test_layout_decode_full_n1_k2():
    layout = LocationLayout.full(TreeShape(1, 2), 2)
    # per timestep: A_0 (1), D_0 (2 bits), A_1 (2), D_1 (2 nodes x 2 bits)
    assert layout.size == 2 * (1 + 2 + 2 + 4)
    sites = layout.decode(np.array([0, 2, 3, 8, 9]))
    assert sites == [FaultSite(0, NodeId(0, 0)), FaultSite(0, NodeId(0, 0), Register.DATA, 1),
                     FaultSite(0, NodeId(1, 0)), FaultSite(0, NodeId(1, 1), Register.DATA, 1),
                     FaultSite(1, NodeId(0, 0))]
    no_data = LocationLayout.full(TreeShape(1, 2), 2, data_on=False)
    assert no_data.size == 6


def test_no_fault_probability_closed_form():
    assert no_fault_probability(10, 0.1) == pytest.approx(0.9 ** 10)
    assert no_fault_probability(0, 0.3) == 1.0
    assert no_fault_probability(3, 1.0) == 0.0


def test_bernoulli_location_count_mean():
    rng = np.random.default_rng(1)
    counts = [len(sample_location_indices(1000, 0.01, rng)) for _ in range(4000)]
    assert np.mean(counts) == pytest.approx(10.0, abs=3 * np.sqrt(9.9 / 4000))


def test_conditioned_first_hit_law():
    # size 3, rate 1/2: P(first = 0, 1, 2 | any) = 4/7, 2/7, 1/7
    rng = np.random.default_rng(5)
    shots = 20000
    firsts = np.array([sample_location_indices(3, 0.5, rng, at_least_one=True)[0] for _ in range(shots)])
    freq = np.bincount(firsts, minlength=3) / shots
    expected = np.array([4, 2, 1]) / 7
    assert np.all(np.abs(freq - expected) < 4 * np.sqrt(expected * (1 - expected) / shots))
    with pytest.raises(ValueError):
        sample_location_indices(5, 0.0, rng, at_least_one=True)


def test_conditioned_streams_choose_first_nonempty_stream():
    rng = np.random.default_rng(9)
    shots = 20000
    first = []
    for _ in range(shots):
        s = sample_streams([1, 1], [0.5, 0.5], rng, at_least_one=True)
        first.append(0 if len(s[0]) else 1)
    # P(stream 0 nonempty | union nonempty) = 0.5 / 0.75
    assert np.mean(np.array(first) == 0) == pytest.approx(2 / 3, abs=0.015)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.floats(1e-4, 0.9), st.integers(0, 2 ** 32 - 1))
def test_location_indices_are_sorted_unique_in_range(size, rate, seed):
    rng = np.random.default_rng(seed)
    for cond in (False, True):
        ix = sample_location_indices(size, rate, rng, at_least_one=cond)
        assert np.all(np.diff(ix) > 0)
        assert ix.size == 0 or (ix[0] >= 0 and ix[-1] < size)
        if cond:
            assert ix.size >= 1


def test_all_location_sampler_rate():
    rng = np.random.default_rng(0)
    shape = TreeShape(2)
    size = LocationLayout.full(shape, 11).size
    counts = [len(sample_fault_locations(11, shape, 0.02, rng)) for _ in range(2000)]
    assert np.mean(counts) == pytest.approx(size * 0.02, rel=0.05)


def test_mixed_unitary_preset_outcome_applies_shift():
    shape = TreeShape(1)
    state = SparseState(shape, {make_key(0, 0, tree_address={0: ZERO}): 1.0})
    ev = forced_fault(0, 0, 0, outcome=1)  # A1: |0> -> |1>
    out = apply_mixed_unitary(state, ev, qutrit_depolarizing(0.08), np.random.default_rng(0))
    (key, amp), = out.branches.items()
    assert key == make_key(0, 0, tree_address={0: ONE})
    assert abs(amp) == pytest.approx(1.0)


def test_quasi_measure_damping_jump_and_renormalization():
    shape = TreeShape(1)
    h = 1 / np.sqrt(2)
    state = SparseState(shape, {make_key(0, 0, tree_address={0: ZERO}): h, make_key(1, 0): h})
    ch = qutrit_damping(0.3)
    jump = quasi_measure(state, forced_fault(0, 0, 0, outcome=1), ch, np.random.default_rng(0))
    # only the branch holding |0> survives the W<-0 jump, and it decays to idle
    assert jump.branches == {make_key(0, 0): pytest.approx(1.0)}
    ev = FaultEvent(FaultSite(0, NodeId(0, 0)))
    stay = quasi_measure(state, ev, ch, np.random.default_rng(4))
    assert stay.is_normalized()
    assert ev.resolution is Resolution.QUASI_MEASURED
    with pytest.raises(ValueError):
        quasi_measure(state, forced_fault(0, 0, 0), qutrit_depolarizing(0.1), np.random.default_rng(0))
