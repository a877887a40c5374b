import pytest
from hypothesis import given, strategies as st

from qrambench.topology import (FaultSite, NodeId, Register, TreeShape, address_bit, affected_range,
                                flat_index, in_ranges, layer_of, merged_ranges, path_flats, routing_path,
                                unreliable_set)


@pytest.mark.parametrize("layer,pos,flat", [(0, 0, 0), (1, 0, 1), (1, 1, 2), (2, 3, 6), (3, 5, 12)])
def test_flat_index_layout(layer, pos, flat):
    assert flat_index(NodeId(layer, pos)) == flat
    assert NodeId.from_flat(flat) == NodeId(layer, pos)
    assert layer_of(flat) == layer


@pytest.mark.parametrize("layer,pos", [(-1, 0), (0, 1), (2, 4)])
def test_invalid_node_rejected(layer, pos):
    with pytest.raises(ValueError):
        NodeId(layer, pos)


def test_shape_counts():
    s = TreeShape(4, 2)
    assert (s.num_cells, s.num_nodes, s.first_leaf) == (16, 31, 15)
    with pytest.raises(ValueError):
        TreeShape(0)


def test_address_bits_are_msb_first():
    # 0b101 with n = 3: a_0 = 1, a_1 = 0, a_2 = 1
    assert [address_bit(5, t, 3) for t in range(3)] == [1, 0, 1]


def test_routing_path_n3_address5():
    path = routing_path(5, TreeShape(3))
    assert path == [(NodeId(0, 0), 1), (NodeId(1, 1), 0), (NodeId(2, 2), 1)]
    assert path_flats(5, 3) == [0, 2, 5, 12]


def test_routing_path_out_of_range():
    with pytest.raises(ValueError):
        routing_path(8, TreeShape(3))


@pytest.mark.parametrize("layer,pos,expected", [
    (0, 0, (0, 7)),   # root covers every address
    (1, 1, (4, 7)),
    (2, 1, (2, 3)),
    (3, 6, (6, 6)),   # a leaf covers one cell
])
def test_affected_range_n3(layer, pos, expected):
    assert affected_range(NodeId(layer, pos), TreeShape(3)) == expected


def test_affected_range_too_deep():
    with pytest.raises(ValueError):
        affected_range(NodeId(4, 0), TreeShape(3))


def test_merged_ranges_union():
    shape = TreeShape(3)
    faults = [FaultSite(0, NodeId(2, 0)), FaultSite(3, NodeId(2, 1)), FaultSite(5, NodeId(3, 7), Register.DATA)]
    assert merged_ranges(faults, shape) == [(0, 3), (7, 7)]
    assert unreliable_set(faults, shape) == {0, 1, 2, 3, 7}
    assert in_ranges(2, [(0, 3)]) and not in_ranges(4, [(0, 3)])


def test_fault_sort_key_orders_by_time_then_node():
    a = FaultSite(2, NodeId(1, 1))
    b = FaultSite(2, NodeId(1, 0), Register.DATA)
    c = FaultSite(1, NodeId(3, 0))
    assert sorted([a, b, c], key=FaultSite.sort_key) == [c, b, a]


@given(st.integers(1, 8).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, 2 ** n - 1),
                                                    st.integers(0, n))))
def test_address_in_range_iff_path_enters_subtree(args):
    n, address, layer = args
    shape = TreeShape(n)
    node = NodeId(layer, address >> (n - layer))
    lo, hi = affected_range(node, shape)
    assert lo <= address <= hi
    assert flat_index(node) == path_flats(address, n)[layer]
    other = NodeId(layer, (node.pos + 1) % (1 << layer))
    if other != node:
        olo, ohi = affected_range(other, shape)
        assert not olo <= address <= ohi


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 15)), max_size=6))
def test_unreliable_set_matches_direct_union(nodes):
    shape = TreeShape(4)
    faults = [NodeId(l, p % (1 << l)) for l, p in nodes]
    direct = set()
    for f in faults:
        lo, hi = affected_range(f, shape)
        direct.update(range(lo, hi + 1))
    assert unreliable_set(faults, shape) == direct
    ranges = merged_ranges(faults, shape)
    assert all(r[1] + 1 < s[0] for r, s in zip(ranges, ranges[1:]))
