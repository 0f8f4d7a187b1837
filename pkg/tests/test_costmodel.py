import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from topoplan.costmodel import (ALLREDUCE, BandwidthEnv, CollectiveCall, allgather_volume, allreduce_volume,
                                alltoall_volume, collective_breakdown, collective_cost, effective_bandwidth,
                                infer_ct_allgather, infer_ct_allreduce, matmul_intra_volume)
from topoplan.graph import GB, TensorSpec
from topoplan.layout import REPLICATED, DeviceMatrix, derive_tensor_layouts, make_strategy
from topoplan.models import matmul_op
from topoplan.redistribution import ALLGATHER, ALLTOALL

from oracles import alltoall_boundary_bytes, ring_allreduce_bytes

AXES = ("b", "in", "out")


def test_allreduce_volume_examples():
    assert allreduce_volume(1, 12345) == 0
    assert allreduce_volume(4, 1024) == 1536
    for n in (1, 2, 4, 8, 16):
        assert allreduce_volume(n, Fraction(1000)) == ring_allreduce_bytes(n, Fraction(1000))


def test_allgather_and_alltoall_volume_examples():
    assert allgather_volume(1, 99) == 0
    assert allgather_volume(4, 256) == 768
    assert alltoall_volume(1, 99) == 0
    assert alltoall_volume(2, 512) == 256


def test_matmul_intra_volume_sums_three_allreduces():
    assert matmul_intra_volume(1, 1, 1, 7, 8, 9) == 0
    assert matmul_intra_volume(2, 2, 1, 4, 8, 16) == 96
    d, r, c, b, i, o = 8, 2, 2, 64, 32, 16
    n = d * r * c
    expected = (allreduce_volume(d, Fraction(i * o, r * c)) + allreduce_volume(r, Fraction(b * o, d * c))
                + allreduce_volume(c, Fraction(b * i, d * r)))
    assert matmul_intra_volume(d, r, c, Fraction(b), i, o) == expected
    assert matmul_intra_volume(d, r, c, Fraction(b), i, o) == Fraction(2 * (7 * i * o + b * o + b * i), n)


def test_allreduce_of_output_over_row_degree():
    # Y shard is b*out/(d*c) elements, reduced over the r-sized group
    d, r, c, b, out = 2, 4, 2, 32, 64
    shard = Fraction(b * out, d * c)
    assert allreduce_volume(r, shard) == Fraction(2 * (r - 1) * b * out, d * r * c)


def fig3_weight_layout(device_map):
    op = matmul_op("mm", TensorSpec("X", (256, 64)), TensorSpec("W", (64, 64), weight=True),
                   TensorSpec("Y", (256, 64)))
    s = make_strategy("mm", AXES, (8, 2, 2), device_map)
    return derive_tensor_layouts(op, s)["W"]


@pytest.mark.parametrize("device_map, matrix, w_map, ct", [
    ((2, 1, 0), (8, 2, 2), (1, 0), 4),
    ((0, 2, 1), (2, 2, 8), (2, 1), 0),
    ((1, 2, 0), (2, 8, 2), (2, 0), 2),
])
def test_allreduce_ct_for_weight_gradient_placements(device_map, matrix, w_map, ct):
    lay = fig3_weight_layout(device_map)
    assert lay.matrix.dims == matrix
    assert lay.tensor_map == w_map
    assert infer_ct_allreduce(lay.matrix, lay.tensor_map, 8) == ct


def groups_of(matrix: DeviceMatrix, free_dims: set[int]) -> list[frozenset[int]]:
    """Communication groups: ranks agreeing on every dim outside ``free_dims``."""
    by_key: dict[tuple, set[int]] = {}
    for rank in range(matrix.size):
        coords = matrix.coords(rank)
        key = tuple(c for k, c in enumerate(coords) if k not in free_dims)
        by_key.setdefault(key, set()).add(rank)
    return [frozenset(g) for g in by_key.values()]


def crossing_groups_per_node(matrix: DeviceMatrix, free_dims: set[int], local: int) -> int:
    node0 = set(range(local))
    groups = groups_of(matrix, free_dims)
    if all(len({r // local for r in g}) == 1 for g in groups):
        return 0
    return sum(1 for g in groups if g & node0)


@given(st.lists(st.sampled_from((2, 4)), min_size=1, max_size=4), st.data())
def test_allreduce_ct_counts_crossing_groups(dims, data):
    matrix = DeviceMatrix(tuple(dims))
    local = data.draw(st.sampled_from([1 << i for i in range(int(math.log2(matrix.size)) + 1)]))
    mapped = data.draw(st.sets(st.integers(0, matrix.depth - 1)))
    tmap = tuple(sorted(mapped)) or (REPLICATED,)
    free = set(range(matrix.depth)) - mapped
    assert infer_ct_allreduce(matrix, tmap, local) == crossing_groups_per_node(matrix, free, local)


def test_allgather_ct_examples():
    # gather over d_0 inside a node
    assert infer_ct_allgather(DeviceMatrix((2, 4)), (0, -1), 0, 8).ct == 0
    g = infer_ct_allgather(DeviceMatrix((4, 2)), (1, 0), 1, 2)
    assert (g.ct, g.repeat) == (2, 1)
    assert infer_ct_allgather(DeviceMatrix((2, 4)), (1, 0), 1, 8).ct == 0


def test_allgather_ct_with_repeated_shards():
    # inner dim d_0 is unmapped: two replicas per node share one gather
    g = infer_ct_allgather(DeviceMatrix((4, 2)), (1, -1), 1, 2)
    assert (g.ct, g.repeat, g.k_in_node) == (1, 2, 1)


def test_effective_bandwidth_examples():
    env = BandwidthEnv(60 * GB, 12.5 * GB, 8)
    assert effective_bandwidth(0, env) == 60 * GB
    assert effective_bandwidth(8, env) == 1.5625 * GB
    assert effective_bandwidth(1, BandwidthEnv(60 * GB, 6 * GB, 8)) == 6 * GB
    with pytest.raises(ValueError):
        effective_bandwidth(-1, env)


def test_effective_bandwidth_is_monotone_in_ct():
    env = BandwidthEnv(60 * GB, 6 * GB, 16)
    values = [effective_bandwidth(ct, env) for ct in range(17)]
    assert values == sorted(values, reverse=True)


def test_allreduce_cost_for_first_placement():
    lay = fig3_weight_layout((2, 1, 0))
    env = BandwidthEnv(60 * GB, 6 * GB, 8)
    call = CollectiveCall(ALLREDUCE, lay.matrix, lay.tensor_map, 1 * GB)
    assert call.group_size == 8
    assert collective_cost(call, env) == pytest.approx(2 * 7 / 8 * GB / (6 * GB / 4), rel=1e-12)
    assert collective_cost(call, env) == pytest.approx(1.1667, abs=1e-4)


def test_alltoall_within_a_node_uses_intra_bandwidth():
    env = BandwidthEnv(60 * GB, 6 * GB, 8)
    call = CollectiveCall(ALLTOALL, DeviceMatrix((4, 8)), (0, -1), 1024.0, device_dim=0)
    b = collective_breakdown(call, env)
    assert (b.ct, b.scale) == (0, 1.0)
    assert b.cost == alltoall_volume(8, 1024.0) / (60 * GB)


def test_alltoall_spanning_nodes_scales_volume():
    env = BandwidthEnv(60 * GB, 6 * GB, 4)
    call = CollectiveCall(ALLTOALL, DeviceMatrix((8,)), (0,), 700.0, device_dim=0)
    b = collective_breakdown(call, env)
    assert b.scale == pytest.approx(16 / 7)
    assert b.ct == 1
    assert b.cost == pytest.approx(16 / 7 * alltoall_volume(8, 700.0) / (6 * GB))


@pytest.mark.parametrize("p", [2, 4, 8, 16])
def test_alltoall_boundary_traffic_matches_p2p_count(p):
    for k in (k for k in range(1, p + 1) if p % k == 0):
        shard = Fraction(4096)
        crossing = alltoall_boundary_bytes(p, k, shard)
        assert crossing == Fraction(k * (p - k), p) * shard
        env = BandwidthEnv(60 * GB, 6 * GB, k)
        b = collective_breakdown(CollectiveCall(ALLTOALL, DeviceMatrix((p,)), (0,), shard, 0), env)
        assert b.scale * b.volume == crossing if k < p else b.volume * b.scale == alltoall_volume(p, shard)


@given(st.lists(st.sampled_from((2, 4)), min_size=1, max_size=4), st.data())
def test_single_node_never_leaves_the_node(dims, data):
    matrix = DeviceMatrix(tuple(dims))
    mapped = data.draw(st.sets(st.integers(0, matrix.depth - 1)))
    tmap = tuple(sorted(mapped)) or (REPLICATED,)
    env = BandwidthEnv(60 * GB, 6 * GB, matrix.size)
    assert infer_ct_allreduce(matrix, tmap, matrix.size) == 0
    for k in range(matrix.depth):
        for kind in (ALLGATHER, ALLTOALL):
            b = collective_breakdown(CollectiveCall(kind, matrix, tmap, 1e6, k), env)
            assert b.ct == 0
            assert b.cost == b.volume / env.intra
