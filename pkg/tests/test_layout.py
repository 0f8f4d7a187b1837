import pytest
from hypothesis import given, strategies as st

from topoplan.graph import Axis, OperatorNode, TensorSpec
from topoplan.layout import (REPLICATED, DeviceMatrix, TensorLayout, derive_tensor_layouts,
                             enumerate_strategies, make_strategy, strategy_count, symbolic_shape)
from topoplan.models import matmul_op

from oracles import brute_force_strategies, strategy_as_hierarchy

DIM_NAMES = {"X": ("b", "in"), "W": ("in", "out"), "Y": ("b", "out")}

# degrees (b, in, out), device map, printed matrix, X, W, Y shards
MATMUL_4 = [
    ((1, 1, 4), (-1, -1, 0), (1, 1, 4), "(b, in)", "(in, out/4)", "(b, out/4)"),
    ((1, 2, 2), (-1, 1, 0), (1, 2, 2), "(b, in/2)", "(in/2, out/2)", "(b, out/2)"),
    ((1, 2, 2), (-1, 0, 1), (1, 2, 2), "(b, in/2)", "(in/2, out/2)", "(b, out/2)"),
    ((1, 4, 1), (-1, 0, -1), (1, 4, 1), "(b, in/4)", "(in/4, out)", "(b, out)"),
    ((2, 1, 2), (1, -1, 0), (2, 1, 2), "(b/2, in)", "(in, out/2)", "(b/2, out/2)"),
    ((2, 1, 2), (0, -1, 1), (2, 1, 2), "(b/2, in)", "(in, out/2)", "(b/2, out/2)"),
    ((2, 2, 1), (1, 0, -1), (2, 2, 1), "(b/2, in/2)", "(in/2, out)", "(b/2, out)"),
    ((2, 2, 1), (0, 1, -1), (2, 2, 1), "(b/2, in/2)", "(in/2, out)", "(b/2, out)"),
    ((4, 1, 1), (0, -1, -1), (4, 1, 1), "(b/4, in)", "(in, out)", "(b/4, out)"),
]


@pytest.fixture
def matmul():
    return matmul_op("mm", TensorSpec("X", (64, 32)), TensorSpec("W", (32, 16), weight=True),
                     TensorSpec("Y", (64, 16)))


def test_matmul_on_four_devices_golden_rows(matmul):
    rows = []
    for s in enumerate_strategies(matmul, 4):
        shards = tuple(symbolic_shape(matmul, s, t, DIM_NAMES) for t in ("X", "W", "Y"))
        rows.append((s.degrees, s.device_map, s.display_matrix) + shards)
    assert rows == MATMUL_4


def test_device_matrix_orders_dims_by_map(matmul):
    s = make_strategy("mm", ("b", "in", "out"), (1, 2, 2), (-1, 1, 0))
    # in is mapped to d_1 (outer), out to d_0 (inner)
    assert s.device_matrix.dims == (2, 2)
    s = make_strategy("mm", ("b", "in", "out"), (4, 2, 1), (0, 1, -1))
    assert s.device_matrix.dims == (2, 4)
    assert s.device_matrix.d(0) == 4


@pytest.mark.parametrize("p, n, expected", [(3, 4, 9), (1, 2, 1), (2, 8, 6), (3, 8, 21), (3, 1, 1)])
def test_strategy_count_examples(p, n, expected):
    assert strategy_count(p, n) == expected
    assert len(brute_force_strategies(p, n)) == expected


@pytest.mark.parametrize("p", [1, 2, 3, 4])
@pytest.mark.parametrize("n", [2, 4, 8, 16, 32, 64])
def test_enumeration_agrees_with_brute_force(p, n):
    op = OperatorNode("op", "other", tuple(Axis(f"a{i}", (("T", i),)) for i in range(p)),
                      (TensorSpec("T", (64,) * p),), ())
    strategies = enumerate_strategies(op, n)
    hierarchies = [strategy_as_hierarchy(s.degrees, s.device_map) for s in strategies]
    assert len(set(hierarchies)) == len(hierarchies)
    assert set(hierarchies) == brute_force_strategies(p, n)
    assert strategy_count(p, n) == len(strategies)


def test_single_device_has_only_the_trivial_strategy(matmul):
    (s,) = enumerate_strategies(matmul, 1)
    assert s.degrees == (1, 1, 1)
    assert s.device_map == (REPLICATED,) * 3
    assert s.device_matrix.dims == (1,)
    for lay in derive_tensor_layouts(matmul, s).values():
        assert lay.shard_shape == lay.spec.shape
        assert set(lay.tensor_map) == {REPLICATED}


def test_derived_layouts(matmul):
    u2 = make_strategy("mm", ("b", "in", "out"), (1, 2, 2), (-1, 1, 0))
    lays = derive_tensor_layouts(matmul, u2)
    assert lays["X"].tensor_map == (-1, 1)
    assert lays["W"].tensor_map == (1, 0)
    assert lays["Y"].tensor_map == (-1, 0)
    assert lays["W"].shard_shape == (16, 8)
    assert lays["X"].replication == 2
    u9 = make_strategy("mm", ("b", "in", "out"), (4, 1, 1), (0, -1, -1))
    lays = derive_tensor_layouts(matmul, u9)
    assert lays["X"].shard_shape == (16, 32)
    assert lays["W"].shard_shape == (32, 16)
    assert lays["W"].replication == 4


def test_layout_rejects_indivisible_extent():
    with pytest.raises(ValueError):
        TensorLayout(TensorSpec("T", (6, 4)), DeviceMatrix((4,)), (0, -1))


def test_layout_rejects_reused_device_dim():
    with pytest.raises(ValueError):
        TensorLayout(TensorSpec("T", (8, 8)), DeviceMatrix((2, 2)), (0, 0))


def test_make_strategy_rejects_inconsistent_maps():
    with pytest.raises(ValueError):
        make_strategy("mm", ("b", "in"), (2, 1), (-1, -1))
    with pytest.raises(ValueError):
        make_strategy("mm", ("b", "in"), (2, 2), (0, 2))
    with pytest.raises(ValueError):
        make_strategy("mm", ("b", "in"), (3, 1), (0, -1))


@given(st.integers(1, 4), st.integers(0, 6))
def test_every_strategy_uses_all_devices(p, log_n):
    n = 1 << log_n
    op = OperatorNode("op", "other", tuple(Axis(f"a{i}", (("T", i),)) for i in range(p)),
                      (TensorSpec("T", (64,) * p),), ())
    for s in enumerate_strategies(op, n):
        assert s.total_devices == n
        assert s.device_matrix.size == n
        mapped = sorted(m for m in s.device_map if m != REPLICATED)
        assert mapped == list(range(len(mapped)))
