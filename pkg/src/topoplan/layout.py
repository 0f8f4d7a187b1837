"""Sharding layouts and per-operator strategy enumeration.

Device matrices are written outermost first, ``[d_{h-1}, ..., d_0]``, and a
tensor map entry ``k`` refers to ``d_k`` counted from the innermost end.
Device ranks linearize the matrix with ``d_0`` varying fastest, so a node is
a contiguous block of ``local_device_num`` ranks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

from .graph import OperatorNode, TensorSpec, is_power_of_two

REPLICATED = -1


@dataclass(frozen=True)
class DeviceMatrix:
    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.dims or any(d < 1 for d in self.dims):
            raise ValueError(f"device matrix dims must be >= 1, got {self.dims}")

    @property
    def depth(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def d(self, k: int) -> int:
        """Extent of device dimension ``d_k`` (k = 0 is innermost)."""
        return self.dims[len(self.dims) - 1 - k]

    def stride(self, k: int) -> int:
        """Rank distance between neighbours along ``d_k``."""
        return math.prod(self.dims[len(self.dims) - k:]) if k else 1

    def coords(self, rank: int) -> tuple[int, ...]:
        """Coordinates of ``rank`` indexed by k (innermost first)."""
        out = []
        for k in range(self.depth):
            out.append(rank % self.d(k))
            rank //= self.d(k)
        return tuple(out)

    def __str__(self) -> str:
        return "[" + ", ".join(map(str, self.dims)) + "]"


def validate_tensor_map(tensor_map: tuple[int, ...], matrix: DeviceMatrix) -> None:
    seen = set()
    for m in tensor_map:
        if m == REPLICATED:
            continue
        if not 0 <= m < matrix.depth:
            raise ValueError(f"tensor map entry {m} out of range for matrix {matrix}")
        if m in seen:
            raise ValueError(f"device dim {m} used twice in tensor map {tensor_map}")
        seen.add(m)


@dataclass(frozen=True)
class TensorLayout:
    spec: TensorSpec
    matrix: DeviceMatrix
    tensor_map: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensor_map", tuple(int(m) for m in self.tensor_map))
        if len(self.tensor_map) != len(self.spec.shape):
            raise ValueError(f"tensor map {self.tensor_map} does not match rank of {self.spec.shape}")
        validate_tensor_map(self.tensor_map, self.matrix)
        for s, m in zip(self.spec.shape, self.tensor_map):
            if m != REPLICATED and s % self.matrix.d(m):
                raise ValueError(f"extent {s} of {self.spec.name!r} not divisible by d_{m}="
                                 f"{self.matrix.d(m)}")

    @property
    def shard_shape(self) -> tuple[int, ...]:
        return tuple(s if m == REPLICATED else s // self.matrix.d(m)
                     for s, m in zip(self.spec.shape, self.tensor_map))

    @property
    def split_factor(self) -> int:
        return math.prod(self.matrix.d(m) for m in self.tensor_map if m != REPLICATED)

    @property
    def shard_elements(self) -> int:
        return self.spec.numel // self.split_factor

    @property
    def shard_bytes(self) -> int:
        return self.shard_elements * self.spec.element_size

    @property
    def replication(self) -> int:
        return self.matrix.size // self.split_factor


@dataclass(frozen=True)
class OperatorStrategy:
    """Per-axis degrees and device map of one operator.

    ``device_matrix`` keeps only the axes with degree > 1, ordered by their
    device-map index. :attr:`display_matrix` is the per-axis degree tuple,
    the form used when listing strategies.
    """

    op_id: str
    axes: tuple[str, ...]
    degrees: tuple[int, ...]
    device_map: tuple[int, ...]
    device_matrix: DeviceMatrix

    @property
    def display_matrix(self) -> tuple[int, ...]:
        return self.degrees

    @property
    def total_devices(self) -> int:
        return math.prod(self.degrees)

    def degree(self, axis: str) -> int:
        return self.degrees[self.axes.index(axis)]

    def label(self) -> str:
        return "(" + ",".join(map(str, self.degrees)) + ")/(" + ",".join(map(str, self.device_map)) + ")"

    def canonical(self) -> tuple:
        """Equality key that ignores size-1 device-matrix dims."""
        return (self.op_id, self.axes, self.degrees, self.device_map)


def _log2(n: int) -> int:
    if not is_power_of_two(n):
        raise ValueError(f"{n} is not a power of two")
    return n.bit_length() - 1


def strategy_count(p: int, total_devices: int) -> int:
    """Closed-form number of strategies for ``p`` axes on ``2**n`` devices."""
    if p < 1:
        raise ValueError("need at least one partitionable axis")
    n = _log2(total_devices)
    if n == 0:
        return 1
    return sum(math.factorial(i) * math.comb(p, i) * math.comb(n - 1, i - 1)
               for i in range(1, min(p, n) + 1))


@lru_cache(maxsize=None)
def _degree_tuples(p: int, n: int) -> tuple[tuple[int, ...], ...]:
    # compositions of n into p non-negative parts, as powers of two, lexicographic
    out = []
    for exps in itertools.product(range(n + 1), repeat=p):
        if sum(exps) == n:
            out.append(tuple(1 << e for e in exps))
    return tuple(sorted(out))


def _matrix_for(degrees: tuple[int, ...], device_map: tuple[int, ...]) -> DeviceMatrix:
    mapped = sorted(((m, d) for d, m in zip(degrees, device_map) if m != REPLICATED), reverse=True)
    if not mapped:
        return DeviceMatrix((1,))
    return DeviceMatrix(tuple(d for _, d in mapped))


def make_strategy(op_id: str, axes: tuple[str, ...], degrees: tuple[int, ...],
                  device_map: tuple[int, ...]) -> OperatorStrategy:
    degrees = tuple(degrees)
    device_map = tuple(device_map)
    if len(degrees) != len(axes) or len(device_map) != len(axes):
        raise ValueError("degrees and device map must have one entry per axis")
    for d, m in zip(degrees, device_map):
        if (d == 1) != (m == REPLICATED):
            raise ValueError(f"axis with degree {d} cannot have map {m}")
        _log2(d)
    used = sorted(m for m in device_map if m != REPLICATED)
    if used != list(range(len(used))):
        raise ValueError(f"device map {device_map} must use dims 0..{len(used) - 1} exactly once")
    return OperatorStrategy(op_id, tuple(axes), degrees, device_map, _matrix_for(degrees, device_map))


def enumerate_strategies(op: OperatorNode, total_devices: int) -> list[OperatorStrategy]:
    """All strategies of ``op``: degrees ascending, then device map descending."""
    axes = op.axis_names
    p = len(axes)
    n = _log2(total_devices)
    out: list[OperatorStrategy] = []
    for degrees in _degree_tuples(p, n):
        mapped = [i for i, d in enumerate(degrees) if d > 1]
        maps = []
        for perm in itertools.permutations(range(len(mapped))):
            dm = [REPLICATED] * p
            for axis_idx, dev_idx in zip(mapped, perm):
                dm[axis_idx] = dev_idx
            maps.append(tuple(dm))
        for dm in sorted(maps, reverse=True):
            out.append(make_strategy(op.id, axes, degrees, dm))
    return out


def derive_tensor_layouts(op: OperatorNode, strategy: OperatorStrategy) -> dict[str, TensorLayout]:
    """Layout of every tensor of ``op`` under ``strategy``.

    A tensor dimension sliced by axis ``a`` inherits ``a``'s device-map entry;
    dimensions no axis touches are replicated.
    """
    if strategy.axes != op.axis_names:
        raise ValueError(f"strategy axes {strategy.axes} do not match operator {op.id!r}")
    maps = {t.name: [REPLICATED] * len(t.shape) for t in op.tensors}
    for a, m in zip(op.axes, strategy.device_map):
        for tname, dim in a.slices:
            maps[tname][dim] = m
    return {t.name: TensorLayout(t, strategy.device_matrix, tuple(maps[t.name])) for t in op.tensors}


def symbolic_shape(op: OperatorNode, strategy: OperatorStrategy, tensor: str,
                   dim_names: dict[str, tuple[str, ...]] | None = None) -> str:
    """Shard shape with symbolic extents, e.g. ``(b, in/2)``.

    Without ``dim_names`` each dimension is named after the axis slicing it.
    """
    t = op.tensor(tensor)
    names = list(dim_names[tensor]) if dim_names and tensor in dim_names else [str(s) for s in t.shape]
    if not dim_names:
        for a in op.axes:
            for tname, dim in a.slices:
                if tname == tensor:
                    names[dim] = a.name
    degree_of = {}
    for a, d in zip(op.axes, strategy.degrees):
        for tname, dim in a.slices:
            if tname == tensor:
                degree_of[dim] = d
    parts = []
    for i, nm in enumerate(names):
        d = degree_of.get(i, 1)
        parts.append(nm if d == 1 else f"{nm}/{d}")
    return "(" + ", ".join(parts) + ")"
