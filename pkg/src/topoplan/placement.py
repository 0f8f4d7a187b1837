"""Explicit element-to-device placement, used to check redistribution plans.

A placement is a boolean array ``held[rank, flat_index]``. Reshaping a tensor
axis into C-ordered sub-axes leaves flat indices unchanged, so placements of
a layout and of its unified form are directly comparable.
"""

from __future__ import annotations

import numpy as np

from .layout import REPLICATED, DeviceMatrix
from .redistribution import ALLGATHER, ALLTOALL, SLICE, RedistPlan


def _coords(matrix: DeviceMatrix) -> np.ndarray:
    ranks = np.arange(matrix.size)
    return np.stack([(ranks // matrix.stride(k)) % matrix.d(k) for k in range(matrix.depth)], axis=1)


def _block_index(shape: tuple[int, ...], axis: int, parts: int) -> np.ndarray:
    idx = np.unravel_index(np.arange(int(np.prod(shape))), shape)[axis]
    return idx // (shape[axis] // parts)


def placement(shape: tuple[int, ...], matrix: DeviceMatrix, tensor_map: tuple[int, ...]) -> np.ndarray:
    coords = _coords(matrix)
    held = np.ones((matrix.size, int(np.prod(shape))), dtype=bool)
    for i, m in enumerate(tensor_map):
        if m == REPLICATED:
            continue
        block = _block_index(shape, i, matrix.d(m))
        held &= block[None, :] == coords[:, m][:, None]
    return held


def _gather(held: np.ndarray, matrix: DeviceMatrix, k: int) -> np.ndarray:
    cube = held.reshape(matrix.dims + (held.shape[1],))
    ax = matrix.depth - 1 - k
    return np.broadcast_to(cube.any(axis=ax, keepdims=True), cube.shape).reshape(held.shape).copy()


def _slice(held: np.ndarray, shape, matrix: DeviceMatrix, k: int, axis: int) -> np.ndarray:
    coords = _coords(matrix)
    block = _block_index(shape, axis, matrix.d(k))
    return held & (block[None, :] == coords[:, k][:, None])


def simulate(plan: RedistPlan, shape: tuple[int, ...]) -> np.ndarray:
    """Move data according to ``plan`` starting from its ``from_map`` placement."""
    m = plan.matrix
    held = placement(shape, m, plan.from_map)
    for op in plan.ops:
        if op.kind == SLICE:
            held = _slice(held, shape, m, op.device_dim, op.axis)
        elif op.kind == ALLGATHER:
            held = _gather(held, m, op.device_dim)
        elif op.kind == ALLTOALL:
            # each member keeps, from every peer's shard, the dst-axis block it owns
            held = _slice(_gather(held, m, op.device_dim), shape, m, op.device_dim, op.dst_axis)
        else:
            raise ValueError(op.kind)
    return held

