"""Tensor redistribution: layout unification and Slice/AllGather/AllToAll planning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .layout import REPLICATED, DeviceMatrix, TensorLayout

logger = logging.getLogger(__name__)

SLICE = "Slice"
ALLGATHER = "AllGather"
ALLTOALL = "AllToAll"


@dataclass(frozen=True)
class RedistOp:
    kind: str
    device_dim: int
    axis: int
    dst_axis: int | None = None
    # set on AllGathers emitted by the progress fallback rather than by
    # the necessary-axis rule
    fallback: bool = False

    def apply(self, tensor_map: Sequence[int]) -> tuple[int, ...]:
        m = list(tensor_map)
        if self.kind == SLICE:
            assert m[self.axis] == REPLICATED and self.device_dim not in m
            m[self.axis] = self.device_dim
        elif self.kind == ALLGATHER:
            assert m[self.axis] == self.device_dim
            m[self.axis] = REPLICATED
        elif self.kind == ALLTOALL:
            assert m[self.axis] == self.device_dim and m[self.dst_axis] == REPLICATED
            m[self.axis] = REPLICATED
            m[self.dst_axis] = self.device_dim
        else:
            raise ValueError(self.kind)
        return tuple(m)

    def __str__(self) -> str:
        if self.kind == ALLTOALL:
            return f"AllToAll(d_{self.device_dim}, {self.axis}->{self.dst_axis})"
        return f"{self.kind}(d_{self.device_dim}, {self.axis})"


@dataclass(frozen=True)
class RedistPlan:
    matrix: DeviceMatrix
    from_map: tuple[int, ...]
    to_map: tuple[int, ...]
    ops: tuple[RedistOp, ...] = ()

    def maps(self) -> list[tuple[int, ...]]:
        """Tensor map after each op (same length as ``ops``)."""
        out, cur = [], self.from_map
        for op in self.ops:
            cur = op.apply(cur)
            out.append(cur)
        return out

    def steps(self):
        """Yield ``(op, map_before, map_after)``."""
        cur = self.from_map
        for op in self.ops:
            nxt = op.apply(cur)
            yield op, cur, nxt
            cur = nxt

    def __str__(self) -> str:
        return "[" + ", ".join(map(str, self.ops)) + "]"


# --------------------------------------------------------------------------
# unification


@dataclass(frozen=True)
class UnifiedLayouts:
    matrix: DeviceMatrix
    shape: tuple[int, ...]
    from_map: tuple[int, ...]
    to_map: tuple[int, ...]
    # original axis i covers unified axes groups[i][0] .. groups[i][1]-1
    groups: tuple[tuple[int, int], ...] = field(default=())


def _strides(matrix: DeviceMatrix) -> list[int]:
    return [matrix.stride(k) for k in range(matrix.depth)] + [matrix.size]


def _chain(points: set[int], what: str) -> list[int]:
    pts = sorted(points)
    for a, b in zip(pts, pts[1:]):
        if b % a:
            raise ValueError(f"cannot factorize {what}: {b} is not a multiple of {a}")
    return pts


def unify_layouts(src: TensorLayout, dst: TensorLayout) -> UnifiedLayouts:
    """Express two layouts of one tensor over a common device matrix and shape.

    Device dimensions are factorized until both matrices coincide, then every
    tensor axis is reshaped into sub-axes so that each sharded sub-axis maps to
    exactly one device dimension. Physical placement is unchanged. Only the
    split points that one of the two layouts actually needs are introduced.
    """
    shape = tuple(src.spec.shape)
    if tuple(dst.spec.shape) != shape:
        raise ValueError(f"shape mismatch: {shape} vs {tuple(dst.spec.shape)}")
    if src.matrix.size != dst.matrix.size:
        raise ValueError(f"device counts differ: {src.matrix.size} vs {dst.matrix.size}")

    dev_points = set(_strides(src.matrix)) | set(_strides(dst.matrix))
    axis_points = [{1, s} for s in shape]
    # (axis, lo, extent, base): axis digit of size `extent` at tensor stride `base`
    # corresponds to device digit at rank stride `lo`
    bindings = []
    for lay in (src, dst):
        bindings.append([
            (i, lay.matrix.stride(m), lay.matrix.d(m), shape[i] // lay.matrix.d(m))
            for i, m in enumerate(lay.tensor_map) if m != REPLICATED and lay.matrix.d(m) > 1
        ])

    changed = True
    while changed:
        changed = False
        for binding in bindings:
            for i, lo, e, base in binding:
                for r in list(dev_points):
                    if lo < r < lo * e:
                        if r % lo:
                            raise ValueError(f"device stride {r} does not align with d-dim stride {lo}")
                        b = base * (r // lo)
                        if b not in axis_points[i]:
                            axis_points[i].add(b)
                            changed = True
                for b in list(axis_points[i]):
                    if base < b < shape[i]:
                        if b % base or e % (b // base):
                            raise ValueError(f"extent {shape[i]} of axis {i} cannot be split at {b}")
                        r = lo * (b // base)
                        if r not in dev_points:
                            dev_points.add(r)
                            changed = True

    ranks = _chain(dev_points, "device matrix")
    inner_first = [b // a for a, b in zip(ranks, ranks[1:])]
    matrix = DeviceMatrix(tuple(reversed(inner_first)) or (1,))
    rank_index = {r: j for j, r in enumerate(ranks)}

    new_shape: list[int] = []
    groups = []
    subaxes = []  # (original axis, b_lo, b_hi)
    for i, s in enumerate(shape):
        pts = _chain(axis_points[i], f"axis {i}")
        start = len(new_shape)
        for b_hi, b_lo in zip(reversed(pts), list(reversed(pts))[1:]):
            new_shape.append(b_hi // b_lo)
            subaxes.append((i, b_lo, b_hi))
        groups.append((start, len(new_shape)))

    def remap(binding) -> tuple[int, ...]:
        by_axis = {i: (lo, e, base) for i, lo, e, base in binding}
        out = []
        for i, b_lo, b_hi in subaxes:
            if i not in by_axis:
                out.append(REPLICATED)
                continue
            lo, e, base = by_axis[i]
            if b_hi <= base:
                out.append(REPLICATED)
                continue
            r_lo = lo * (max(b_lo, base) // base)
            r_hi = lo * (b_hi // base)
            j = rank_index[r_lo]
            assert ranks[j + 1] == r_hi, "unification left a sub-axis spanning two device dims"
            out.append(j)
        return tuple(out)

    return UnifiedLayouts(matrix, tuple(new_shape), remap(bindings[0]), remap(bindings[1]),
                          tuple(groups))


# --------------------------------------------------------------------------
# optimized redistribution


def _infer_slice(cur: list[int], to: Sequence[int], ops: list[RedistOp]) -> bool:
    emitted = False
    for i, (m_cur, m_to) in enumerate(zip(cur, to)):
        if m_cur == REPLICATED and m_to != REPLICATED and m_to not in cur:
            op = RedistOp(SLICE, m_to, i)
            cur[:] = op.apply(cur)
            ops.append(op)
            emitted = True
    return emitted


def _infer_all2all(cur: list[int], to: Sequence[int], ops: list[RedistOp]) -> bool:
    for i, k in enumerate(cur):
        if k == REPLICATED or to[i] == k:
            continue
        for j, m_to in enumerate(to):
            if m_to == k and cur[j] == REPLICATED:
                op = RedistOp(ALLTOALL, k, i, j)
                cur[:] = op.apply(cur)
                ops.append(op)
                return True
    return False


def _infer_allgather(cur: list[int], to: Sequence[int], ops: list[RedistOp]) -> bool:
    for i, k in enumerate(cur):
        if k != REPLICATED and to[i] == REPLICATED:
            op = RedistOp(ALLGATHER, k, i)
            cur[:] = op.apply(cur)
            ops.append(op)
            return True
    return False


def _allgather_first_undone(cur: list[int], to: Sequence[int], ops: list[RedistOp]) -> None:
    for i, k in enumerate(cur):
        if k != REPLICATED and to[i] != k:
            op = RedistOp(ALLGATHER, k, i, fallback=True)
            cur[:] = op.apply(cur)
            ops.append(op)
            return
    raise AssertionError(f"no undone mapped axis in {cur} -> {list(to)}")


def infer_redistribution(from_map: Sequence[int], to_map: Sequence[int], matrix: DeviceMatrix,
                         *, alltoall: bool = True) -> RedistPlan:
    """Slice-first, AllToAll-fused redistribution sequence from ``from_map`` to ``to_map``.

    With ``alltoall=False`` permutations stay as AllGather + Slice pairs; that
    variant is only kept for staged reporting.
    """
    from_map, to_map = tuple(from_map), tuple(to_map)
    if len(from_map) != len(to_map):
        raise ValueError("tensor maps differ in rank")
    cur = list(from_map)
    ops: list[RedistOp] = []
    limit = matrix.depth * len(from_map) + 1
    rounds = 0
    while tuple(cur) != to_map:
        rounds += 1
        if rounds > limit:
            raise RuntimeError(f"redistribution did not converge: {from_map} -> {to_map}")
        progress = True
        while progress:
            progress = _infer_slice(cur, to_map, ops)
            while alltoall and _infer_all2all(cur, to_map, ops):
                progress = True
        if tuple(cur) == to_map:
            break
        if not _infer_allgather(cur, to_map, ops):
            _allgather_first_undone(cur, to_map, ops)
    return RedistPlan(matrix, from_map, to_map, tuple(ops))


def naive_plan(from_map: Sequence[int], to_map: Sequence[int], matrix: DeviceMatrix) -> RedistPlan:
    """Gather every sharded axis, then slice into the target layout."""
    cur, ops = tuple(from_map), []
    for i, k in enumerate(from_map):
        if k != REPLICATED:
            ops.append(RedistOp(ALLGATHER, k, i))
    for i, k in enumerate(to_map):
        if k != REPLICATED:
            ops.append(RedistOp(SLICE, k, i))
    return RedistPlan(matrix, cur, tuple(to_map), tuple(ops))


def necessary_gather_plan(from_map: Sequence[int], to_map: Sequence[int],
                          matrix: DeviceMatrix) -> RedistPlan:
    """Gather only axes whose mapping changes, then slice."""
    cur, ops = list(from_map), []
    for i, k in enumerate(from_map):
        if k != REPLICATED and to_map[i] != k:
            op = RedistOp(ALLGATHER, k, i)
            cur = list(op.apply(cur))
            ops.append(op)
    for i, k in enumerate(to_map):
        if k != REPLICATED and cur[i] != k:
            op = RedistOp(SLICE, k, i)
            cur = list(op.apply(cur))
            ops.append(op)
    return RedistPlan(matrix, tuple(from_map), tuple(to_map), tuple(ops))


def staged_plans(from_map: Sequence[int], to_map: Sequence[int],
                 matrix: DeviceMatrix) -> dict[str, RedistPlan]:
    """The plan after each optimization stage, naive first."""
    return {
        "0: Initial": naive_plan(from_map, to_map, matrix),
        "1: Remove": necessary_gather_plan(from_map, to_map, matrix),
        "2: Rearrange": infer_redistribution(from_map, to_map, matrix, alltoall=False),
        "3: Replace": infer_redistribution(from_map, to_map, matrix),
    }


def op_volumes(plan: RedistPlan, tensor_size):
    """Per-op volumes; ``tensor_size`` may be an int, float or Fraction."""
    out = []
    for op, before, _ in plan.steps():
        split = 1
        for m in before:
            if m != REPLICATED:
                split *= plan.matrix.d(m)
        shard = tensor_size / split
        p = plan.matrix.d(op.device_dim)
        if op.kind == SLICE:
            out.append(0 * shard)
        elif op.kind == ALLGATHER:
            out.append((p - 1) * shard)
        else:
            out.append((p - 1) * shard / p)
    return out


def plan_volume(plan: RedistPlan, tensor_size):
    """Total bytes moved by ``plan`` for a tensor of ``tensor_size`` bytes."""
    return sum(op_volumes(plan, tensor_size), 0 * tensor_size)


def redistribute(src: TensorLayout, dst: TensorLayout) -> tuple[UnifiedLayouts, RedistPlan]:
    unified = unify_layouts(src, dst)
    return unified, infer_redistribution(unified.from_map, unified.to_map, unified.matrix)
