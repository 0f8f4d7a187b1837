"""Collective communication volumes and the topology-aware cost model.

Volumes follow bandwidth-optimal ring AllReduce/AllGather and pairwise
AllToAll. Costs divide a volume by an effective bandwidth that accounts for
how many communication groups of one node share the inter-node link.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .graph import ClusterTopology
from .layout import REPLICATED, DeviceMatrix
from .redistribution import ALLGATHER, ALLTOALL, SLICE, RedistPlan

logger = logging.getLogger(__name__)

ALLREDUCE = "AllReduce"


@dataclass(frozen=True)
class BandwidthEnv:
    intra: float  # bytes/s
    inter: float  # bytes/s
    local_device_num: int

    def __post_init__(self) -> None:
        if not (self.intra > 0 and self.inter > 0 and self.local_device_num >= 1):
            raise ValueError(f"invalid bandwidth environment {self}")

    @classmethod
    def from_topology(cls, topo: ClusterTopology) -> "BandwidthEnv":
        return cls(topo.intra_bandwidth, topo.inter_bandwidth, topo.local_device_num)


def allreduce_volume(group_size: int, data_size):
    return 2 * (group_size - 1) * data_size / group_size


def allgather_volume(group_size: int, shard_size):
    return (group_size - 1) * shard_size


def alltoall_volume(group_size: int, shard_size):
    return (group_size - 1) * shard_size / group_size


def matmul_intra_volume(d: int, r: int, c: int, b, in_, out):
    """Elements reduced by a MatMul under data/row/column degrees (d, r, c)."""
    return 2 * ((d - 1) * in_ * out + (r - 1) * b * out + (c - 1) * b * in_) / (d * r * c)


def _div(a: int, b: int, what: str) -> int:
    if b and a % b:
        logger.debug("%s: %d not divisible by %d, flooring", what, a, b)
    return a // b if b else 0


def infer_ct_allreduce(matrix: DeviceMatrix, tensor_map: Sequence[int], local_device_num: int) -> int:
    """Inter-node communication groups per node for an AllReduce of this tensor.

    The reduction group spans the device dims absent from ``tensor_map``.
    """
    mapped = {m for m in tensor_map if m != REPLICATED}
    remain = local_device_num
    parallel_degree = matrix.size
    for m in mapped:
        parallel_degree = _div(parallel_degree, matrix.d(m), "parallel_degree")
    device_in = 1
    for k in range(matrix.depth):
        d_k = matrix.d(k)
        if k not in mapped and remain > 1:
            if remain > d_k:
                device_in *= d_k
            else:
                # the rest of the node belongs to this dim
                device_in *= remain
        remain = _div(remain, d_k, "remain_devices")
    if device_in >= parallel_degree:
        return 0
    if device_in > 1:
        return _div(local_device_num, device_in, "ct")
    return local_device_num


@dataclass(frozen=True)
class GatherCt:
    ct: int
    repeat: int
    k_in_node: int  # members of one communication group inside a node
    parallel_degree: int


def infer_ct_allgather(matrix: DeviceMatrix, tensor_map: Sequence[int], gather_dim: int,
                       local_device_num: int) -> GatherCt:
    """Inter-node groups per node for a collective along device dim ``gather_dim``."""
    mapped = {m for m in tensor_map if m != REPLICATED}
    parallel_degree = matrix.d(gather_dim)
    temp = 1
    repeat = 1
    for k in range(gather_dim):
        temp *= matrix.d(k)
        if k not in mapped:
            repeat *= matrix.d(k)
    repeat = min(repeat, local_device_num)
    if temp >= local_device_num:
        return GatherCt(_div(local_device_num, repeat, "ct"), repeat, 1, parallel_degree)
    remain = _div(local_device_num, temp, "remain_devices")
    if remain >= parallel_degree:
        return GatherCt(0, repeat, parallel_degree, parallel_degree)
    return GatherCt(_div(temp, repeat, "ct"), repeat, remain, parallel_degree)


def effective_bandwidth(ct: int, env: BandwidthEnv) -> float:
    if ct < 0:
        raise ValueError("ct must be non-negative")
    return env.intra if ct == 0 else env.inter / ct


@dataclass(frozen=True)
class CollectiveCall:
    kind: str
    matrix: DeviceMatrix
    tensor_map: tuple[int, ...]
    data_size: float  # bytes: per-device shard, or the reduced tensor for AllReduce
    device_dim: int | None = None  # AllGather / AllToAll only

    @property
    def group_size(self) -> int:
        if self.kind == ALLREDUCE:
            mapped = {m for m in self.tensor_map if m != REPLICATED}
            g = 1
            for k in range(self.matrix.depth):
                if k not in mapped:
                    g *= self.matrix.d(k)
            return g
        return self.matrix.d(self.device_dim)


@dataclass(frozen=True)
class CostBreakdown:
    kind: str
    group_size: int
    volume: float
    ct: int
    bandwidth: float
    scale: float
    cost: float


def collective_breakdown(call: CollectiveCall, env: BandwidthEnv) -> CostBreakdown:
    p = call.group_size
    scale = 1.0
    if call.kind == ALLREDUCE:
        volume = allreduce_volume(p, call.data_size)
        ct = infer_ct_allreduce(call.matrix, call.tensor_map, env.local_device_num)
    elif call.kind == ALLGATHER:
        volume = allgather_volume(p, call.data_size)
        ct = infer_ct_allgather(call.matrix, call.tensor_map, call.device_dim, env.local_device_num).ct
    elif call.kind == ALLTOALL:
        volume = alltoall_volume(p, call.data_size)
        g = infer_ct_allgather(call.matrix, call.tensor_map, call.device_dim, env.local_device_num)
        k = g.k_in_node
        if p > k:
            ct = max(1, env.local_device_num // (k * g.repeat))
            scale = k * (p - k) / (p - 1)
        else:
            ct = 0
    else:
        raise ValueError(f"unknown collective {call.kind!r}")
    if p <= 1:
        ct = 0
    bw = effective_bandwidth(ct, env)
    return CostBreakdown(call.kind, p, volume, ct, bw, scale, scale * volume / bw)


def collective_cost(call: CollectiveCall, env: BandwidthEnv) -> float:
    """Seconds spent on ``call`` under ``env``."""
    return collective_breakdown(call, env).cost


def plan_breakdown(plan: RedistPlan, tensor_bytes: float, env: BandwidthEnv) -> list[CostBreakdown]:
    """Price every op of a redistribution plan; Slices are free."""
    out = []
    for op, before, _ in plan.steps():
        split = 1
        for m in before:
            if m != REPLICATED:
                split *= plan.matrix.d(m)
        shard = tensor_bytes / split
        if op.kind == SLICE:
            out.append(CostBreakdown(SLICE, plan.matrix.d(op.device_dim), 0.0, 0, env.intra, 1.0, 0.0))
            continue
        call = CollectiveCall(op.kind, plan.matrix, tuple(before), shard, op.device_dim)
        out.append(collective_breakdown(call, env))
    return out


def plan_cost(plan: RedistPlan, tensor_bytes: float, env: BandwidthEnv) -> float:
    return sum(b.cost for b in plan_breakdown(plan, tensor_bytes, env))
