"""Strategy-expanded auxiliary graph with priced edges.

Every operator is expanded into one node per strategy; every original edge
becomes a complete bipartite block between the two strategy sets. An edge
``(u_a, w_a)`` carries the intra-operator cost of ``w_a`` plus the cost of
redistributing the shared tensor from ``u_a``'s layout to ``w_a``'s layout,
together with the raw byte volume of the same communication and a memory
weight.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .costmodel import ALLREDUCE, BandwidthEnv, CollectiveCall, collective_breakdown, plan_cost
from .graph import ClusterTopology, ComputationGraph, OperatorNode, TensorSpec
from .layout import (REPLICATED, OperatorStrategy, TensorLayout, derive_tensor_layouts,
                     enumerate_strategies, make_strategy)
from .redistribution import plan_volume, redistribute

logger = logging.getLogger(__name__)

MODES = ("topology", "volume")
VIRTUAL_PREFIX = "<source>"


@dataclass(frozen=True)
class AuxNode:
    op_id: str
    index: int
    strategy: OperatorStrategy
    intra_cost: float  # seconds
    intra_volume: float  # bytes
    memory: float  # bytes per device (weights + outputs)


@dataclass(frozen=True)
class AuxEdge:
    src: AuxNode
    dst: AuxNode
    cost: float
    volume: float
    memory: float


@dataclass
class EdgeBlock:
    src: str
    dst: str
    tensor: str
    cost: np.ndarray  # (|S_src|, |S_dst|) seconds
    volume: np.ndarray  # bytes
    memory: np.ndarray  # bytes
    virtual: bool = False

    @property
    def size(self) -> int:
        return self.cost.size


@dataclass
class AuxiliaryGraph:
    graph: ComputationGraph
    topology: ClusterTopology
    mode: str
    order: list[str]  # group order: virtual sources first, then topological
    groups: dict[str, list[AuxNode]]
    blocks: list[EdgeBlock]
    memory_scope: str = "device"
    virtual: set[str] = field(default_factory=set)

    @property
    def num_nodes(self) -> int:
        return sum(len(self.groups[g]) for g in self.order if g not in self.virtual)

    @property
    def num_edges(self) -> int:
        return sum(b.size for b in self.blocks if not b.virtual)

    @property
    def num_virtual_edges(self) -> int:
        return sum(b.size for b in self.blocks if b.virtual)

    def weights(self, mode: str | None = None) -> list[np.ndarray]:
        mode = mode or self.mode
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return [b.cost if mode == "topology" else b.volume for b in self.blocks]

    def edges(self) -> Iterator[AuxEdge]:
        for b in self.blocks:
            su, sw = self.groups[b.src], self.groups[b.dst]
            for i, u in enumerate(su):
                for j, w in enumerate(sw):
                    yield AuxEdge(u, w, float(b.cost[i, j]), float(b.volume[i, j]), float(b.memory[i, j]))

    def evaluate(self, selection: dict[str, int], what: str = "cost") -> float:
        """Sum of one edge quantity over the edges selected by ``selection``.

        Blocks are summed in order so the value is bit-reproducible.
        """
        total = 0.0
        for b in self.blocks:
            mat = getattr(b, what)
            total += float(mat[selection.get(b.src, 0), selection[b.dst]])
        return total

    def dump(self) -> dict:
        return {
            "schema": "topoplan.auxgraph/1",
            "mode": self.mode,
            "memory_scope": self.memory_scope,
            "order": list(self.order),
            "groups": {
                g: [{"index": n.index, "degrees": list(n.strategy.degrees),
                     "device_map": list(n.strategy.device_map),
                     "device_matrix": list(n.strategy.device_matrix.dims),
                     "intra_cost": n.intra_cost, "intra_volume": n.intra_volume, "memory": n.memory}
                    for n in self.groups[g]]
                for g in self.order
            },
            "blocks": [{"src": b.src, "dst": b.dst, "tensor": b.tensor, "virtual": b.virtual,
                        "cost": b.cost.tolist(), "volume": b.volume.tolist(), "memory": b.memory.tolist()}
                       for b in self.blocks],
        }


# --------------------------------------------------------------------------
# node-local quantities


def intra_operator_cost(op: OperatorNode, strategy: OperatorStrategy, env: BandwidthEnv,
                        layouts: dict[str, TensorLayout] | None = None) -> tuple[float, float]:
    """(seconds, bytes) of the partial-sum AllReduces ``strategy`` induces.

    A tensor that some axis with degree > 1 does not slice is produced (in the
    forward pass, or as a gradient in the backward pass) as partial sums over
    that axis and must be AllReduced across it. For a MatMul this yields the
    weight-gradient reduction over the data-parallel degree, the output
    reduction over the row degree and the input-gradient reduction over the
    column degree. Elementwise operators never reduce.
    """
    if op.kind == "elementwise":
        return 0.0, 0.0
    layouts = layouts or derive_tensor_layouts(op, strategy)
    cost = volume = 0.0
    for t in op.tensors:
        lay = layouts[t.name]
        call = CollectiveCall(ALLREDUCE, lay.matrix, lay.tensor_map, float(lay.shard_bytes))
        if call.group_size <= 1:
            continue
        b = collective_breakdown(call, env)
        cost += b.cost
        volume += b.volume
    return cost, volume


def operator_memory(op: OperatorNode, strategy: OperatorStrategy,
                    layouts: dict[str, TensorLayout] | None = None) -> float:
    """Per-device bytes of weight shards plus output shards."""
    layouts = layouts or derive_tensor_layouts(op, strategy)
    total = sum(layouts[t.name].shard_bytes for t in op.inputs if t.weight)
    total += sum(layouts[t.name].shard_bytes for t in op.outputs)
    return float(total)


def redistribution_weight(src: TensorLayout, dst: TensorLayout, env: BandwidthEnv) -> tuple[float, float]:
    """(seconds, bytes) to move a tensor from layout ``src`` to ``dst``."""
    unified, plan = redistribute(src, dst)
    nbytes = src.spec.nbytes
    return plan_cost(plan, nbytes, env), float(plan_volume(plan, nbytes))


def edge_weight(u: OperatorNode, u_a: OperatorStrategy, w: OperatorNode, w_a: OperatorStrategy,
                tensor: str, topo: ClusterTopology, mode: str = "topology", *,
                in_degree: int = 1, memory_scope: str = "device") -> tuple[float, float, float]:
    """(cost, volume, memory) of the auxiliary edge ``(u_a, w_a)``.

    ``cost`` is seconds in topology mode and bytes in volume mode. The
    node-local parts of ``w_a`` are split evenly over ``w``'s in-edges so that
    a full selection counts them once.
    """
    env = BandwidthEnv.from_topology(topo)
    src = derive_tensor_layouts(u, u_a)[tensor]
    w_layouts = derive_tensor_layouts(w, w_a)
    r_cost, r_vol = redistribution_weight(src, w_layouts[tensor], env)
    i_cost, i_vol = intra_operator_cost(w, w_a, env, w_layouts)
    mem = operator_memory(w, w_a, w_layouts)
    if memory_scope == "cluster":
        mem *= topo.total_devices
    volume = r_vol + i_vol / in_degree
    cost = r_cost + i_cost / in_degree
    return (cost if mode == "topology" else volume), volume, mem / in_degree


# --------------------------------------------------------------------------
# construction


def _layout_key(lay: TensorLayout) -> tuple:
    return (lay.matrix.dims, lay.tensor_map)


def _price_pairs(args):
    spec, src_layouts, dst_layouts, env = args
    n, m = len(src_layouts), len(dst_layouts)
    cost = np.empty((n, m))
    vol = np.empty((n, m))
    for i, (sdims, smap) in enumerate(src_layouts):
        s = TensorLayout(spec, _matrix(sdims), smap)
        for j, (ddims, dmap) in enumerate(dst_layouts):
            if (sdims, smap) == (ddims, dmap):
                cost[i, j] = vol[i, j] = 0.0
                continue
            d = TensorLayout(spec, _matrix(ddims), dmap)
            cost[i, j], vol[i, j] = redistribution_weight(s, d, env)
    return cost, vol


def _matrix(dims):
    from .layout import DeviceMatrix
    return DeviceMatrix(dims)


def _unique(layouts: list[TensorLayout]) -> tuple[list[tuple], np.ndarray]:
    keys: dict[tuple, int] = {}
    idx = []
    for lay in layouts:
        idx.append(keys.setdefault(_layout_key(lay), len(keys)))
    return list(keys), np.asarray(idx, dtype=np.intp)


def build_auxiliary_graph(graph: ComputationGraph, topo: ClusterTopology, mode: str = "topology", *,
                          virtual_sources: bool = True, memory_scope: str = "device",
                          workers: int = 1) -> AuxiliaryGraph:
    """Expand ``graph`` over all strategies on ``topo``'s devices and price every edge.

    Redistribution prices depend only on the two tensor layouts, so each
    distinct layout pair of a block is priced once.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if memory_scope not in ("device", "cluster"):
        raise ValueError("memory_scope must be 'device' or 'cluster'")
    env = BandwidthEnv.from_topology(topo)
    n_dev = topo.total_devices
    ops = {o.id: o for o in graph.operators}
    topo_order = graph.topological_order()
    if len(topo_order) != len(ops):
        raise ValueError("computation graph contains a cycle")
    mem_scale = n_dev if memory_scope == "cluster" else 1

    strategies: dict[str, list[OperatorStrategy]] = {}
    layouts: dict[str, list[dict[str, TensorLayout]]] = {}
    groups: dict[str, list[AuxNode]] = {}
    for oid in topo_order:
        op = ops[oid]
        strategies[oid] = enumerate_strategies(op, n_dev)
        layouts[oid] = [derive_tensor_layouts(op, s) for s in strategies[oid]]
        nodes = []
        for i, (s, lays) in enumerate(zip(strategies[oid], layouts[oid])):
            c, v = intra_operator_cost(op, s, env, lays)
            nodes.append(AuxNode(oid, i, s, c, v, operator_memory(op, s, lays) * mem_scale))
        groups[oid] = nodes

    in_deg = {oid: graph.in_degree(oid) for oid in ops}
    order: list[str] = []
    virtual: set[str] = set()
    blocks: list[EdgeBlock] = []

    def local_parts(oid: str, share: int):
        nodes = groups[oid]
        return (np.array([n.intra_cost for n in nodes]) / share,
                np.array([n.intra_volume for n in nodes]) / share,
                np.array([n.memory for n in nodes]) / share)

    if virtual_sources:
        for oid in topo_order:
            if in_deg[oid]:
                continue
            vid = f"{VIRTUAL_PREFIX}{oid}"
            vstrat = make_strategy(vid, ("none",), (1,), (REPLICATED,))
            groups[vid] = [AuxNode(vid, 0, vstrat, 0.0, 0.0, 0.0)]
            order.append(vid)
            virtual.add(vid)
            c, v, m = local_parts(oid, 1)
            blocks.append(EdgeBlock(vid, oid, "", c[None, :].copy(), v[None, :].copy(),
                                    m[None, :].copy(), virtual=True))
    order.extend(topo_order)

    jobs, metas = [], []
    for e in graph.edges:
        spec = ops[e.src].tensor(e.tensor)
        src_keys, src_idx = _unique([lays[e.tensor] for lays in layouts[e.src]])
        dst_keys, dst_idx = _unique([lays[e.tensor] for lays in layouts[e.dst]])
        jobs.append((spec, src_keys, dst_keys, env))
        metas.append((e, src_idx, dst_idx))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            priced = list(pool.map(_price_pairs, jobs))
    else:
        cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        priced = []
        for job in jobs:
            spec, sk, dk, _ = job
            key = (spec.shape, spec.element_size, tuple(sk), tuple(dk))
            if key not in cache:
                cache[key] = _price_pairs(job)
            priced.append(cache[key])

    for (e, src_idx, dst_idx), (r_cost, r_vol) in zip(metas, priced):
        c, v, m = local_parts(e.dst, in_deg[e.dst])
        cost = r_cost[np.ix_(src_idx, dst_idx)] + c[None, :]
        vol = r_vol[np.ix_(src_idx, dst_idx)] + v[None, :]
        mem = np.broadcast_to(m[None, :], cost.shape).copy()
        blocks.append(EdgeBlock(e.src, e.dst, e.tensor, cost, vol, mem))

    aux = AuxiliaryGraph(graph, topo, mode, order, groups, blocks, memory_scope, virtual)
    logger.info("auxiliary graph: %d nodes, %d edges (+%d virtual)", aux.num_nodes, aux.num_edges,
                aux.num_virtual_edges)
    return aux
