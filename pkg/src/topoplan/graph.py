"""Computation graph, operator metadata and cluster topology.

The types here are plain frozen dataclasses. They do not validate on
construction so that :func:`validate_graph` and :func:`validate_topology`
can report every problem at once instead of failing on the first one.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

logger = logging.getLogger(__name__)

OPERATOR_KINDS = ("matmul", "conv", "elementwise", "other")
ELEMENT_SIZES = (1, 2, 4, 8)
GB = 1e9


def is_power_of_two(n: int) -> bool:
    return isinstance(n, int) and n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    element_size: int = 4
    weight: bool = False

    @property
    def numel(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def nbytes(self) -> int:
        return self.numel * self.element_size


@dataclass(frozen=True)
class Axis:
    """A partitionable axis and the (tensor, dimension) pairs it slices."""

    name: str
    slices: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class OperatorNode:
    id: str
    kind: str
    axes: tuple[Axis, ...]
    inputs: tuple[TensorSpec, ...]
    outputs: tuple[TensorSpec, ...]

    @property
    def tensors(self) -> tuple[TensorSpec, ...]:
        return self.inputs + self.outputs

    def tensor(self, name: str) -> TensorSpec:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(f"operator {self.id!r} has no tensor {name!r}")

    @property
    def axis_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.axes)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    tensor: str


@dataclass(frozen=True)
class ComputationGraph:
    operators: tuple[OperatorNode, ...]
    edges: tuple[Edge, ...] = ()

    def op(self, op_id: str) -> OperatorNode:
        for o in self.operators:
            if o.id == op_id:
                return o
        raise KeyError(op_id)

    def in_degree(self, op_id: str) -> int:
        return sum(1 for e in self.edges if e.dst == op_id)

    def out_degree(self, op_id: str) -> int:
        return sum(1 for e in self.edges if e.src == op_id)

    def topological_order(self) -> list[str]:
        """Kahn's algorithm; ties resolved by declaration order."""
        ids = [o.id for o in self.operators]
        indeg = {i: 0 for i in ids}
        succ: dict[str, list[str]] = defaultdict(list)
        for e in self.edges:
            if e.src in indeg and e.dst in indeg:
                indeg[e.dst] += 1
                succ[e.src].append(e.dst)
        position = {i: k for k, i in enumerate(ids)}
        ready = [i for i in ids if indeg[i] == 0]
        order: list[str] = []
        while ready:
            ready.sort(key=position.__getitem__)
            cur = ready.pop(0)
            order.append(cur)
            for nxt in succ[cur]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    ready.append(nxt)
        return order


@dataclass(frozen=True)
class ClusterTopology:
    node_count: int
    local_device_num: int
    intra_bandwidth: float  # bytes/s
    inter_bandwidth: float  # bytes/s
    device_memory: float = 32 * GB  # bytes

    @property
    def total_devices(self) -> int:
        return self.node_count * self.local_device_num

    @classmethod
    def from_gbps(cls, node_count: int, local_device_num: int, intra_gbps: float = 60.0,
                  inter_gbps: float = 6.0, device_memory_gb: float = 32.0) -> "ClusterTopology":
        return cls(node_count, local_device_num, intra_gbps * GB, inter_gbps * GB,
                   device_memory_gb * GB)


@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    element: str = ""
    severity: str = "error"

    def __str__(self) -> str:
        where = f" [{self.element}]" if self.element else ""
        return f"{self.severity}: {self.code}{where}: {self.message}"


class ValidationError(ValueError):
    def __init__(self, issues: Iterable[Issue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def warnings(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> set[str]:
        return {i.code for i in self.issues}

    def add(self, code: str, message: str, element: str = "", severity: str = "error") -> None:
        self.issues.append(Issue(code, message, element, severity))

    def raise_if_errors(self) -> None:
        if self.errors:
            raise ValidationError(self.errors)

    def __len__(self) -> int:
        return len(self.issues)


def _validate_tensor(report: ValidationReport, op_id: str, t: TensorSpec) -> None:
    where = f"{op_id}.{t.name}"
    if len(t.shape) == 0:
        report.add("bad-shape", "tensor has rank 0", where)
    for s in t.shape:
        if not isinstance(s, int) or s < 1:
            report.add("bad-shape", f"extent {s!r} is not a positive integer", where)
    if t.element_size not in ELEMENT_SIZES:
        report.add("bad-element-size", f"element_size {t.element_size} not in {ELEMENT_SIZES}", where)


def _validate_operator(report: ValidationReport, op: OperatorNode) -> None:
    if op.kind not in OPERATOR_KINDS:
        report.add("bad-kind", f"unknown operator kind {op.kind!r}", op.id)
    names = [t.name for t in op.tensors]
    dup = {n for n in names if names.count(n) > 1}
    for n in sorted(dup):
        report.add("duplicate-tensor", f"tensor {n!r} declared twice", op.id)
    for t in op.tensors:
        _validate_tensor(report, op.id, t)
    if not op.axes:
        report.add("no-axes", "operator declares no partitionable axis", op.id)
    axis_names = [a.name for a in op.axes]
    for n in sorted({n for n in axis_names if axis_names.count(n) > 1}):
        report.add("duplicate-axis", f"axis {n!r} declared twice", op.id)
    by_name = {t.name: t for t in op.tensors}
    used: dict[tuple[str, int], str] = {}
    for a in op.axes:
        if not a.slices:
            report.add("empty-axis", f"axis {a.name!r} slices no tensor dimension", op.id)
        for tname, dim in a.slices:
            t = by_name.get(tname)
            if t is None:
                report.add("dangling-tensor", f"axis {a.name!r} references unknown tensor {tname!r}",
                           f"{op.id}.{a.name}")
                continue
            if not (0 <= dim < len(t.shape)):
                report.add("bad-axis-dim", f"axis {a.name!r} slices dim {dim} of rank-{len(t.shape)} "
                           f"tensor {tname!r}", f"{op.id}.{a.name}")
                continue
            if (tname, dim) in used:
                report.add("axis-conflict", f"dim {dim} of {tname!r} sliced by both "
                           f"{used[(tname, dim)]!r} and {a.name!r}", op.id)
            used[(tname, dim)] = a.name


def _find_cycle(graph: ComputationGraph) -> list[str] | None:
    succ: dict[str, list[str]] = defaultdict(list)
    ids = {o.id for o in graph.operators}
    for e in graph.edges:
        if e.src in ids and e.dst in ids:
            succ[e.src].append(e.dst)
    color = {i: 0 for i in ids}
    stack: list[str] = []

    def dfs(u: str) -> list[str] | None:
        color[u] = 1
        stack.append(u)
        for v in succ[u]:
            if color[v] == 1:
                return stack[stack.index(v):] + [v]
            if color[v] == 0:
                found = dfs(v)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for o in graph.operators:
        if color[o.id] == 0:
            cyc = dfs(o.id)
            if cyc:
                return cyc
    return None


def validate_graph(graph: ComputationGraph) -> ValidationReport:
    """Check every graph invariant; an empty report means the graph is valid."""
    report = ValidationReport()
    ids = [o.id for o in graph.operators]
    for n in sorted({i for i in ids if ids.count(i) > 1}):
        report.add("duplicate-operator", f"operator id {n!r} declared twice", n)
    if not graph.operators:
        report.add("empty-graph", "graph has no operators")
    for op in graph.operators:
        _validate_operator(report, op)

    by_id = {o.id: o for o in graph.operators}
    for e in graph.edges:
        where = f"{e.src}->{e.dst}:{e.tensor}"
        src, dst = by_id.get(e.src), by_id.get(e.dst)
        if src is None or dst is None:
            missing = e.src if src is None else e.dst
            report.add("dangling-operator", f"edge references missing operator {missing!r}", where)
            continue
        out = {t.name: t for t in src.outputs}.get(e.tensor)
        inp = {t.name: t for t in dst.inputs}.get(e.tensor)
        if out is None:
            report.add("dangling-tensor", f"{e.src!r} has no output {e.tensor!r}", where)
        if inp is None:
            report.add("dangling-tensor", f"{e.dst!r} has no input {e.tensor!r}", where)
        if out is not None and inp is not None and tuple(out.shape) != tuple(inp.shape):
            report.add("shape-mismatch", f"producer shape {list(out.shape)} != consumer shape "
                       f"{list(inp.shape)}", where)
    cycle = _find_cycle(graph)
    if cycle:
        report.add("cycle", "graph contains a cycle: " + " -> ".join(cycle), cycle[0])
    return report


def check_partitionable(graph: ComputationGraph, total_devices: int) -> ValidationReport:
    """Every sliced extent must be divisible by the device count.

    Strategy enumeration allows any axis to take the full device count as its
    degree, so this is the condition for the complete strategy set to exist.
    """
    report = ValidationReport()
    for op in graph.operators:
        by_name = {t.name: t for t in op.tensors}
        for a in op.axes:
            for tname, dim in a.slices:
                t = by_name.get(tname)
                if t is None or not (0 <= dim < len(t.shape)):
                    continue
                if t.shape[dim] % total_devices:
                    report.add("indivisible", f"extent {t.shape[dim]} of {tname!r} dim {dim} "
                               f"(axis {a.name!r}) not divisible by {total_devices} devices",
                               f"{op.id}.{a.name}")
    return report


def validate_topology(topo: ClusterTopology) -> ValidationReport:
    report = ValidationReport()
    if not isinstance(topo.node_count, int) or topo.node_count < 1:
        report.add("bad-node-count", f"node_count {topo.node_count!r} must be a positive integer")
    if not is_power_of_two(topo.local_device_num):
        report.add("not-power-of-two", f"local_device_num {topo.local_device_num} is not a power of two")
    elif not is_power_of_two(topo.total_devices):
        report.add("not-power-of-two", f"total device count {topo.total_devices} is not a power of two")
    if not topo.inter_bandwidth > 0 or not topo.intra_bandwidth > 0:
        report.add("bad-bandwidth", "bandwidths must be positive")
    elif topo.inter_bandwidth > topo.intra_bandwidth:
        report.add("inter-exceeds-intra", "inter-node bandwidth exceeds intra-node bandwidth",
                   severity="warning")
    if not topo.device_memory > 0:
        report.add("bad-memory", "device_memory must be positive")
    return report
