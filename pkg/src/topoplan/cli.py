"""``topoplan`` command-line interface.

Exit codes: 0 success, 2 invalid input, 3 memory bound infeasible, 4 solver
node budget exhausted (the best plan found is still written).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import __version__
from .auxgraph import AuxiliaryGraph, build_auxiliary_graph
from .costmodel import ALLREDUCE, BandwidthEnv, CollectiveCall, collective_breakdown
from .graph import (GB, ClusterTopology, ComputationGraph, Issue, TensorSpec, ValidationError,
                    check_partitionable, validate_graph, validate_topology)
from .io import COMPARE_SCHEMA, PLAN_SCHEMA, dumps, load_graph, load_topology, strategy_dict
from .layout import DeviceMatrix, TensorLayout, enumerate_strategies, symbolic_shape
from .models import ModelConfig, build_graph, matmul_op
from .redistribution import ALLGATHER, ALLTOALL, op_volumes, staged_plans, unify_layouts
from .solver import (DEFAULT_NODE_BUDGET, BudgetExhausted, IlpProblem, InfeasibleError, PlanSolution, export_lp,
                     formulate, solve)

logger = logging.getLogger("topoplan")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 2, 3, 4


# --------------------------------------------------------------------------
# planning pipeline


@dataclass
class PlanReport:
    graph: ComputationGraph
    topology: ClusterTopology
    mode: str
    solution: PlanSolution
    topology_cost: float  # seconds, chosen plan priced topology-aware
    total_volume: float  # bytes moved by the chosen plan
    baseline_cost: float  # seconds, volume-based plan priced topology-aware
    baseline_volume: float  # bytes, the volume-based objective value
    aux_nodes: int
    aux_edges: int

    @property
    def ratio(self) -> float:
        if self.baseline_cost == 0:
            return 1.0
        return self.topology_cost / self.baseline_cost

    def to_dict(self) -> dict:
        sol = self.solution
        return {
            "schema": PLAN_SCHEMA,
            "mode": self.mode,
            "topology": {"node_count": self.topology.node_count,
                         "local_device_num": self.topology.local_device_num,
                         "intra_bandwidth_gbps": self.topology.intra_bandwidth / GB,
                         "inter_bandwidth_gbps": self.topology.inter_bandwidth / GB,
                         "device_memory_gb": self.topology.device_memory / GB},
            "strategies": {op.id: strategy_dict(sol.strategies[op.id]) for op in self.graph.operators},
            "topology_cost_s": self.topology_cost,
            "total_volume_bytes": self.total_volume,
            "memory_bytes": sol.memory,
            "baseline_cost_s": self.baseline_cost,
            "baseline_volume_bytes": self.baseline_volume,
            "ratio": self.ratio,
            "aux_graph": {"nodes": self.aux_nodes, "edges": self.aux_edges},
            "solver": {"status": sol.status, "objective": sol.cost, "nodes": sol.nodes,
                       "root_lower_bound": sol.root_lower_bound, "gap": sol.gap},
        }


def _price(problem: IlpProblem, choice: tuple[int, ...]) -> float:
    return problem.evaluate(choice)[0]


def plan(graph: ComputationGraph, topo: ClusterTopology, mode: str = "topology", *,
         node_budget: int = DEFAULT_NODE_BUDGET, workers: int = 1,
         aux: AuxiliaryGraph | None = None) -> PlanReport:
    """Validate, expand, solve in ``mode`` and price against the volume-based baseline."""
    validate_graph(graph).raise_if_errors()
    validate_topology(topo).raise_if_errors()
    check_partitionable(graph, topo.total_devices).raise_if_errors()
    aux = aux or build_auxiliary_graph(graph, topo, mode, workers=workers)
    topo_problem = formulate(aux, topo.device_memory, "topology")
    vol_problem = formulate(aux, topo.device_memory, "volume")
    main = topo_problem if mode == "topology" else vol_problem
    sol = solve(main, node_budget=node_budget, workers=workers)
    choice = sol.choice(main)
    if mode == "volume":
        base = sol
    else:
        base = solve(vol_problem, node_budget=node_budget, workers=workers)
    base_choice = base.choice(vol_problem)
    return PlanReport(
        graph=graph, topology=topo, mode=mode, solution=sol,
        topology_cost=_price(topo_problem, choice),
        total_volume=_price(vol_problem, choice),
        baseline_cost=_price(topo_problem, base_choice),
        baseline_volume=_price(vol_problem, base_choice),
        aux_nodes=aux.num_nodes, aux_edges=aux.num_edges,
    )


# --------------------------------------------------------------------------
# argument helpers


def parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip().strip("[]()")
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def parse_topology(args) -> ClusterTopology:
    spec = args.topology
    if Path(spec).exists():
        topo = load_topology(spec)
    else:
        nodes, sep, local = spec.lower().partition("x")
        if not sep:
            raise ValidationError([Issue("bad-topology", f"{spec!r} is neither a file nor NODESxDEVICES")])
        try:
            topo = ClusterTopology.from_gbps(int(nodes), int(local), args.intra_gbps, args.inter_gbps)
        except ValueError as exc:
            raise ValidationError([Issue("bad-topology", str(exc))]) from exc
    if args.memory_gb is not None:
        topo = ClusterTopology(topo.node_count, topo.local_device_num, topo.intra_bandwidth,
                               topo.inter_bandwidth, args.memory_gb * GB)
    report = validate_topology(topo)
    for w in report.warnings:
        logger.warning("%s", w)
    report.raise_if_errors()
    return topo


def parse_graph(args, total_devices: int | None = None) -> ComputationGraph:
    if bool(args.graph) == bool(args.model):
        raise ValidationError([Issue("bad-arguments", "give exactly one of --graph or --model")])
    if args.graph:
        graph = load_graph(args.graph)
    else:
        try:
            cfg = ModelConfig.parse(args.model)
        except ValueError as exc:
            raise ValidationError([Issue("bad-model", str(exc))]) from exc
        graph = build_graph(cfg)
    report = validate_graph(graph)
    for w in report.warnings:
        logger.warning("%s", w)
    report.raise_if_errors()
    if total_devices is not None:
        check_partitionable(graph, total_devices).raise_if_errors()
    return graph


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _fmt_map(m) -> str:
    return "(" + ",".join(str(x) for x in m) + ")"


# --------------------------------------------------------------------------
# commands


def _plan_rows(rep: PlanReport) -> list[list]:
    rows = [["operator", "degrees", "device_map", "device_matrix"]]
    for op in rep.graph.operators:
        s = rep.solution.strategies[op.id]
        rows.append([op.id, _fmt_map(s.degrees), _fmt_map(s.device_map), _fmt_map(s.device_matrix.dims)])
    return rows


def cmd_plan(args) -> int:
    topo = parse_topology(args)
    graph = parse_graph(args, topo.total_devices)
    rep = plan(graph, topo, args.mode, node_budget=args.node_budget, workers=args.workers)
    if args.format == "json":
        _emit(args, dumps(rep.to_dict()))
    elif args.format == "csv":
        _emit(args, _csv(_plan_rows(rep)))
    else:
        lines = [f"plan ({rep.mode} mode) on {topo.node_count}x{topo.local_device_num} devices",
                 f"auxiliary graph: {rep.aux_nodes} nodes, {rep.aux_edges} edges", ""]
        rows = _plan_rows(rep)
        widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
        lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        sol = rep.solution
        lines += ["",
                  f"topology-aware cost: {rep.topology_cost:.6g} s",
                  f"communication volume: {rep.total_volume:.6g} B",
                  f"memory per device: {sol.memory / GB:.6g} GB",
                  f"volume-based plan cost: {rep.baseline_cost:.6g} s",
                  f"ratio: {rep.ratio:.6f}",
                  f"solver: {sol.status}, {sol.nodes} nodes, {sol.wall_time:.3f} s"]
        _emit(args, "\n".join(lines) + "\n")
    return EXIT_BUDGET if rep.solution.status == "budget_exceeded" else EXIT_OK


def cmd_compare(args) -> int:
    topo = parse_topology(args)
    graph = parse_graph(args, topo.total_devices)
    rep = plan(graph, topo, "topology", node_budget=args.node_budget, workers=args.workers)
    doc = {"schema": COMPARE_SCHEMA,
           "nodes": topo.node_count, "local_device_num": topo.local_device_num,
           "topology_plan_cost_s": rep.topology_cost,
           "volume_plan_cost_s": rep.baseline_cost,
           "volume_plan_objective_bytes": rep.baseline_volume,
           "ratio": rep.ratio,
           "reduction": 1.0 - rep.ratio}
    if args.format == "json":
        _emit(args, dumps(doc))
    elif args.format == "csv":
        keys = list(doc)[1:]
        _emit(args, _csv([keys, [doc[k] for k in keys]]))
    else:
        _emit(args, "\n".join([
            f"topology-aware plan: {rep.topology_cost:.6g} s",
            f"volume-based plan:   {rep.baseline_cost:.6g} s (objective {rep.baseline_volume:.6g} B)",
            f"ratio: {rep.ratio:.6f} (reduction {100 * (1 - rep.ratio):.2f}%)"]) + "\n")
    return EXIT_BUDGET if rep.solution.status == "budget_exceeded" else EXIT_OK


def _default_matmul():
    x = TensorSpec("X", (1024, 1024))
    w = TensorSpec("W", (1024, 1024), weight=True)
    y = TensorSpec("Y", (1024, 1024))
    return matmul_op("matmul", x, w, y), {"X": ("b", "in"), "W": ("in", "out"), "Y": ("b", "out")}


def cmd_enumerate(args) -> int:
    devices = args.devices
    if args.graph or args.model:
        graph = parse_graph(args)
        ops = [graph.op(args.op)] if args.op else list(graph.operators)
        names = None
    else:
        op, names = _default_matmul()
        ops = [op]
    out_rows, docs = [], []
    for op in ops:
        strategies = enumerate_strategies(op, devices)
        tensors = [t.name for t in op.tensors]
        header = ["operator", "u"] + list(op.axis_names) + ["device_map", "device_matrix"] + tensors
        out_rows.append(header)
        for i, s in enumerate(strategies, start=1):
            shapes = [symbolic_shape(op, s, t, names) for t in tensors]
            out_rows.append([op.id, f"u_{i}", *s.degrees, _fmt_map(s.device_map), _fmt_map(s.display_matrix),
                             *shapes])
            docs.append({"operator": op.id, "index": i, **strategy_dict(s),
                         "shards": dict(zip(tensors, shapes))})
    if args.format == "json":
        _emit(args, dumps({"schema": "topoplan.strategies/1", "devices": devices, "strategies": docs}))
    elif args.format == "csv":
        _emit(args, _csv(out_rows))
    else:
        widths: dict[int, int] = {}
        for r in out_rows:
            for i, c in enumerate(r):
                widths[i] = max(widths.get(i, 0), len(str(c)))
        _emit(args, "\n".join("  ".join(str(c).ljust(widths[i]) for i, c in enumerate(r)).rstrip()
                              for r in out_rows) + "\n")
    return EXIT_OK


def _vol_str(v: Fraction) -> str:
    return "0" if v == 0 else f"{v} Size(T)"


def cmd_redistribute(args) -> int:
    src_map, dst_map = parse_ints(args.from_map), parse_ints(args.to_map)
    matrix = DeviceMatrix(parse_ints(args.matrix))
    if args.to_matrix or args.shape:
        shape = parse_ints(args.shape) if args.shape else tuple(matrix.size for _ in src_map)
        spec = TensorSpec("T", shape)
        to_matrix = DeviceMatrix(parse_ints(args.to_matrix)) if args.to_matrix else matrix
        try:
            unified = unify_layouts(TensorLayout(spec, matrix, src_map), TensorLayout(spec, to_matrix, dst_map))
        except ValueError as exc:
            raise ValidationError([Issue("bad-layout", str(exc))]) from exc
        matrix, src_map, dst_map = unified.matrix, unified.from_map, unified.to_map
    else:
        try:
            TensorLayout(TensorSpec("T", tuple(matrix.size for _ in src_map)), matrix, src_map)
            TensorLayout(TensorSpec("T", tuple(matrix.size for _ in dst_map)), matrix, dst_map)
        except ValueError as exc:
            raise ValidationError([Issue("bad-layout", str(exc))]) from exc
    stages = staged_plans(src_map, dst_map, matrix)
    rows = [["stage", "ops", "volume"]]
    docs = []
    for name, p in stages.items():
        vols = op_volumes(p, Fraction(1))
        total = sum(vols, Fraction(0))
        rows.append([name, str(p), _vol_str(total)])
        docs.append({"stage": name, "ops": [str(o) for o in p.ops], "op_volumes": [str(v) for v in vols],
                     "volume": str(total)})
    if args.format == "json":
        _emit(args, dumps({"schema": "topoplan.redistribution/1", "matrix": list(matrix.dims),
                           "from": list(src_map), "to": list(dst_map), "stages": docs}))
    elif args.format == "csv":
        _emit(args, _csv(rows))
    else:
        lines = [f"device matrix {_fmt_map(matrix.dims)}  from {_fmt_map(src_map)}  to {_fmt_map(dst_map)}"]
        lines += [f"{r[0]:<14} {r[1]}  volume {r[2]}" for r in rows[1:]]
        _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


_COLLECTIVES = {"allreduce": ALLREDUCE, "allgather": ALLGATHER, "alltoall": ALLTOALL}


def cmd_costs(args) -> int:
    matrix = DeviceMatrix(parse_ints(args.matrix))
    tmap = parse_ints(args.map)
    kind = _COLLECTIVES[args.collective]
    if kind != ALLREDUCE and args.device_dim is None:
        raise ValidationError([Issue("bad-arguments", "--device-dim is required for allgather/alltoall")])
    env = BandwidthEnv(args.intra_gbps * GB, args.inter_gbps * GB, args.local)
    b = collective_breakdown(CollectiveCall(kind, matrix, tmap, args.data_bytes, args.device_dim), env)
    doc = {"schema": "topoplan.costs/1", "collective": b.kind, "group_size": b.group_size,
           "volume_bytes": b.volume, "ct": b.ct, "effective_bandwidth_gbps": b.bandwidth / GB,
           "scale": b.scale, "cost_s": b.cost}
    if args.format == "json":
        _emit(args, dumps(doc))
    elif args.format == "csv":
        keys = list(doc)[1:]
        _emit(args, _csv([keys, [doc[k] for k in keys]]))
    else:
        _emit(args, "\n".join(f"{k}: {v}" for k, v in list(doc.items())[1:]) + "\n")
    return EXIT_OK


def cmd_export_ilp(args) -> int:
    topo = parse_topology(args)
    graph = parse_graph(args, topo.total_devices)
    aux = build_auxiliary_graph(graph, topo, args.mode, workers=args.workers)
    _emit(args, export_lp(formulate(aux, topo.device_memory, args.mode)))
    return EXIT_OK


# --------------------------------------------------------------------------


def _add_inputs(p: argparse.ArgumentParser, topology: bool = True) -> None:
    p.add_argument("--graph", help="computation graph JSON document")
    p.add_argument("--model", help="built-in model, e.g. transformer-layer:hidden=1024")
    if topology:
        p.add_argument("--topology", default="1x8",
                       help="topology JSON document or NODESxDEVICES (default 1x8)")
        p.add_argument("--memory-gb", type=float, help="override device memory")
        p.add_argument("--mode", choices=("topology", "volume"), default="topology")
        p.add_argument("--node-budget", type=int, default=DEFAULT_NODE_BUDGET)
        p.add_argument("--workers", type=int, default=1)


def _add_bandwidth(p: argparse.ArgumentParser) -> None:
    p.add_argument("--intra-gbps", type=float, default=60.0, help="intra-node bandwidth in GB/s")
    p.add_argument("--inter-gbps", type=float, default=6.0, help="inter-node bandwidth in GB/s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topoplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="write output here instead of stdout")
        p.add_argument("--format", choices=("text", "json", "csv"), default="text")

    p = sub.add_parser("plan", help="search the best strategy assignment")
    _add_inputs(p), _add_bandwidth(p), common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("compare", help="topology-aware vs volume-based plans")
    _add_inputs(p), _add_bandwidth(p), common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("enumerate", help="list the strategies of an operator")
    _add_inputs(p, topology=False)
    p.add_argument("--op", help="operator id (default: all, or a sample matmul)")
    p.add_argument("--devices", type=int, default=4)
    common(p)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("redistribute", help="staged redistribution plan between two layouts")
    p.add_argument("--from", dest="from_map", required=True, help="tensor map, e.g. -1,1,2,-1,3")
    p.add_argument("--to", dest="to_map", required=True)
    p.add_argument("--matrix", required=True, help="device matrix outermost first, e.g. 2,2,2,2")
    p.add_argument("--to-matrix", help="target device matrix if different (needs --shape)")
    p.add_argument("--shape", help="tensor shape for unification")
    common(p)
    p.set_defaults(func=cmd_redistribute)

    p = sub.add_parser("costs", help="price one collective")
    p.add_argument("--collective", choices=sorted(_COLLECTIVES), required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--map", required=True, help="tensor map of the data before the collective")
    p.add_argument("--device-dim", type=int)
    p.add_argument("--data-bytes", type=float, required=True)
    p.add_argument("--local", type=int, default=8, help="devices per node")
    _add_bandwidth(p), common(p)
    p.set_defaults(func=cmd_costs)

    p = sub.add_parser("export-ilp", help="write the ILP in LP format")
    _add_inputs(p), _add_bandwidth(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_ilp)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        for issue in exc.issues:
            print(issue, file=sys.stderr)
        return EXIT_INVALID
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except BudgetExhausted as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
