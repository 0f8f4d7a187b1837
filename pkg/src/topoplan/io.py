"""JSON documents for graphs, topologies and planning results.

Every document carries a ``schema`` field. Graph documents look like::

    {"schema": "topoplan.graph/1",
     "operators": [{"id": "fc0", "kind": "matmul",
                    "inputs": [{"name": "x", "shape": [64, 32]},
                               {"name": "w", "shape": [32, 16], "weight": true}],
                    "outputs": [{"name": "y", "shape": [64, 16]}],
                    "axes": [{"name": "b", "slices": [["x", 0], ["y", 0]]}, ...]}],
     "edges": [{"src": "fc0", "dst": "fc1", "tensor": "y"}]}

``axes`` may be omitted for a matmul with two inputs and one output; the
standard b/in/out axes are then filled in. ``element_size`` defaults to 4.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .graph import (GB, Axis, ClusterTopology, ComputationGraph, Edge, Issue, OperatorNode, TensorSpec,
                    ValidationError)
from .layout import OperatorStrategy
from .models import matmul_op

GRAPH_SCHEMA = "topoplan.graph/1"
TOPOLOGY_SCHEMA = "topoplan.topology/1"
PLAN_SCHEMA = "topoplan.plan/1"
COMPARE_SCHEMA = "topoplan.compare/1"


def _fail(code: str, message: str, element: str = "") -> ValidationError:
    return ValidationError([Issue(code, message, element)])


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise _fail("missing-field", f"missing field {key!r}", where)
    return doc[key]


def _check_schema(doc: Any, expected: str) -> None:
    if not isinstance(doc, dict):
        raise _fail("bad-document", "document must be a JSON object")
    schema = doc.get("schema", expected)
    if schema != expected:
        raise _fail("bad-schema", f"expected schema {expected!r}, got {schema!r}")


def _tensor(doc: dict, where: str) -> TensorSpec:
    name, shape = _require(doc, "name", where), _require(doc, "shape", where)
    try:
        return TensorSpec(str(name), tuple(shape), int(doc.get("element_size", 4)), bool(doc.get("weight", False)))
    except (TypeError, ValueError) as exc:
        raise _fail("bad-tensor", str(exc), where) from exc


def graph_from_dict(doc: dict) -> ComputationGraph:
    _check_schema(doc, GRAPH_SCHEMA)
    try:
        return _graph_from_dict(doc)
    except ValidationError:
        raise
    except (TypeError, ValueError, AttributeError, KeyError) as exc:
        raise _fail("bad-document", f"malformed graph document: {exc}") from exc


def _graph_from_dict(doc: dict) -> ComputationGraph:
    ops = []
    for i, od in enumerate(_require(doc, "operators", "graph")):
        where = f"operators[{i}]"
        oid = str(_require(od, "id", where))
        kind = str(od.get("kind", "other"))
        inputs = tuple(_tensor(t, f"{oid}.inputs") for t in _require(od, "inputs", oid))
        outputs = tuple(_tensor(t, f"{oid}.outputs") for t in _require(od, "outputs", oid))
        if "axes" in od:
            axes = tuple(Axis(str(_require(a, "name", oid)),
                              tuple((str(t), int(d)) for t, d in _require(a, "slices", oid)))
                         for a in od["axes"])
            ops.append(OperatorNode(oid, kind, axes, inputs, outputs))
        elif kind == "matmul" and len(inputs) == 2 and len(outputs) == 1:
            ops.append(matmul_op(oid, inputs[0], inputs[1], outputs[0]))
        else:
            raise _fail("missing-field", "axes are required unless the operator is a plain matmul", oid)
    edges = tuple(Edge(str(_require(e, "src", "edge")), str(_require(e, "dst", "edge")),
                       str(_require(e, "tensor", "edge")))
                  for e in doc.get("edges", []))
    return ComputationGraph(tuple(ops), edges)


def _tensor_dict(t: TensorSpec) -> dict:
    d: dict[str, Any] = {"name": t.name, "shape": list(t.shape), "element_size": t.element_size}
    if t.weight:
        d["weight"] = True
    return d


def graph_to_dict(graph: ComputationGraph) -> dict:
    return {
        "schema": GRAPH_SCHEMA,
        "operators": [{
            "id": op.id, "kind": op.kind,
            "inputs": [_tensor_dict(t) for t in op.inputs],
            "outputs": [_tensor_dict(t) for t in op.outputs],
            "axes": [{"name": a.name, "slices": [[t, d] for t, d in a.slices]} for a in op.axes],
        } for op in graph.operators],
        "edges": [{"src": e.src, "dst": e.dst, "tensor": e.tensor} for e in graph.edges],
    }


def topology_from_dict(doc: dict) -> ClusterTopology:
    _check_schema(doc, TOPOLOGY_SCHEMA)
    try:
        return ClusterTopology.from_gbps(
            int(_require(doc, "node_count", "topology")),
            int(_require(doc, "local_device_num", "topology")),
            float(_require(doc, "intra_bandwidth_gbps", "topology")),
            float(_require(doc, "inter_bandwidth_gbps", "topology")),
            float(doc.get("device_memory_gb", 32.0)),
        )
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise _fail("bad-topology", str(exc)) from exc


def topology_to_dict(topo: ClusterTopology) -> dict:
    return {
        "schema": TOPOLOGY_SCHEMA,
        "node_count": topo.node_count,
        "local_device_num": topo.local_device_num,
        "intra_bandwidth_gbps": topo.intra_bandwidth / GB,
        "inter_bandwidth_gbps": topo.inter_bandwidth / GB,
        "device_memory_gb": topo.device_memory / GB,
    }


def load_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise _fail("unreadable", str(exc), str(path)) from exc
    except json.JSONDecodeError as exc:
        raise _fail("bad-json", str(exc), str(path)) from exc


def load_graph(path: str | Path) -> ComputationGraph:
    return graph_from_dict(load_json(path))


def load_topology(path: str | Path) -> ClusterTopology:
    return topology_from_dict(load_json(path))


def strategy_dict(s: OperatorStrategy) -> dict:
    return {"axes": list(s.axes), "degrees": list(s.degrees), "device_map": list(s.device_map),
            "device_matrix": list(s.device_matrix.dims)}


def dumps(doc: Any) -> str:
    """Stable JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
