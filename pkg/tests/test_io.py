import json

import pytest

from topoplan.graph import ClusterTopology, ValidationError, validate_graph
from topoplan.io import (graph_from_dict, graph_to_dict, load_graph, load_topology, topology_from_dict,
                         topology_to_dict)
from topoplan.models import alexnet_like, transformer_layer


def test_graph_round_trip():
    for g in (transformer_layer(hidden=64, seq=16, batch=2), alexnet_like(batch=8)):
        doc = json.loads(json.dumps(graph_to_dict(g)))
        assert graph_from_dict(doc) == g


def test_matmul_axes_are_inferred():
    doc = {"schema": "topoplan.graph/1", "operators": [{
        "id": "mm", "kind": "matmul",
        "inputs": [{"name": "x", "shape": [8, 4]}, {"name": "w", "shape": [4, 2], "weight": True}],
        "outputs": [{"name": "y", "shape": [8, 2]}]}]}
    g = graph_from_dict(doc)
    assert g.op("mm").axis_names == ("b", "in", "out")
    assert g.op("mm").inputs[0].element_size == 4
    assert len(validate_graph(g)) == 0


@pytest.mark.parametrize("doc, code", [
    ([], "bad-document"),
    ({"schema": "other/1", "operators": []}, "bad-schema"),
    ({"operators": [{"id": "e", "kind": "elementwise", "inputs": [], "outputs": []}]}, "missing-field"),
    ({"operators": [{"id": "e", "inputs": [{"shape": [1]}], "outputs": []}]}, "missing-field"),
])
def test_malformed_graph_documents(doc, code):
    with pytest.raises(ValidationError) as err:
        graph_from_dict(doc)
    assert err.value.issues[0].code == code


def test_topology_round_trip(tmp_path):
    topo = ClusterTopology.from_gbps(2, 8, 60, 6, 16)
    path = tmp_path / "topo.json"
    path.write_text(json.dumps(topology_to_dict(topo)))
    assert load_topology(path) == topo


def test_topology_memory_defaults_to_32_gb():
    doc = {"node_count": 1, "local_device_num": 4, "intra_bandwidth_gbps": 60, "inter_bandwidth_gbps": 6}
    assert topology_from_dict(doc).device_memory == 32e9


def test_unreadable_and_invalid_files(tmp_path):
    with pytest.raises(ValidationError):
        load_graph(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValidationError) as err:
        load_graph(bad)
    assert err.value.issues[0].code == "bad-json"


def test_structurally_wrong_documents_are_validation_errors():
    with pytest.raises(ValidationError) as err:
        graph_from_dict({"operators": [17]})
    assert err.value.issues[0].code == "bad-document"
    with pytest.raises(ValidationError) as err:
        topology_from_dict({"node_count": 1})
    assert err.value.issues[0].code == "missing-field"
