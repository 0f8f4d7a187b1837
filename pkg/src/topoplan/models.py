"""Built-in computation graphs approximating common benchmark models.

Only shapes and partitionable axes are modeled. Sizes are picked so that every
sliced extent divides the device counts used in the benchmarks (up to 64).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import Axis, ComputationGraph, Edge, OperatorNode, TensorSpec, check_partitionable

FAMILIES = ("mlp-chain", "transformer-layer", "alexnet-like")


def matmul_op(op_id: str, x: TensorSpec, w: TensorSpec, y: TensorSpec) -> OperatorNode:
    """``y = x @ w`` with axes b, in, out.

    ``x`` may carry trailing dims (e.g. a flattened conv feature map); axis
    ``in`` slices dim 1 of ``x`` and dim 0 of ``w``.
    """
    axes = (
        Axis("b", ((x.name, 0), (y.name, 0))),
        Axis("in", ((x.name, 1), (w.name, 0))),
        Axis("out", ((w.name, 1), (y.name, 1))),
    )
    return OperatorNode(op_id, "matmul", axes, (x, w), (y,))


def conv_op(op_id: str, x: TensorSpec, w: TensorSpec, y: TensorSpec, *,
            split_in_channels: bool = True) -> OperatorNode:
    """NCHW convolution with axes batch, cin (optional), cout; weights are OIHW."""
    axes = [Axis("batch", ((x.name, 0), (y.name, 0)))]
    if split_in_channels:
        axes.append(Axis("cin", ((x.name, 1), (w.name, 1))))
    axes.append(Axis("cout", ((w.name, 0), (y.name, 1))))
    return OperatorNode(op_id, "conv", tuple(axes), (x, w), (y,))


def elementwise_op(op_id: str, inputs: list[TensorSpec], out: TensorSpec,
                   axis_names: tuple[str, ...] = ("tokens", "hidden"), kind: str = "elementwise") -> OperatorNode:
    tensors = list(inputs) + [out]
    axes = tuple(Axis(n, tuple((t.name, d) for t in tensors)) for d, n in enumerate(axis_names))
    return OperatorNode(op_id, kind, axes, tuple(inputs), (out,))


def _t(name: str, *shape: int, weight: bool = False, element_size: int = 4) -> TensorSpec:
    return TensorSpec(name, tuple(shape), element_size, weight)


@dataclass(frozen=True)
class ModelConfig:
    family: str
    params: dict = field(default_factory=dict)

    def get(self, key: str, default: int) -> int:
        return int(self.params.get(key, default))

    @classmethod
    def parse(cls, text: str) -> "ModelConfig":
        """``family`` or ``family:key=value,key=value``."""
        family, _, rest = text.partition(":")
        params = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"bad model parameter {item!r}; expected key=value")
            params[key.strip()] = int(value)
        if family not in FAMILIES:
            raise ValueError(f"unknown model family {family!r}; choose from {', '.join(FAMILIES)}")
        return cls(family, params)


def mlp_chain(layers: int = 2, hidden: int = 1024, batch: int = 512, element_size: int = 4) -> ComputationGraph:
    ops, edges = [], []
    x = _t("x0", batch, hidden, element_size=element_size)
    for i in range(layers):
        w = _t(f"w{i}", hidden, hidden, weight=True, element_size=element_size)
        y = _t(f"x{i + 1}", batch, hidden, element_size=element_size)
        ops.append(matmul_op(f"fc{i}", x, w, y))
        if i:
            edges.append(Edge(f"fc{i - 1}", f"fc{i}", x.name))
        x = y
    return ComputationGraph(tuple(ops), tuple(edges))


def transformer_layer(hidden: int = 2304, seq: int = 2048, batch: int = 8, element_size: int = 2) -> ComputationGraph:
    """One Megatron-style layer over flattened tokens (batch * seq rows).

    Attention core is a single operator partitionable over whole sequences
    and over head groups; LayerNorm, GeLU and residual adds are elementwise.
    """
    h, n = hidden, batch * seq
    es = element_size

    def act(name: str, width: int) -> TensorSpec:
        return _t(name, n, width, element_size=es)

    x0 = act("x0", h)
    ln1 = elementwise_op("ln1", [x0], act("ln1_out", h))
    qkv = matmul_op("qkv", act("ln1_out", h), _t("w_qkv", h, 3 * h, weight=True, element_size=es),
                    act("qkv_out", 3 * h))
    attn_in, attn_out = act("qkv_out", 3 * h), act("ctx", h)
    attn = OperatorNode("attn", "other", (
        # rows are batch-major, so contiguous row blocks are whole sequences
        Axis("batch", ((attn_in.name, 0), (attn_out.name, 0))),
        Axis("heads", ((attn_in.name, 1), (attn_out.name, 1))),
    ), (attn_in,), (attn_out,))
    proj = matmul_op("proj", act("ctx", h), _t("w_proj", h, h, weight=True, element_size=es), act("proj_out", h))
    add1 = elementwise_op("add1", [act("proj_out", h), x0], act("res1", h))
    ln2 = elementwise_op("ln2", [act("res1", h)], act("ln2_out", h))
    fc1 = matmul_op("fc1", act("ln2_out", h), _t("w_fc1", h, 4 * h, weight=True, element_size=es),
                    act("fc1_out", 4 * h))
    gelu = elementwise_op("gelu", [act("fc1_out", 4 * h)], act("gelu_out", 4 * h))
    fc2 = matmul_op("fc2", act("gelu_out", 4 * h), _t("w_fc2", 4 * h, h, weight=True, element_size=es),
                    act("fc2_out", h))
    add2 = elementwise_op("add2", [act("fc2_out", h), act("res1", h)], act("out", h))
    ops = (ln1, qkv, attn, proj, add1, ln2, fc1, gelu, fc2, add2)
    edges = (
        Edge("ln1", "qkv", "ln1_out"),
        Edge("qkv", "attn", "qkv_out"),
        Edge("attn", "proj", "ctx"),
        Edge("proj", "add1", "proj_out"),
        Edge("add1", "ln2", "res1"),
        Edge("add1", "add2", "res1"),
        Edge("ln2", "fc1", "ln2_out"),
        Edge("fc1", "gelu", "fc1_out"),
        Edge("gelu", "fc2", "gelu_out"),
        Edge("fc2", "add2", "fc2_out"),
    )
    return ComputationGraph(ops, edges)


# (out channels, kernel, output spatial size after pooling); channel counts are
# rounded up to multiples of 64 where the classic values are not
ALEXNET_CONVS = ((128, 11, 27), (256, 5, 13), (384, 3, 13), (384, 3, 13), (256, 3, 6))
ALEXNET_FCS = (4096, 4096, 1024)


def alexnet_like(batch: int = 128, element_size: int = 4) -> ComputationGraph:
    """Five convolutions followed by three fully-connected layers.

    The first convolution sees 3 input channels, so only its batch and
    output-channel axes are partitionable.
    """
    es = element_size
    ops, edges = [], []
    x = _t("image", batch, 3, 227, 227, element_size=es)
    cin = 3
    prev = None
    for i, (cout, k, hw) in enumerate(ALEXNET_CONVS, start=1):
        w = _t(f"conv{i}_w", cout, cin, k, k, weight=True, element_size=es)
        y = _t(f"conv{i}_out", batch, cout, hw, hw, element_size=es)
        ops.append(conv_op(f"conv{i}", x, w, y, split_in_channels=i > 1))
        if prev:
            edges.append(Edge(prev, f"conv{i}", x.name))
        prev, x, cin = f"conv{i}", y, cout
    features = cin * x.shape[2] * x.shape[3]
    for i, width in enumerate(ALEXNET_FCS, start=1):
        fan_in = features if i == 1 else x.shape[1]
        w = _t(f"fc{i}_w", fan_in, width, weight=True, element_size=es)
        y = _t(f"fc{i}_out", batch, width, element_size=es)
        ops.append(matmul_op(f"fc{i}", x, w, y))
        edges.append(Edge(prev, f"fc{i}", x.name))
        prev, x = f"fc{i}", y
    return ComputationGraph(tuple(ops), tuple(edges))


def build_graph(cfg: ModelConfig, total_devices: int | None = None) -> ComputationGraph:
    """Build the graph for ``cfg``; raise if an extent cannot be split ``total_devices`` ways."""
    if cfg.family == "mlp-chain":
        graph = mlp_chain(cfg.get("layers", 2), cfg.get("hidden", 1024), cfg.get("batch", 512),
                          cfg.get("element_size", 4))
    elif cfg.family == "transformer-layer":
        graph = transformer_layer(cfg.get("hidden", 2304), cfg.get("seq", 2048), cfg.get("batch", 8),
                                  cfg.get("element_size", 2))
    elif cfg.family == "alexnet-like":
        graph = alexnet_like(cfg.get("batch", 128), cfg.get("element_size", 4))
    else:
        raise ValueError(f"unknown model family {cfg.family!r}")
    if total_devices is not None:
        check_partitionable(graph, total_devices).raise_if_errors()
    return graph


def parameter_count(graph: ComputationGraph) -> int:
    return sum(t.numel for op in graph.operators for t in op.inputs if t.weight)
