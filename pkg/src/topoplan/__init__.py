"""Topology-aware intra-operator parallelism planning."""

from .auxgraph import AuxiliaryGraph, build_auxiliary_graph, edge_weight
from .costmodel import BandwidthEnv, CollectiveCall, collective_cost, effective_bandwidth
from .graph import (GB, Axis, ClusterTopology, ComputationGraph, Edge, OperatorNode, TensorSpec,
                    ValidationError, validate_graph, validate_topology)
from .layout import DeviceMatrix, OperatorStrategy, TensorLayout, derive_tensor_layouts, enumerate_strategies, strategy_count
from .models import ModelConfig, build_graph
from .redistribution import infer_redistribution, plan_volume, unify_layouts
from .solver import InfeasibleError, IlpProblem, PlanSolution, brute_force_solve, export_lp, formulate, solve

__version__ = "0.1.0"
