"""Hypergraph message passing as interacting-particle dynamics."""

from .dynamics import DynamicsParams, MessageParams, NodeState
from .hypergraph import Hypergraph, LabeledDataset, load_hypergraph, propagation_operator

__all__ = [
    "DynamicsParams",
    "Hypergraph",
    "LabeledDataset",
    "MessageParams",
    "NodeState",
    "load_hypergraph",
    "propagation_operator",
]

__version__ = "0.1.0"
