"""Graph-level anomaly detection with a spectrum-enhanced graph transformer.

Two branches score each graph. A transformer over the graph plus a supernode
uses random-walk attention biases and Rayleigh-quotient features, and a local
branch propagates Beta-wavelet and low/high-pass filtered signals. Everything
runs on numpy with a small reverse-mode autodiff engine.
"""

from .dataset import Graph, GraphDataset, generate_synthetic, load_tudataset, make_splits
from .harness import TrainConfig, cross_validate, evaluate, train
from .loss_metrics import auc, macro_f1, voce_loss
from .model import ModelConfig, forward, init_params, prepare_graph

__all__ = [
    "Graph",
    "GraphDataset",
    "ModelConfig",
    "TrainConfig",
    "auc",
    "cross_validate",
    "evaluate",
    "forward",
    "generate_synthetic",
    "init_params",
    "load_tudataset",
    "macro_f1",
    "make_splits",
    "prepare_graph",
    "train",
    "voce_loss",
]

__version__ = "0.1.0"
