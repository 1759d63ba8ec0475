"""Full detector: parameter layout, per-graph precomputation and forward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import DTensor, parameter
from .dataset import Graph
from .localspec import bank_features, classify, fuse, ls_branch
from .spectral import normalized_laplacian, rayleigh_vector
from .transformer import AugmentedGraph, PairIndex, add_supernode, gt_branch

ModelParams = dict[str, DTensor]


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    hidden: int = 128
    out_dim: int = 32
    walk_length: int = 4  # T
    gt_layers: int = 6  # L
    beta_order: int = 3  # M
    ls_layers: int = 4  # K
    heads: int = 4
    psi: float = 0.5
    dropout: float = 0.0
    use_gt: bool = True
    use_ls: bool = True
    use_rayleigh: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"heads={self.heads} must divide hidden={self.hidden}")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must lie in [0, 1], got {self.psi}")
        if not (self.use_gt or self.use_ls):
            raise ValueError("at least one branch must be enabled")
        for name in ("in_dim", "hidden", "out_dim", "walk_length", "gt_layers", "beta_order", "ls_layers", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PreparedGraph:
    """Everything about one graph that does not depend on parameters."""

    graph: Graph
    laplacian: np.ndarray
    rayleigh: np.ndarray
    bank: np.ndarray
    aug: AugmentedGraph
    pairs: PairIndex


def prepare_graph(g: Graph, cfg: ModelConfig) -> PreparedGraph:
    lap = normalized_laplacian(g)
    aug = add_supernode(g, cfg.walk_length)
    return PreparedGraph(
        graph=g,
        laplacian=lap,
        rayleigh=rayleigh_vector(g.x, lap),
        bank=bank_features(lap, cfg.beta_order, g.x),
        aug=aug,
        pairs=PairIndex.build(aug),
    )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Ordered name -> shape map; the order fixes initialisation and checkpoints."""
    d, h, T = cfg.in_dim, cfg.hidden, cfg.walk_length
    dh = h // cfg.heads
    shapes: dict[str, tuple[int, int]] = {}
    if cfg.use_gt:
        shapes["gt.super"] = (1, d)
        shapes["gt.embed.W"] = (d, h)
        shapes["gt.embed.b"] = (1, h)
        shapes["gt.theta1"] = (1, h)
        shapes["gt.theta2"] = (1, h)
        for layer in range(cfg.gt_layers):
            p = f"gt.layer{layer}"
            for k in range(cfg.heads):
                q = f"{p}.mha.head{k}"
                shapes[f"{q}.WQ"] = (h, dh)
                shapes[f"{q}.WK"] = (h, dh)
                shapes[f"{q}.WV"] = (h, dh)
                shapes[f"{q}.WE"] = (T, dh)
                shapes[f"{q}.Walpha"] = (dh, 1)
            shapes[f"{p}.mha.out.W"] = (h, h)
            shapes[f"{p}.mha.out.b"] = (1, h)
            shapes[f"{p}.norm1.gain"] = (1, h)
            shapes[f"{p}.norm1.bias"] = (1, h)
            shapes[f"{p}.ffn.W1"] = (h, 2 * h)
            shapes[f"{p}.ffn.b1"] = (1, 2 * h)
            shapes[f"{p}.ffn.W2"] = (2 * h, h)
            shapes[f"{p}.ffn.b2"] = (1, h)
            shapes[f"{p}.norm2.gain"] = (1, h)
            shapes[f"{p}.norm2.bias"] = (1, h)
        shapes["gt.combine.W"] = (cfg.gt_layers * h, h)
        shapes["gt.combine.b"] = (1, h)
        if cfg.use_rayleigh:
            shapes["gt.rq.W"] = (d, h)
            shapes["gt.rq.b"] = (1, h)
        shapes["gt.enhance.W"] = ((2 if cfg.use_rayleigh else 1) * h, h)
        shapes["gt.enhance.b"] = (1, h)
    if cfg.use_ls:
        shapes["ls.band.W"] = ((cfg.beta_order + 1) * d, h)
        shapes["ls.band.b"] = (1, h)
        for layer in range(cfg.ls_layers):
            shapes[f"ls.lh{layer}.W"] = (2 * (d if layer == 0 else h), h)
            shapes[f"ls.lh{layer}.b"] = (1, h)
        shapes["ls.combine.W"] = (cfg.ls_layers * h, h)
        shapes["ls.combine.b"] = (1, h)
    fused = (h if cfg.use_gt else 0) + (2 * h if cfg.use_ls else 0)
    shapes["fuse.W"] = (fused, cfg.out_dim)
    shapes["fuse.b"] = (1, cfg.out_dim)
    shapes["cls.W1"] = (cfg.out_dim, cfg.out_dim)
    shapes["cls.b1"] = (1, cfg.out_dim)
    shapes["cls.W2"] = (cfg.out_dim, 1)
    shapes["cls.b2"] = (1, 1)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit norm gains and degree scaler."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "b1", "b2", "bias") or name == "gt.theta2":
            value = np.zeros(shape)
        elif leaf == "gain" or name == "gt.theta1":
            value = np.ones(shape)
        else:
            value = _glorot(rng, *shape)
        params[name] = parameter(value, name=name)
    return params


def check_params(params: Mapping[str, DTensor], cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if list(params) != list(expected):
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        raise ValueError(f"parameter names do not match config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, config wants {shape}")


@dataclass
class ForwardOutput:
    p: DTensor  # (1, 1) anomaly probability
    embedding: DTensor  # (1, out_dim) fused graph representation


def forward(
    params: Mapping[str, DTensor],
    prep: PreparedGraph,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    h_gt = h_loc = None
    if cfg.use_gt:
        h_gt = gt_branch(
            prep.graph.x, prep.aug, prep.pairs, prep.rayleigh if cfg.use_rayleigh else None,
            params, cfg.gt_layers, cfg.heads, cfg.dropout, rng,
        )
    if cfg.use_ls:
        h_loc = ls_branch(prep.graph.x, prep.laplacian, prep.bank, params, cfg.ls_layers, cfg.psi)
    h_g = fuse(h_gt, h_loc, params["fuse.W"], params["fuse.b"])
    return ForwardOutput(classify(h_g, params), h_g)
