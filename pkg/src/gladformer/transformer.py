"""Spectrum-enhanced graph transformer branch.

The base graph is augmented with a supernode wired to every node. Node states
are embedded, degree-scaled, and pushed through ``L`` attention layers whose
scores are biased by dense random-walk features. The supernode's state from
every layer is combined into a graph vector, which is then enhanced with the
per-feature Rayleigh quotients of the original (unaugmented) graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .dataset import Graph
from .spectral import adjacency, rrwp_from_adjacency

Params = Mapping[str, DTensor]


@dataclass(frozen=True)
class AugmentedGraph:
    base: Graph
    supernode: int
    adjacency: np.ndarray
    rrwp: np.ndarray

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


@dataclass(frozen=True)
class PairIndex:
    """Random-walk features of every ordered pair ``(i, j)``, row-major."""

    edge_feats: np.ndarray  # (size*size, T)

    @classmethod
    def build(cls, aug: AugmentedGraph) -> "PairIndex":
        return cls(aug.rrwp.reshape(aug.size * aug.size, -1))


def add_supernode(g: Graph, steps: int) -> AugmentedGraph:
    n = g.n
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = adjacency(g)
    a[n, :n] = a[:n, n] = 1.0
    return AugmentedGraph(g, n, a, rrwp_from_adjacency(a, steps))


def linear(x: DTensor, w: DTensor, b: DTensor | None = None) -> DTensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def init_embed(x: DTensor, w: DTensor, b: DTensor) -> DTensor:
    return ad.relu(linear(x, w, b))


def degree_scale(h: DTensor, degrees: np.ndarray, theta1: DTensor, theta2: DTensor) -> DTensor:
    logdeg = ad.constant(np.log1p(np.asarray(degrees, dtype=np.float64)).reshape(-1, 1))
    return ad.add(ad.mul(h, theta1), ad.mul(logdeg, ad.mul(h, theta2)))


def attention_head(
    g: DTensor, pairs: PairIndex, wq: DTensor, wk: DTensor, wv: DTensor, we: DTensor, walpha: DTensor
) -> tuple[DTensor, DTensor]:
    """One head; returns ``(output, attention matrix)``."""
    n = g.shape[0]
    q = ad.matmul(g, wq)
    k = ad.matmul(g, wk)
    v = ad.matmul(g, wv)
    qk = ad.pair_product(q, k)
    e_hat = ad.relu(ad.add(qk, ad.matmul(ad.constant(pairs.edge_feats), we)))
    scores = ad.reshape(ad.matmul(e_hat, walpha), (n, n))
    alpha = ad.softmax_rows(scores)
    out = ad.add(ad.matmul(alpha, v), ad.pair_weighted_sum(alpha, e_hat))
    return out, alpha


def rrwp_mha(g: DTensor, pairs: PairIndex, params: Params, prefix: str, heads: int) -> DTensor:
    outs = []
    for h in range(heads):
        p = f"{prefix}.head{h}"
        o, _ = attention_head(
            g, pairs, params[f"{p}.WQ"], params[f"{p}.WK"], params[f"{p}.WV"],
            params[f"{p}.WE"], params[f"{p}.Walpha"],
        )
        outs.append(o)
    return linear(ad.concat(outs, axis=1), params[f"{prefix}.out.W"], params[f"{prefix}.out.b"])


def attention_maps(g: DTensor, pairs: PairIndex, params: Params, prefix: str, heads: int) -> list[np.ndarray]:
    maps = []
    for h in range(heads):
        p = f"{prefix}.head{h}"
        _, alpha = attention_head(
            g, pairs, params[f"{p}.WQ"], params[f"{p}.WK"], params[f"{p}.WV"],
            params[f"{p}.WE"], params[f"{p}.Walpha"],
        )
        maps.append(alpha.data)
    return maps


def gt_layer(
    g: DTensor,
    pairs: PairIndex,
    params: Params,
    prefix: str,
    heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> DTensor:
    attn = ad.dropout(rrwp_mha(g, pairs, params, f"{prefix}.mha", heads), dropout, rng)
    g1 = ad.layer_norm(ad.add(attn, g), params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
    hidden = ad.relu(linear(g1, params[f"{prefix}.ffn.W1"], params[f"{prefix}.ffn.b1"]))
    ffn = ad.dropout(linear(hidden, params[f"{prefix}.ffn.W2"], params[f"{prefix}.ffn.b2"]), dropout, rng)
    return ad.add(ad.layer_norm(ffn, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"]), g1)


def combine_supernode(states: list[DTensor], w: DTensor, b: DTensor) -> DTensor:
    if not states:
        raise ValueError("combine_supernode needs at least one layer")
    return linear(ad.concat(states, axis=1), w, b)


def spectrum_enhance(
    h_sup: DTensor, rayleigh: np.ndarray | None, params: Params, prefix: str = "gt"
) -> DTensor:
    """Concatenate the supernode summary with an embedding of the Rayleigh vector.

    ``rayleigh=None`` drops the spectral path (the ablation without it).
    """
    if rayleigh is None:
        return ad.relu(linear(h_sup, params[f"{prefix}.enhance.W"], params[f"{prefix}.enhance.b"]))
    r = ad.constant(np.asarray(rayleigh, dtype=np.float64).reshape(1, -1))
    h_rq = ad.relu(linear(r, params[f"{prefix}.rq.W"], params[f"{prefix}.rq.b"]))
    joined = ad.concat([h_sup, h_rq], axis=1)
    return ad.relu(linear(joined, params[f"{prefix}.enhance.W"], params[f"{prefix}.enhance.b"]))


def gt_branch(
    x: np.ndarray,
    aug: AugmentedGraph,
    pairs: PairIndex,
    rayleigh: np.ndarray | None,
    params: Params,
    layers: int,
    heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> DTensor:
    """Graph-level output of the transformer branch, shape ``(1, hidden)``."""
    xa = ad.concat([ad.constant(x), params["gt.super"]], axis=0)
    h = init_embed(xa, params["gt.embed.W"], params["gt.embed.b"])
    g = degree_scale(h, aug.degrees, params["gt.theta1"], params["gt.theta2"])
    sup_states = []
    for layer in range(layers):
        g = gt_layer(g, pairs, params, f"gt.layer{layer}", heads, dropout, rng)
        sup_states.append(ad.gather_rows(g, [aug.supernode]))
    h_sup = combine_supernode(sup_states, params["gt.combine.W"], params["gt.combine.b"])
    return spectrum_enhance(h_sup, rayleigh, params)
