import numpy as np
import pytest

from gladformer.dataset import Graph


def random_graph(rng: np.random.Generator, n: int, d: int = 3, p: float = 0.4, gid: int = 0, y: int = 0) -> Graph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    return Graph(gid, n, edges, rng.normal(size=(n, d)), y)


def permute_graph(g: Graph, perm: np.ndarray) -> Graph:
    """Relabel node ``i`` as ``perm[i]``."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    edges = np.sort(perm[g.edges], axis=1) if len(g.edges) else g.edges
    order = np.lexsort((edges[:, 1], edges[:, 0])) if len(edges) else []
    return Graph(g.id, g.n, edges[order], g.x[inv], g.y)


def edge_graph() -> Graph:
    return Graph(0, 2, [(0, 1)], np.ones((2, 1)), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
