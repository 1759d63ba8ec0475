"""Graph collections: TUDataset ingestion, downsampling, splits, synthetic data."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class IngestionError(FileNotFoundError):
    pass


class FormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(eq=False)
class Graph:
    id: int
    n: int
    edges: np.ndarray  # (m, 2) int, each undirected edge once with i < j
    x: np.ndarray  # (n, d)
    y: int

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.x.shape[0] != self.n:
            raise FormatError(f"graph {self.id}: {self.x.shape[0]} feature rows for {self.n} nodes")
        if len(self.edges):
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise FormatError(f"graph {self.id}: self-loop")
            if self.edges.min() < 0 or self.edges.max() >= self.n:
                raise FormatError(f"graph {self.id}: edge endpoint out of range")
        if self.y not in (0, 1):
            raise FormatError(f"graph {self.id}: label {self.y} not in {{0, 1}}")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def same_content(self, other: "Graph") -> bool:
        return (
            self.n == other.n
            and self.y == other.y
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.x, other.x)
        )


@dataclass(eq=False)
class GraphDataset:
    name: str
    graphs: list[Graph]
    d: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.graphs:
            raise FormatError(f"dataset {self.name!r} is empty")
        for g in self.graphs:
            if g.x.shape[1] != self.d:
                raise FormatError(f"graph {g.id} has feature dim {g.x.shape[1]}, dataset has {self.d}")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.y for g in self.graphs], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> list[Graph]:
        return [self.graphs[i] for i in indices]


@dataclass
class SplitSpec:
    seed: int
    mode: str
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)
    folds: list[list[int]] = field(default_factory=list)

    def fold_parts(self, k: int) -> tuple[list[int], list[int]]:
        """Training complement and held-out indices for fold ``k``."""
        held = self.folds[k]
        rest = [i for j, f in enumerate(self.folds) if j != k for i in f]
        return sorted(rest), sorted(held)


# Anomaly counts from the benchmark statistics; used to decide which raw label
# is the anomalous class.
EXPECTED_ANOMALIES = {
    "AIDS": 400,
    "BZR": 86,
    "COX2": 102,
    "NCI1": 2053,
    "ENZYMES": 100,
    "PROTEINS": 450,
    "PROTEINS_full": 450,
    "MCF-7": 2294,
    "MOLT-4": 3140,
    "SW-620": 2410,
    "PC-3": 1568,
}


def _read_rows(path: Path, dtype=float) -> list[list]:
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([dtype(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise FormatError(f"{path.name}:{lineno}: cannot parse {line!r}") from exc
    return rows


def _read_ints(path: Path) -> np.ndarray:
    try:
        return np.loadtxt(path, dtype=np.int64, delimiter=",", ndmin=1)
    except ValueError:
        flat = [r[0] for r in _read_rows(path, int)]
        return np.asarray(flat, dtype=np.int64)


def _choose_anomalous_label(name: str, raw: np.ndarray) -> tuple[int, str]:
    counts = Counter(raw.tolist())
    expected = EXPECTED_ANOMALIES.get(name)
    if expected is not None:
        hits = sorted(lab for lab, c in counts.items() if c == expected)
        if hits:
            return hits[0], f"raw label {hits[0]} -> 1 (count {expected} matches reference table)"
    minority = min(sorted(counts), key=lambda lab: counts[lab])
    return minority, f"raw label {minority} -> 1 (minority class, {counts[minority]} graphs)"


def load_tudataset(directory: str | Path, name: str, features: str = "auto") -> GraphDataset:
    """Read the flat-file TUDataset layout ``{name}_A.txt`` and friends.

    ``features`` picks the node feature source: ``"auto"`` uses real-valued
    node attributes when present and one-hot node labels otherwise,
    ``"concat"`` concatenates both, ``"labels"``/``"attributes"`` force one.
    """
    root = Path(directory)
    path = lambda suffix: root / f"{name}_{suffix}.txt"  # noqa: E731
    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not path(suffix).exists():
            raise IngestionError(f"missing mandatory file {path(suffix).name} in {root}")

    indicator = _read_ints(path("graph_indicator"))
    raw_labels = _read_ints(path("graph_labels"))
    n_nodes = len(indicator)
    n_graphs = len(raw_labels)
    if indicator.min() < 1 or indicator.max() > n_graphs:
        raise FormatError(f"{path('graph_indicator').name}: graph id outside 1..{n_graphs}")

    if not path("A").read_text(encoding="utf-8").strip():
        edges = np.zeros((0, 2), dtype=np.int64)
    else:
        try:
            edges = np.loadtxt(path("A"), dtype=np.int64, delimiter=",", ndmin=2)
        except ValueError:
            edges = np.asarray(_read_rows(path("A"), int), dtype=np.int64)
    if edges.shape[1] != 2:
        raise FormatError(f"{path('A').name}: expected 2 columns, got {edges.shape[1]}")
    bad = np.flatnonzero((edges < 1).any(axis=1) | (edges > n_nodes).any(axis=1))
    if len(bad):
        raise FormatError(
            f"{path('A').name}:{bad[0] + 1}: node {edges[bad[0]].tolist()} not in graph indicator"
        )
    edges = edges - 1
    gi = indicator - 1
    if np.any(gi[edges[:, 0]] != gi[edges[:, 1]]):
        row = int(np.flatnonzero(gi[edges[:, 0]] != gi[edges[:, 1]])[0])
        raise FormatError(f"{path('A').name}:{row + 1}: edge joins two different graphs")

    blocks = []
    have_labels = path("node_labels").exists()
    have_attrs = path("node_attributes").exists()
    use_labels = have_labels and (features in ("labels", "concat") or (features == "auto" and not have_attrs))
    use_attrs = have_attrs and features in ("auto", "attributes", "concat")
    if use_labels:
        node_labels = _read_ints(path("node_labels"))
        if len(node_labels) != n_nodes:
            raise FormatError(f"{path('node_labels').name}: {len(node_labels)} rows for {n_nodes} nodes")
        cats, inv = np.unique(node_labels, return_inverse=True)
        blocks.append(np.eye(len(cats))[inv])
    if use_attrs:
        rows = _read_rows(path("node_attributes"), float)
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            lineno = next(i for i, r in enumerate(rows, 1) if len(r) != len(rows[0]))
            raise FormatError(f"{path('node_attributes').name}:{lineno}: inconsistent attribute arity")
        if len(rows) != n_nodes:
            raise FormatError(f"{path('node_attributes').name}: {len(rows)} rows for {n_nodes} nodes")
        blocks.append(np.asarray(rows, dtype=np.float64))
    x_all = np.concatenate(blocks, axis=1) if blocks else np.ones((n_nodes, 1))

    anomalous, note = _choose_anomalous_label(name, raw_labels)
    order = np.argsort(gi, kind="stable")
    starts = np.searchsorted(gi[order], np.arange(n_graphs))
    ends = np.searchsorted(gi[order], np.arange(n_graphs), side="right")
    local = np.empty(n_nodes, dtype=np.int64)
    local[order] = np.arange(n_nodes) - np.repeat(starts, ends - starts)

    e_graph = gi[edges[:, 0]] if len(edges) else np.zeros(0, dtype=np.int64)
    e_sorted = np.argsort(e_graph, kind="stable")
    e_bounds = np.searchsorted(e_graph[e_sorted], np.arange(n_graphs + 1))

    graphs = []
    for k in range(n_graphs):
        nodes = order[starts[k]:ends[k]]
        ge = edges[e_sorted[e_bounds[k]:e_bounds[k + 1]]]
        le = np.sort(local[ge], axis=1) if len(ge) else np.zeros((0, 2), dtype=np.int64)
        le = le[le[:, 0] != le[:, 1]]
        le = np.unique(le, axis=0) if len(le) else le
        graphs.append(Graph(k, len(nodes), le, x_all[nodes], int(raw_labels[k] == anomalous)))
    return GraphDataset(name, graphs, x_all.shape[1], {"label_map": note, "features": features})


def write_tudataset(ds: GraphDataset, directory: str | Path, name: str | None = None) -> Path:
    """Write ``ds`` in the TUDataset flat-file layout (edges listed both ways)."""
    name = name or ds.name
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    offset = 0
    a_lines, ind_lines, attr_lines = [], [], []
    for k, g in enumerate(ds.graphs, start=1):
        for i, j in g.edges:
            a_lines.append(f"{i + offset + 1}, {j + offset + 1}")
            a_lines.append(f"{j + offset + 1}, {i + offset + 1}")
        ind_lines.extend([str(k)] * g.n)
        attr_lines.extend(", ".join(repr(float(v)) for v in row) for row in g.x)
        offset += g.n
    (root / f"{name}_A.txt").write_text("\n".join(a_lines) + ("\n" if a_lines else ""))
    (root / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (root / f"{name}_graph_labels.txt").write_text("\n".join(str(g.y) for g in ds.graphs) + "\n")
    (root / f"{name}_node_attributes.txt").write_text("\n".join(attr_lines) + "\n")
    return root


def downsample_anomalies(ds: GraphDataset, keep_fraction: float, seed: int) -> GraphDataset:
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    anom = [i for i, g in enumerate(ds.graphs) if g.y == 1]
    need = math.ceil(1.0 / keep_fraction)
    if len(anom) < need:
        raise ValueError(f"{len(anom)} anomalies; downsampling to {keep_fraction} needs at least {need}")
    if keep_fraction == 1.0:
        return ds
    n_keep = math.ceil(keep_fraction * len(anom) - 1e-9)
    rng = np.random.default_rng(seed)
    kept = set(rng.choice(anom, size=n_keep, replace=False).tolist())
    graphs = [g for i, g in enumerate(ds.graphs) if g.y == 0 or i in kept]
    prov = dict(ds.provenance, downsample=f"kept {n_keep}/{len(anom)} anomalies, seed {seed}")
    return GraphDataset(ds.name, graphs, ds.d, prov)


def make_splits(
    ds: GraphDataset | Sequence[int],
    mode: str = "holdout",
    seed: int = 0,
    k: int = 5,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> SplitSpec:
    """Stratified, seeded splits: ``mode="holdout"`` or ``mode="kfold"``."""
    labels = np.asarray(ds.labels if isinstance(ds, GraphDataset) else ds, dtype=np.int64)
    if len(labels) == 0:
        raise SplitError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    classes = sorted(set(labels.tolist()), reverse=True)
    per_class = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        per_class.append(idx[rng.permutation(len(idx))].tolist())

    if mode == "holdout":
        spec = SplitSpec(seed=seed, mode=mode)
        for members in per_class:
            n_c = len(members)
            n_val = int(round(ratios[1] * n_c))
            n_test = int(round(ratios[2] * n_c))
            n_train = n_c - n_val - n_test
            spec.train += members[:n_train]
            spec.val += members[n_train:n_train + n_val]
            spec.test += members[n_train + n_val:]
        spec.train.sort(), spec.val.sort(), spec.test.sort()
        return spec
    if mode == "kfold":
        if k < 2:
            raise SplitError(f"k-fold needs k >= 2, got {k}")
        for c, members in zip(classes, per_class):
            if len(members) < k:
                raise SplitError(f"class {c} has {len(members)} graphs, fewer than k={k}")
        folds: list[list[int]] = [[] for _ in range(k)]
        pos = 0
        for members in per_class:
            for i in members:
                folds[pos % k].append(i)
                pos += 1
        return SplitSpec(seed=seed, mode=mode, folds=[sorted(f) for f in folds])
    raise ValueError(f"unknown split mode {mode!r}")


def _random_connected_edges(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    perm = rng.permutation(n)
    edges = set()
    for t in range(1, n):
        u, v = perm[t], perm[rng.integers(t)]
        edges.add((min(u, v), max(u, v)))
    if n > 1:
        iu, ju = np.triu_indices(n, k=1)
        extra = rng.random(len(iu)) < p
        edges.update(zip(iu[extra].tolist(), ju[extra].tolist()))
    return np.array(sorted((int(a), int(b)) for a, b in edges), dtype=np.int64).reshape(-1, 2)


def _signed_magnitudes(rng: np.random.Generator, d: int) -> np.ndarray:
    # bounded away from zero so no feature column is pure noise
    return rng.choice([-1.0, 1.0], size=(1, d)) * rng.uniform(0.5, 1.5, size=(1, d))


def generate_synthetic(
    n_graphs: int,
    anomaly_rate: float,
    n_nodes: tuple[int, int] = (8, 20),
    seed: int = 0,
    d: int = 4,
    edge_prob: float = 0.15,
    noise: float = 0.1,
    amplitude: float = 1.0,
) -> GraphDataset:
    """Planted-anomaly graphs.

    Every graph is connected and carries a smooth signal (one random vector
    shared by all its nodes plus small noise). Anomalous graphs add a
    component whose sign alternates over a random bipartition of the nodes,
    which raises the Rayleigh quotient of their features.
    """
    if not 0.0 < anomaly_rate < 1.0:
        raise ValueError(f"anomaly_rate must lie in (0, 1), got {anomaly_rate}")
    lo, hi = n_nodes
    if lo < 2 or hi < lo:
        raise ValueError(f"degenerate node range {n_nodes}")
    if n_graphs < 1:
        raise ValueError("n_graphs must be positive")
    rng = np.random.default_rng(seed)
    n_anom = int(round(n_graphs * anomaly_rate))
    labels = np.zeros(n_graphs, dtype=np.int64)
    labels[rng.choice(n_graphs, size=n_anom, replace=False)] = 1
    graphs = []
    for k in range(n_graphs):
        n = int(rng.integers(lo, hi + 1))
        edges = _random_connected_edges(n, edge_prob, rng)
        x = _signed_magnitudes(rng, d) + noise * rng.normal(size=(n, d))
        if labels[k]:
            signs = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            x = x + amplitude * signs[:, None] * _signed_magnitudes(rng, d)
        graphs.append(Graph(k, n, edges, x, int(labels[k])))
    return GraphDataset(f"synthetic-{seed}", graphs, d, {"generator": "planted high-frequency anomalies"})


@dataclass(frozen=True)
class DatasetStats:
    n_graphs: int
    n_anom: int
    ratio: float
    avg_nodes: float
    avg_edges: float
    d: int


def dataset_stats(ds: GraphDataset) -> DatasetStats:
    n = len(ds.graphs)
    n_anom = int(sum(g.y for g in ds.graphs))
    return DatasetStats(
        n_graphs=n,
        n_anom=n_anom,
        ratio=100.0 * n_anom / n,
        avg_nodes=float(np.mean([g.n for g in ds.graphs])),
        avg_edges=float(np.mean([g.num_edges for g in ds.graphs])),
        d=ds.d,
    )
