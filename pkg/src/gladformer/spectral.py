"""Graph-spectral primitives on dense numpy arrays.

Filters are always evaluated as polynomials in the Laplacian (repeated
products). :func:`eigendecompose` is kept for oracles and reporting only.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .dataset import Graph

# R[i, j] is the probability of stepping from i to j: D^-1 A (rows sum to 1).
RANDOM_WALK_CONVENTION = "row_stochastic"
ORACLE_CAP = 256


class OracleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralCache:
    laplacian: np.ndarray
    degrees: np.ndarray
    rrwp: np.ndarray
    rayleigh: np.ndarray


@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray
    energy: np.ndarray


def adjacency(g: Graph) -> np.ndarray:
    a = np.zeros((g.n, g.n))
    for i, j in g.edges:
        a[i, j] = a[j, i] = 1.0
    return a


def normalized_laplacian(g: Graph | np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes keep their identity row."""
    a = adjacency(g) if isinstance(g, Graph) else np.asarray(g, dtype=np.float64)
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(len(deg)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def eigendecompose(lap: np.ndarray, cap: int = ORACLE_CAP) -> tuple[np.ndarray, np.ndarray]:
    lap = np.asarray(lap, dtype=np.float64)
    if lap.shape[0] > cap:
        raise OracleSizeError(f"{lap.shape[0]} nodes exceeds the oracle cap of {cap}")
    vals, vecs = np.linalg.eigh(lap)
    return vals, vecs


def rayleigh_vector(x: np.ndarray, lap: np.ndarray) -> np.ndarray:
    """Per-column ``x^T L x / x^T x``; an all-zero column scores 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != lap.shape[0]:
        raise ValueError(f"feature rows {x.shape[0]} != laplacian size {lap.shape[0]}")
    num = np.einsum("ij,ij->j", x, lap @ x)
    den = np.einsum("ij,ij->j", x, x)
    out = np.zeros(x.shape[1])
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return np.clip(out, 0.0, 2.0)


def random_walk_matrix(a: np.ndarray) -> np.ndarray:
    deg = a.sum(axis=1)
    r = np.zeros_like(a)
    nz = deg > 0
    r[nz] = a[nz] / deg[nz, None]
    iso = np.flatnonzero(~nz)
    r[iso, iso] = 1.0
    return r


def rrwp_from_adjacency(a: np.ndarray, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError(f"walk length must be >= 1, got {steps}")
    n = a.shape[0]
    r = random_walk_matrix(a)
    out = np.empty((n, n, steps))
    power = np.eye(n)
    out[:, :, 0] = power
    for t in range(1, steps):
        power = power @ r
        out[:, :, t] = power
    return out


def rrwp(g: Graph, steps: int) -> np.ndarray:
    """Stack ``[I, R, ..., R^(steps-1)]`` along the last axis."""
    return rrwp_from_adjacency(adjacency(g), steps)


def beta_coefficient(alpha: int, beta: int) -> float:
    """``1 / (2 B(alpha+1, beta+1)) = (alpha+beta+1)! / (2 alpha! beta!)``."""
    return factorial(alpha + beta + 1) / (2.0 * factorial(alpha) * factorial(beta))


def beta_response(lam, alpha: int, beta: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    return beta_coefficient(alpha, beta) * (lam / 2.0) ** alpha * (1.0 - lam / 2.0) ** beta


def beta_filter_apply(lap: np.ndarray, alpha: int, beta: int, x: np.ndarray) -> np.ndarray:
    if alpha < 0 or beta < 0:
        raise ValueError(f"Beta exponents must be non-negative, got ({alpha}, {beta})")
    y = np.asarray(x, dtype=np.float64)
    for _ in range(alpha):
        y = 0.5 * (lap @ y)
    for _ in range(beta):
        y = y - 0.5 * (lap @ y)
    return beta_coefficient(alpha, beta) * y


def beta_bank(lap: np.ndarray, order: int, x: np.ndarray) -> list[np.ndarray]:
    if order < 1:
        raise ValueError(f"bank order must be >= 1, got {order}")
    return [beta_filter_apply(lap, m, order - m, x) for m in range(order + 1)]


def low_high_apply(lap: np.ndarray, psi: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    lx = lap @ x
    return (psi + 1.0) * x - lx, (psi - 1.0) * x + lx


def spectrum_report(g: Graph, x: np.ndarray, cap: int = ORACLE_CAP) -> SpectrumReport:
    vals, vecs = eigendecompose(normalized_laplacian(g), cap=cap)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    coeff = vecs.T @ x
    sq = coeff**2
    col_tot = sq.sum(axis=0)
    live = col_tot > 0
    if not live.any():
        return SpectrumReport(vals, np.zeros_like(vals))
    energy = (sq[:, live] / col_tot[live]).mean(axis=1)
    return SpectrumReport(vals, energy / energy.sum())


def spectral_cache(g: Graph, steps: int) -> SpectralCache:
    a = adjacency(g)
    lap = normalized_laplacian(a)
    return SpectralCache(
        laplacian=lap,
        degrees=a.sum(axis=1).astype(np.int64),
        rrwp=rrwp_from_adjacency(a, steps),
        rayleigh=rayleigh_vector(g.x, lap),
    )
