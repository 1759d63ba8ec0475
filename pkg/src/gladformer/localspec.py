"""Local spectral message-passing branch, branch fusion and classifier head."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DTensor
from .spectral import beta_bank

Params = Mapping[str, DTensor]


def bank_features(lap: np.ndarray, order: int, x: np.ndarray) -> np.ndarray:
    """Concatenated Beta bank outputs, width ``(order + 1) * d``."""
    return np.concatenate(beta_bank(lap, order, x), axis=1)


def band_pass_embed(bank: np.ndarray, w: DTensor, b: DTensor) -> DTensor:
    return ad.add(ad.matmul(ad.constant(bank), w), b)


def lowhigh_channels(h: DTensor, lap: np.ndarray, psi: float) -> tuple[DTensor, DTensor]:
    lh = ad.matmul(ad.constant(lap), h)
    low = ad.add(ad.scale(h, psi + 1.0), ad.scale(lh, -1.0))
    high = ad.add(ad.scale(h, psi - 1.0), lh)
    return low, high


def lowhigh_layer(h: DTensor, lap: np.ndarray, psi: float, w: DTensor, b: DTensor) -> DTensor:
    low, high = lowhigh_channels(h, lap, psi)
    return ad.relu(ad.add(ad.matmul(ad.concat([low, high], axis=1), w), b))


def combine_layers(states: list[DTensor], w: DTensor, b: DTensor) -> DTensor:
    if not states:
        raise ValueError("combine_layers needs at least one layer")
    return ad.add(ad.matmul(ad.concat(states, axis=1), w), b)


def local_readout(h_b: DTensor, h_p: DTensor) -> DTensor:
    if h_b.shape[0] == 0:
        raise ContractError("readout over an empty node set")
    return ad.mean(ad.concat([h_b, h_p], axis=1), axis=0)


def ls_branch(x: np.ndarray, lap: np.ndarray, bank: np.ndarray, params: Params, layers: int, psi: float) -> DTensor:
    """Graph-level output of the local branch, shape ``(1, 2 * hidden)``."""
    h_b = band_pass_embed(bank, params["ls.band.W"], params["ls.band.b"])
    h = ad.constant(x)
    states = []
    for layer in range(layers):
        h = lowhigh_layer(h, lap, psi, params[f"ls.lh{layer}.W"], params[f"ls.lh{layer}.b"])
        states.append(h)
    h_p = combine_layers(states, params["ls.combine.W"], params["ls.combine.b"])
    return local_readout(h_b, h_p)


def fuse(h_gt: DTensor | None, h_loc: DTensor | None, w: DTensor, b: DTensor) -> DTensor:
    parts = [t for t in (h_gt, h_loc) if t is not None]
    return ad.relu(ad.add(ad.matmul(ad.concat(parts, axis=1), w), b))


def classify(h_g: DTensor, params: Params) -> DTensor:
    hidden = ad.relu(ad.add(ad.matmul(h_g, params["cls.W1"]), params["cls.b1"]))
    logit = ad.add(ad.matmul(hidden, params["cls.W2"]), params["cls.b2"])
    return ad.sigmoid(logit)
