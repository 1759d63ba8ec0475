"""Training, evaluation and cross-validation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DTensor
from .dataset import GraphDataset, SplitSpec, make_splits
from .loss_metrics import Metrics, class_ratio_weight, compute_metrics, voce_loss_tensor
from .model import ModelConfig, ModelParams, PreparedGraph, forward, init_params, prepare_graph

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    walk_length: int = 4
    gt_layers: int = 6
    beta_order: int = 3
    ls_layers: int = 4
    hidden: int = 128
    out_dim: int = 32
    heads: int = 4
    kappa: float = 0.2
    psi: float = 0.5
    lr: float = 1e-3
    warmup_steps: int = 100
    batch: int = 128
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    dropout: float = 0.0
    downsample: bool = False
    downsample_fraction: float = 0.1
    split: str = "kfold"
    folds: int = 5
    use_gt: bool = True
    use_ls: bool = True
    use_rayleigh: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError(f"kappa must lie in [0, 1), got {self.kappa}")
        for name in ("walk_length", "gt_layers", "beta_order", "ls_layers", "hidden", "out_dim", "heads", "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"learning rate must be positive and finite, got {self.lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must lie in [0, 1], got {self.psi}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.downsample_fraction <= 1.0:
            raise ValueError(f"downsample_fraction must lie in (0, 1], got {self.downsample_fraction}")
        if self.split not in ("kfold", "holdout"):
            raise ValueError(f"split must be 'kfold' or 'holdout', got {self.split!r}")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if self.hidden % self.heads:
            raise ValueError(f"heads={self.heads} must divide hidden={self.hidden}")

    def model_config(self, in_dim: int) -> ModelConfig:
        return ModelConfig(
            in_dim=in_dim, hidden=self.hidden, out_dim=self.out_dim, walk_length=self.walk_length,
            gt_layers=self.gt_layers, beta_order=self.beta_order, ls_layers=self.ls_layers,
            heads=self.heads, psi=self.psi, dropout=self.dropout, use_gt=self.use_gt,
            use_ls=self.use_ls, use_rayleigh=self.use_rayleigh,
        )

    @classmethod
    def from_dict(cls, values: Mapping) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


class Adam:
    """Adam with an optional linear learning-rate warmup.

    During the first ``warmup`` steps the rate ramps linearly up to ``lr``.
    Without it the first few sign-like updates of a wide, deep model can push
    every logit deep into the saturated region of the sigmoid in a handful of
    steps, after which the bounded loss gives almost no gradient back.
    """

    def __init__(self, params: Mapping[str, DTensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, warmup: int = 0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.warmup = warmup
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        lr = self.current_lr()
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def current_lr(self) -> float:
        if self.warmup and self.t <= self.warmup:
            return self.lr * self.t / self.warmup
        return self.lr


@dataclass
class RunReport:
    config: dict
    seed: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_auc: float | None = None
    test: Metrics | None = None
    folds: list[Metrics] = field(default_factory=list)
    fold_histories: list[list[dict]] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        out = asdict(self)
        out["test"] = self.test.to_dict() if self.test else None
        out["folds"] = [m.to_dict() for m in self.folds]
        return out

    def write(self, out_dir: str | Path, stem: str = "report") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        write_curves(self.history, out / f"{stem}_curves.csv")
        for k, hist in enumerate(self.fold_histories):
            write_curves(hist, out / f"{stem}_fold{k}_curves.csv")
        return out


def write_curves(history: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_auc", "val_f1"])
        for row in history:
            w.writerow([row["epoch"], row["train_loss"], row["val_auc"], row["val_f1"]])


class PreparedCache:
    """Lazily built, parameter-independent per-graph data."""

    def __init__(self, dataset: GraphDataset, cfg: ModelConfig):
        self.dataset, self.cfg = dataset, cfg
        self._items: dict[int, PreparedGraph] = {}

    def __getitem__(self, i: int) -> PreparedGraph:
        if i not in self._items:
            self._items[i] = prepare_graph(self.dataset.graphs[i], self.cfg)
        return self._items[i]


def predict(params: Mapping[str, DTensor], prepared: Sequence[PreparedGraph], cfg: ModelConfig) -> np.ndarray:
    with ad.no_grad():
        return np.array([forward(params, pr, cfg).p.item() for pr in prepared])


def embed(params: Mapping[str, DTensor], prepared: Sequence[PreparedGraph], cfg: ModelConfig) -> np.ndarray:
    with ad.no_grad():
        return np.vstack([forward(params, pr, cfg).embedding.data for pr in prepared])


def evaluate(
    params: Mapping[str, DTensor],
    dataset: GraphDataset,
    indices: Sequence[int],
    cfg: ModelConfig,
    cache: PreparedCache | None = None,
    fold: int | None = None,
) -> Metrics:
    if len(indices) == 0:
        raise ContractError("evaluate needs a non-empty index list")
    cache = cache or PreparedCache(dataset, cfg)
    scores = predict(params, [cache[i] for i in indices], cfg)
    labels = dataset.labels[np.asarray(indices)]
    metrics = compute_metrics(scores, labels, fold=fold)
    if metrics.auc is None:
        log.warning("evaluation set has a single class; AUC omitted")
    return metrics


def batch_gradients(
    params: ModelParams,
    batch: Sequence[PreparedGraph],
    cfg: ModelConfig,
    kappa: float,
    weight: float,
    rngs: Sequence[np.random.Generator | None] | None = None,
) -> tuple[dict[str, np.ndarray], float]:
    """Mean of per-graph gradients and mean loss; independent of batch order."""
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    total = 0.0
    # fixed reduction order (by graph id) makes the sums bit-identical under reordering
    order = sorted(range(len(batch)), key=lambda n: batch[n].graph.id)
    for n in order:
        pr = batch[n]
        for p in params.values():
            p.zero_grad()
        out = forward(params, pr, cfg, rngs[n] if rngs else None)
        loss = voce_loss_tensor(out.p, pr.graph.y, kappa, weight)
        ad.backward(loss)
        total += loss.item()
        for k, p in params.items():
            if p.grad is not None:
                grads[k] += p.grad
    scale = 1.0 / len(batch)
    for k in grads:
        grads[k] *= scale
    for p in params.values():
        p.zero_grad()
    return grads, total * scale


def _snapshot(params: Mapping[str, DTensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def train(
    config: TrainConfig,
    dataset: GraphDataset,
    split: SplitSpec,
    train_idx: Sequence[int] | None = None,
    val_idx: Sequence[int] | None = None,
    cache: PreparedCache | None = None,
    seed: int | None = None,
) -> tuple[ModelParams, RunReport]:
    """Adam on mean VOCE with early stopping on validation AUC.

    Uses ``split.train``/``split.val`` unless explicit index lists are given.
    The returned parameters are the best-validation checkpoint.
    """
    t0 = time.perf_counter()
    seed = config.seed if seed is None else seed
    train_idx = list(split.train if train_idx is None else train_idx)
    val_idx = list(split.val if val_idx is None else val_idx)
    cfg = config.model_config(dataset.d)
    cache = cache or PreparedCache(dataset, cfg)
    params = init_params(cfg, seed)
    report = RunReport(config=asdict(config), seed=seed)
    if config.max_epochs == 0:
        report.wall_seconds = time.perf_counter() - t0
        return params, report
    if not train_idx:
        raise ContractError("empty training split")
    weight = class_ratio_weight(dataset.labels[np.asarray(train_idx)])
    opt = Adam(params, lr=config.lr, warmup=config.warmup_steps)
    rng = np.random.default_rng(seed)
    best_score, best_state, stale = -math.inf, _snapshot(params), 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_idx))
        losses = []
        for start in range(0, len(order), config.batch):
            chosen = [train_idx[j] for j in order[start:start + config.batch]]
            rngs = None
            if config.dropout > 0:
                rngs = [np.random.default_rng([seed, epoch, i]) for i in chosen]
            grads, loss = batch_gradients(params, [cache[i] for i in chosen], cfg, config.kappa, weight, rngs)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError("non-finite loss or gradient", epoch)
            opt.step(grads)
            losses.append(loss * len(chosen))
        row = {"epoch": epoch, "train_loss": sum(losses) / len(train_idx), "val_auc": None, "val_f1": None}
        if val_idx:
            vm = evaluate(params, dataset, val_idx, cfg, cache)
            row["val_auc"], row["val_f1"] = vm.auc, vm.macro_f1
            score = vm.auc if vm.auc is not None else vm.macro_f1
        else:
            score = -row["train_loss"]
        report.history.append(row)
        log.info("epoch %d loss %.5f val_auc %s", epoch, row["train_loss"], row["val_auc"])
        if score > best_score:
            best_score, best_state, stale = score, _snapshot(params), 0
            report.best_epoch = epoch
            report.best_val_auc = row["val_auc"]
        else:
            stale += 1
            if stale >= config.patience:
                break

    for k, p in params.items():
        p.data = best_state[k]
    if split.mode == "holdout" and split.test:
        report.test = evaluate(params, dataset, split.test, cfg, cache)
    report.wall_seconds = time.perf_counter() - t0
    return params, report


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def cross_validate(config: TrainConfig, dataset: GraphDataset, val_fraction: float = 0.15) -> RunReport:
    """Train one model per fold complement and test it on the held-out fold.

    A stratified ``val_fraction`` of each complement is held back for early
    stopping.
    """
    t0 = time.perf_counter()
    split = make_splits(dataset, "kfold", seed=config.seed, k=config.folds)
    cfg = config.model_config(dataset.d)
    cache = PreparedCache(dataset, cfg)
    report = RunReport(config=asdict(config), seed=config.seed)
    for k in range(config.folds):
        rest, held = split.fold_parts(k)
        inner = make_splits(
            dataset.labels[np.asarray(rest)], "holdout", seed=fold_seed(config.seed, k),
            ratios=(1.0 - val_fraction, val_fraction, 0.0),
        )
        tr = [rest[i] for i in inner.train]
        va = [rest[i] for i in inner.val]
        try:
            params, sub = train(config, dataset, split, tr, va, cache, seed=fold_seed(config.seed, k))
            metrics = evaluate(params, dataset, held, cfg, cache, fold=k)
        except Exception as exc:
            raise RuntimeError(f"fold {k}: {exc}") from exc
        log.info("fold %d auc %s f1 %.4f", k, metrics.auc, metrics.macro_f1)
        report.folds.append(metrics)
        report.fold_histories.append(sub.history)
    for key in ("auc", "macro_f1"):
        vals = [getattr(m, key) for m in report.folds if getattr(m, key) is not None]
        report.mean[key] = float(np.mean(vals)) if vals else None
        report.std[key] = float(np.std(vals)) if vals else None
    report.wall_seconds = time.perf_counter() - t0
    return report
