"""RAdam, the one-cycle schedule, class-balanced sampling and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .encoder import EncoderConfig, ModelParams, encode_batch
from .objectives import CriticConfig, ObjectiveGraph, build_loss, preset
from .synthdata import SPLITS, AugmentFlags, PairedDataset, augment_batch, norm_stats, normalized, save_tensors

log = logging.getLogger(__name__)


class NonFiniteError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# RAdam
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def radam_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One rectified-Adam update; returns new parameter arrays and advances ``state``.

    While the variance rectification term is undefined (``rho_t <= 4``) the
    update is plain bias-corrected momentum.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2**t
    rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    else:
        rect = None
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**t)
        if rect is None:
            out[name] = p - lr * m_hat
        else:
            adaptive = math.sqrt(1 - beta2_t) / (np.sqrt(v) + eps)
            out[name] = p - lr * rect * m_hat * adaptive
    return out


# --------------------------------------------------------------------------
# schedule and sampling
# --------------------------------------------------------------------------


def _cos_anneal(start: float, end: float, frac: float) -> float:
    return end + (start - end) * (1 + math.cos(math.pi * frac)) / 2


def onecycle_lr(step: float, total_steps: int, max_lr: float, start_div: float = 25.0,
                final_div: float = 1e4, pct_up: float = 0.3) -> float:
    if not 0 <= step <= total_steps or total_steps <= 0:
        raise dc.ContractError(f"onecycle_lr: step {step} outside [0, {total_steps}]")
    start, end = max_lr / start_div, max_lr / final_div
    up = pct_up * total_steps
    if step <= up:
        return _cos_anneal(start, max_lr, step / up if up > 0 else 1.0)
    return _cos_anneal(max_lr, end, (step - up) / (total_steps - up))


def balanced_sample(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Pick a class uniformly, then a member uniformly, ``batch_size`` times."""
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    if any(len(m) == 0 for m in members) or len(classes) == 0:
        raise ValueError("balanced_sample: empty class")
    which = rng.integers(0, len(classes), size=batch_size)
    picks = rng.random(batch_size)
    return np.array([members[c][int(u * len(members[c]))] for c, u in zip(which, picks)], dtype=np.int64)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    base_lr: float = 4e-4
    max_lr: float = 0.01
    seed: int = 0
    objective: str | dict = "S"
    augment: AugmentFlags = field(default_factory=AugmentFlags)
    balanced: bool = True
    splits: tuple[str, ...] = ("train",)
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.augment, Mapping):
            self.augment = AugmentFlags(**self.augment)
        self.splits = tuple(self.splits)
        if self.epochs < 0 or self.batch_size <= 0 or self.base_lr <= 0 or self.max_lr <= 0:
            raise ValueError("epochs must be nonnegative; batch_size and learning rates positive")

    @property
    def graph(self) -> ObjectiveGraph:
        if isinstance(self.objective, str):
            return preset(self.objective)
        return ObjectiveGraph.from_json(self.objective)


@dataclass
class HistoryRow:
    epoch: int
    edge: str
    bound: float | None
    loss: float
    lr: float
    total: float
    aux: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[HistoryRow]
    graph: ObjectiveGraph
    norm: object


def _mean(rows: list[dict], key: str) -> float:
    return float(np.mean([r[key] for r in rows if key in r]))


def train(cfg: TrainConfig, data: PairedDataset, enc_cfg: EncoderConfig = EncoderConfig(),
          critic: CriticConfig = CriticConfig(), checkpoint_dir=None) -> TrainResult:
    graph = cfg.graph
    if graph.is_empty:
        raise dc.ContractError("train: empty objective graph")
    idx = np.flatnonzero(np.isin(data.split, [SPLITS.index(s) for s in cfg.splits]))
    if idx.size == 0:
        raise ValueError("train: no training samples")
    if not (np.all(np.isfinite(data.images1[idx])) and np.all(np.isfinite(data.images2[idx]))):
        raise ValueError("train: non-finite values in training images")
    stats = norm_stats(data, idx)
    data = normalized(data, stats)
    x1_all, x2_all, y_all = data.images1[idx], data.images2[idx], data.labels[idx]

    model = ModelParams.init(enc_cfg, cfg.seed, decoders=bool(graph.recon), classifier=bool(graph.supervised))
    arrays = dict(model.arrays)
    state = OptimizerState()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    steps_per_epoch = math.ceil(len(idx) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    start_div = cfg.max_lr / cfg.base_lr
    history: list[HistoryRow] = []
    step = 0
    for epoch in range(cfg.epochs):
        records: list[dict] = []
        for _ in range(steps_per_epoch):
            if cfg.balanced:
                batch = balanced_sample(y_all, cfg.batch_size, rng)
            else:
                batch = rng.choice(len(idx), size=min(cfg.batch_size, len(idx)), replace=False)
            x1, x2 = augment_batch(x1_all[batch], x2_all[batch], rng, cfg.augment)
            params = {k: dc.Tensor(v, requires_grad=True) for k, v in arrays.items()}
            outs = [encode_batch(params, x1, enc_cfg, "enc1"), encode_batch(params, x2, enc_cfg, "enc2")]
            loss, report = build_loss(graph, outs, params, critic, enc_cfg=enc_cfg,
                                      images=[x1, x2], labels=y_all[batch])
            if not math.isfinite(report.total):
                raise NonFiniteError(f"non-finite loss at step {step}")
            grads = dc.backward(loss, params.values())
            lr = onecycle_lr(step, total_steps, cfg.max_lr, start_div=start_div)
            arrays = radam_step(state, arrays, {k: grads[t] for k, t in params.items()}, lr)
            records.append({"lr": lr, "total": report.total, **{f"b:{k}": v for k, v in report.bounds.items()},
                            **{f"l:{k}": v for k, v in report.losses.items()},
                            **{f"a:{k}": v for k, v in report.aux.items()}})
            step += 1
        aux_keys = sorted({k for r in records for k in r if k.startswith("a:")})
        aux = {k[2:]: _mean(records, k) for k in aux_keys}
        lr_mean, total_mean = _mean(records, "lr"), _mean(records, "total")
        if graph.edges:
            for e in graph.edges:
                history.append(HistoryRow(epoch, e.name, _mean(records, f"b:{e.name}"),
                                          _mean(records, f"l:{e.name}"), lr_mean, total_mean, aux))
        else:
            history.append(HistoryRow(epoch, "aux", None, total_mean, lr_mean, total_mean, aux))
        log.info("epoch %d total %.4f", epoch, total_mean)
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_tensors(Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1}.mmdt", arrays)
    return TrainResult(ModelParams(arrays), history, graph, stats)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_history(path, history: list[HistoryRow], graph: ObjectiveGraph) -> None:
    aux_cols = graph.aux_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "edge", "bound", "loss", "lr", "total", *aux_cols])
        for r in history:
            w.writerow([r.epoch, r.edge, _fmt(r.bound), _fmt(r.loss), _fmt(r.lr), _fmt(r.total),
                        *(_fmt(r.aux.get(c)) for c in aux_cols)])
