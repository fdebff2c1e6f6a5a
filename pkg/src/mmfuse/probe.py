"""Linear probing of frozen representations.

Elastic-net logistic regression solved by monotone accelerated proximal
gradient, ROC AUC via rank sums, and random hyperparameter search over
stratified folds.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

PENALTIES = ("l1", "l2", "elasticnet")


@dataclass(frozen=True)
class ProbeConfig:
    C: float = 1.0
    penalty: str = "l2"
    l1_ratio: float = 0.5
    max_iter: int = 1000
    tol: float = 1e-8

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}")
        if not 0 <= self.l1_ratio <= 1:
            raise ValueError("l1_ratio must lie in [0, 1]")

    @property
    def l1_l2(self) -> tuple[float, float]:
        """Weights (a, b) of ``a |w|_1 + b/2 |w|^2`` in the penalized objective."""
        lam = 1.0 / self.C
        if self.penalty == "l1":
            return lam, 0.0
        if self.penalty == "l2":
            return 0.0, lam
        return lam * self.l1_ratio, lam * (1 - self.l1_ratio)

    def to_json(self) -> dict:
        d = asdict(self)
        if self.penalty != "elasticnet":
            d["l1_ratio"] = None
        return d


@dataclass(frozen=True)
class SearchSpace:
    C_range: tuple[float, float] = (1e-6, 1e3)
    penalties: tuple[str, ...] = PENALTIES
    l1_ratio_range: tuple[float, float] = (0.0, 1.0)
    iterations: int = 500
    folds: int = 5
    max_iter: int = 300
    tol: float = 1e-6

    def __post_init__(self):
        for name in ("C_range", "penalties", "l1_ratio_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not 0 < self.C_range[0] <= self.C_range[1]:
            raise ValueError("C_range must satisfy 0 < low <= high")
        if not self.penalties or set(self.penalties) - set(PENALTIES):
            raise ValueError(f"penalties must be a nonempty subset of {PENALTIES}")
        if self.iterations < 1 or self.folds < 2:
            raise ValueError("need iterations >= 1 and folds >= 2")


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"features {X.shape} and labels {y.shape} do not align")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    if len(np.unique(y)) != 2:
        raise ValueError("both classes must be present")
    return X, (y == np.max(y)).astype(np.float64)


def logreg_objective(X, y, w, b, cfg: ProbeConfig) -> float:
    a, l2 = cfg.l1_l2
    s = X @ w + b
    nll = -np.mean(y * log_expit(s) + (1 - y) * log_expit(-s))
    return float(nll + a * np.abs(w).sum() + 0.5 * l2 * w @ w)


def fit_logreg(X, y, cfg: ProbeConfig = ProbeConfig(), trace: list | None = None) -> tuple[np.ndarray, float]:
    """Minimize mean log-loss + (1/C) R(w) with an unpenalized bias.

    Accelerated proximal gradient with backtracking; a momentum step is only
    accepted when it does not increase the objective, otherwise a plain
    proximal step from the current iterate is taken, so the objective is
    monotonically non-increasing.  ``trace`` collects objective values.
    """
    X, y = _check_xy(X, y)
    n, d = X.shape
    a, l2 = cfg.l1_l2
    p = np.clip(y.mean(), 1e-12, 1 - 1e-12)
    theta = np.concatenate([np.zeros(d), [math.log(p / (1 - p))]])
    Xb = np.hstack([X, np.ones((n, 1))])

    def smooth(t):
        s = Xb @ t
        f = -np.mean(y * log_expit(s) + (1 - y) * log_expit(-s))
        return f, Xb.T @ (expit(s) - y) / n

    def prox(v, step):
        w = v[:d]
        w = np.sign(w) * np.maximum(np.abs(w) - step * a, 0.0) / (1 + step * l2)
        return np.concatenate([w, v[d:]])

    def full(t, f):
        w = t[:d]
        return f + a * np.abs(w).sum() + 0.5 * l2 * w @ w

    step = 1.0 / max(0.25 * np.linalg.norm(Xb, 2) ** 2 / n, 1e-12)
    f_x, _ = smooth(theta)
    obj = full(theta, f_x)
    if trace is not None:
        trace.append(obj)
    y_pt, t_k = theta.copy(), 1.0

    def prox_step(point, step):
        f_p, g_p = smooth(point)
        while True:
            cand = prox(point - step * g_p, step)
            diff = cand - point
            f_c, _ = smooth(cand)
            if f_c <= f_p + g_p @ diff + diff @ diff / (2 * step) + 1e-15 * abs(f_p):
                return cand, f_c, step
            step *= 0.5

    for _ in range(cfg.max_iter):
        cand, f_c, step = prox_step(y_pt, step)
        obj_c = full(cand, f_c)
        if obj_c > obj:
            cand, f_c, step = prox_step(theta, step)
            obj_c = full(cand, f_c)
            t_next = 1.0
            y_next = cand
        else:
            t_next = (1 + math.sqrt(1 + 4 * t_k * t_k)) / 2
            y_next = cand + ((t_k - 1) / t_next) * (cand - theta)
        if obj_c > obj:  # no further progress representable
            break
        decrease = obj - obj_c
        theta, obj, y_pt, t_k = cand, obj_c, y_next, t_next
        if trace is not None:
            trace.append(obj)
        if decrease < cfg.tol:
            break
        step *= 2.0
    return theta[:d].copy(), float(theta[d])


def predict_scores(X, w, b) -> np.ndarray:
    return np.asarray(X) @ w + b


def roc_auc(scores, y) -> float:
    """P(score+ > score-) + 0.5 P(tie), from midrank sums."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) != 2:
        raise ValueError("roc_auc needs both classes present")
    pos = y == classes[1]
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    pairs = n_pos * n_neg
    # divide on the >= 0.5 side so that flipping the scores gives exactly 1 - auc
    if 2 * u >= pairs:
        return float(u / pairs)
    return float(1.0 - (pairs - u) / pairs)


def stratified_folds(y, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Fold index arrays; each class is dealt round-robin so proportions match within one."""
    y = np.asarray(y)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        if len(members) < k:
            raise ValueError(f"class {c} has {len(members)} members, fewer than {k} folds")
        for i, m in enumerate(members):
            folds[(i + offset) % k].append(int(m))
        offset += len(members)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def _zscore(train, *others):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(x - mu) / sd for x in (train, *others)]


def draw_configs(space: SearchSpace, seed: int) -> list[ProbeConfig]:
    rng = np.random.default_rng(seed)
    lo, hi = np.log(space.C_range[0]), np.log(space.C_range[1])
    out = []
    for _ in range(space.iterations):
        c = float(np.exp(rng.uniform(lo, hi))) if hi > lo else float(space.C_range[0])
        pen = space.penalties[int(rng.integers(len(space.penalties)))]
        ratio = float(rng.uniform(*space.l1_ratio_range))
        out.append(ProbeConfig(C=c, penalty=pen, l1_ratio=ratio if pen == "elasticnet" else 0.5,
                               max_iter=space.max_iter, tol=space.tol))
    return out


def cv_score(X, y, cfg: ProbeConfig, folds: Sequence[np.ndarray]) -> float:
    scores = []
    for k, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != k])
        xtr, xte = _zscore(X[train], X[test])
        w, b = fit_logreg(xtr, y[train], cfg)
        scores.append(roc_auc(predict_scores(xte, w, b), y[test]))
    return float(np.mean(scores))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MMFUSE_THREADS", "1")))
    except ValueError:
        return 1


def search_hyperparams(X, y, space: SearchSpace = SearchSpace(), seed: int = 0) -> tuple[ProbeConfig, float]:
    """Random search; the first draw reaching the best mean CV AUC wins."""
    X, yb = _check_xy(X, y)
    folds = stratified_folds(yb, space.folds, np.random.default_rng([seed, 7]))
    configs = draw_configs(space, seed)
    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(lambda c: cv_score(X, yb, c, folds), configs))
    else:
        scores = [cv_score(X, yb, c, folds) for c in configs]
    best = int(np.argmax(scores))
    return configs[best], scores[best]


@dataclass
class ProbeResult:
    modality: int
    config: ProbeConfig
    cv_auc: float
    holdout_auc: float
    weights: np.ndarray
    bias: float


def fit_and_score(z_train, y_train, z_test, y_test, space: SearchSpace, seed: int, modality: int = 0) -> ProbeResult:
    cfg, cv = search_hyperparams(z_train, y_train, space, seed)
    xtr, xte = _zscore(np.asarray(z_train, float), np.asarray(z_test, float))
    w, b = fit_logreg(xtr, y_train, cfg)
    auc = roc_auc(predict_scores(xte, w, b), y_test)
    return ProbeResult(modality, cfg, cv, auc, w, b)


def evaluate_representation(encode_fn, data, space: SearchSpace = SearchSpace(), seed: int = 0,
                            train_split: str = "train", test_split: str = "holdout") -> dict:
    """Holdout AUC per modality for frozen latents produced by ``encode_fn(modality, images)``.

    Only HC (0) and AD (1) subjects enter the probe; one pair per subject.
    """
    from .synthdata import SPLITS

    data = data.one_pair_per_subject()
    tr = np.flatnonzero((data.split == SPLITS.index(train_split)) & (data.labels <= 1))
    te = np.flatnonzero((data.split == SPLITS.index(test_split)) & (data.labels <= 1))
    if set(data.subject_ids[tr]) & set(data.subject_ids[te]):
        raise ValueError("subject leakage between probe train and test splits")
    results = {}
    for m in (1, 2):
        z = np.asarray(encode_fn(m, data.images(m)))
        results[m] = fit_and_score(z[tr], data.labels[tr], z[te], data.labels[te], space, seed, m)
    return {
        "per_modality": results,
        "mean_auc": float(np.mean([r.holdout_auc for r in results.values()])),
    }
