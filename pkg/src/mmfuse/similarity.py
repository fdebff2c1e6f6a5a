"""Cross-modal representation similarity: linear CKA and SVCCA."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check_pair(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError(f"row count mismatch: {X.shape} vs {Y.shape}")
    if len(X) < 2:
        raise ValueError("need at least two samples")
    return X, Y


def linear_cka(X, Y) -> float:
    """Biased linear CKA on column-centered inputs; 0 when either side has no variance."""
    X, Y = _check_pair(X, Y)
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    cross = np.linalg.norm(Y.T @ X, "fro") ** 2
    nx = np.linalg.norm(X.T @ X, "fro")
    ny = np.linalg.norm(Y.T @ Y, "fro")
    if nx == 0 or ny == 0:
        return 0.0
    return float(np.clip(cross / (nx * ny), 0.0, 1.0))


def _reduce(X: np.ndarray, var_keep: float) -> np.ndarray:
    """Orthonormal basis of the top singular directions holding ``var_keep`` of the variance."""
    X = X - X.mean(axis=0)
    u, s, _ = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12 * max(1.0, float(np.abs(X).max())):
        raise ValueError("degenerate rank-0 input")
    energy = s**2
    keep = int(np.searchsorted(np.cumsum(energy) / energy.sum(), var_keep - 1e-12) + 1)
    keep = min(keep, int((s > s[0] * 1e-10).sum()))
    return u[:, :keep]


def svcca(X, Y, var_keep: float = 0.99, ridge: float = 1e-6) -> float:
    """Mean canonical correlation between the variance-reduced subspaces of X and Y.

    The reduced coordinates are whitened exactly by the SVD, so the canonical
    correlations are the singular values of ``U_x^T U_y``, shrunk by the ridge
    on the unit-variance covariances.
    """
    X, Y = _check_pair(X, Y)
    A = _reduce(X, var_keep)
    B = _reduce(Y, var_keep)
    if len(X) <= max(A.shape[1], B.shape[1]):
        raise ValueError("svcca needs more samples than kept components")
    rho = np.linalg.svd(A.T @ B, compute_uv=False) / (1.0 + ridge)
    # the smaller subspace bounds how many correlations exist
    return float(np.mean(np.clip(rho[: min(A.shape[1], B.shape[1])], 0.0, 1.0)))


@dataclass
class SimilarityReport:
    values: dict[str, dict[str, float]] = field(default_factory=dict)  # group -> metric -> value
    absent: list[str] = field(default_factory=list)

    def rows(self):
        for group, metrics in self.values.items():
            for metric, value in metrics.items():
                yield group, metric, value
        for group in self.absent:
            yield group, "cka", None
            yield group, "svcca", None


def group_similarity_report(Z1, Z2, groups, names: dict | None = None, var_keep: float = 0.99) -> SimilarityReport:
    """CKA and SVCCA between modalities within each group.

    Groups too small for SVCCA at this dimensionality are reported absent.
    """
    Z1, Z2 = _check_pair(Z1, Z2)
    groups = np.asarray(groups)
    report = SimilarityReport()
    for g in np.unique(groups):
        label = names.get(g, str(g)) if names else str(g)
        sel = groups == g
        try:
            kept = max(_reduce(Z1[sel], var_keep).shape[1], _reduce(Z2[sel], var_keep).shape[1])
        except ValueError:
            report.absent.append(label)
            continue
        if sel.sum() < kept + 2:
            report.absent.append(label)
            continue
        report.values[label] = {"cka": linear_cka(Z1[sel], Z2[sel]), "svcca": svcca(Z1[sel], Z2[sel], var_keep)}
    return report
