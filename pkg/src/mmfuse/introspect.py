"""Saliency introspection of trained encoders.

SmoothGrad maps are taken per latent dimension rather than per class label.
Raw maps are masked, min-max rescaled and Gaussian-smoothed; group contrasts
use a voxel-wise Mann-Whitney U test with the rank-biserial correlation as
effect size (positive when group A is stochastically larger).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import erfc
from scipy.stats import rankdata

from . import diffcore as dc
from .encoder import EncoderConfig, encode_batch


def smoothgrad_batch(params, images, dim: int, cfg: EncoderConfig, prefix: str = "enc",
                     sigma: float = 0.05, n: int = 5, seed: int = 0) -> np.ndarray:
    """Mean of ``|d z[dim] / d x|`` over ``n`` noisy copies, for a batch ``[N, S, S]``.

    Samples are independent, so one backward pass of ``sum_i z_i[dim]`` yields
    every per-image gradient at once.
    """
    if not 0 <= dim < cfg.d_z:
        raise IndexError(f"latent dimension {dim} out of range [0, {cfg.d_z})")
    if sigma < 0 or n < 1:
        raise ValueError("sigma must be >= 0 and n >= 1")
    images = np.asarray(images, dtype=np.float64)
    frozen = {k: dc.Tensor(v.value if isinstance(v, dc.Tensor) else v) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    acc = np.zeros_like(images)
    for _ in range(n):
        x = dc.Tensor(images + sigma * rng.normal(size=images.shape), requires_grad=True)
        z = encode_batch(frozen, x, cfg, prefix).latent
        grads = dc.backward(dc.sum_(z[:, dim]), [x])
        acc += np.abs(grads[x])
    return acc / n


def smoothgrad(params, image, dim: int, cfg: EncoderConfig, prefix: str = "enc",
               sigma: float = 0.05, n: int = 5, seed: int = 0) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return smoothgrad_batch(params, image[None], dim, cfg, prefix, sigma, n, seed)[0]


def postprocess(raw, mask, sigma: float = 1.5) -> np.ndarray:
    """Mask, rescale in-mask values to [0, 1], blur, re-mask.

    A map with no in-mask range maps to zeros instead of dividing by zero.
    The blur uses a normalized Gaussian kernel truncated at 4 sigma with zero
    padding outside the image.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(mask) > 0
    if raw.shape[-2:] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match map {raw.shape}")
    if not mask.any():
        raise ValueError("empty mask")
    if raw.ndim > 2:
        return np.stack([postprocess(r, mask, sigma) for r in raw.reshape(-1, *mask.shape)]).reshape(raw.shape)
    inside = raw[mask]
    lo, hi = inside.min(), inside.max()
    span = hi - lo
    if not span > 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(raw)
    scaled = np.where(mask, (raw - lo) / span, 0.0)
    blurred = gaussian_filter(scaled, sigma, mode="constant", cval=0.0, truncate=4.0)
    return np.clip(np.where(mask, blurred, 0.0), 0.0, 1.0)


def _pearson_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Columnwise Pearson correlations; zero-variance columns yield zeros."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    ok_a = na > 1e-12 * max(1.0, float(np.abs(a).max(initial=0)))
    ok_b = nb > 1e-12 * max(1.0, float(np.abs(b).max(initial=0)))
    out = (a.T @ b) / np.outer(np.where(ok_a, na, 1.0), np.where(ok_b, nb, 1.0))
    out[~ok_a, :] = 0.0
    out[:, ~ok_b] = 0.0
    return np.clip(out, -1.0, 1.0)


@dataclass
class SaliencyCorrelation:
    matrix: np.ndarray  # [d_z(mod 1), d_z(mod 2)]
    pair: tuple[int, int]
    value: float


def saliency_summaries(maps, mask) -> np.ndarray:
    """Mean in-mask saliency for maps shaped ``[subjects, dims, S, S]``."""
    maps = np.asarray(maps)
    mask = np.asarray(mask) > 0
    return maps[..., mask].mean(axis=-1)


def cross_modal_saliency_correlation(s1, s2, mask=None) -> SaliencyCorrelation:
    """Correlate every modality-1 dimension with every modality-2 dimension across subjects.

    ``s1``/``s2`` are per-subject maps ``[subjects, dims, S, S]`` (summarized by
    their mean in-mask saliency) or already-summarized ``[subjects, dims]``.
    """
    s1, s2 = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if len(s1) != len(s2):
        raise ValueError("modalities must cover the same subjects")
    if len(s1) < 3:
        raise ValueError("need at least 3 subjects")
    if s1.ndim == 4:
        m = np.ones(s1.shape[-2:]) if mask is None else mask
        s1, s2 = saliency_summaries(s1, m), saliency_summaries(s2, m)
    matrix = _pearson_matrix(s1, s2)
    flat = int(np.argmax(matrix))
    a, b = divmod(flat, matrix.shape[1])
    return SaliencyCorrelation(matrix, (a, b), float(matrix[a, b]))


@dataclass
class MannWhitney:
    u: float
    z: float
    rbc: float
    p: float


def _mw_from_ranks(ranks_a_sum, n_a: int, n_b: int, tie_term):
    u = ranks_a_sum - n_a * (n_a + 1) / 2.0
    n = n_a + n_b
    mean_u = n_a * n_b / 2.0
    var_u = n_a * n_b / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    sd = np.sqrt(np.maximum(var_u, 0.0))
    z = np.where(sd > 0, (u - mean_u) / np.where(sd > 0, sd, 1.0), 0.0)
    # (2U - n_a n_b) is exact, so swapping the samples negates rbc exactly
    rbc = (2.0 * u - n_a * n_b) / (n_a * n_b)
    return u, z, rbc


def _tie_term(sorted_vals: np.ndarray, axis: int = 0):
    """Sum of t^3 - t over tie groups, along ``axis`` of a sorted array."""
    v = np.moveaxis(sorted_vals, axis, 0)
    change = np.ones(v.shape, dtype=bool)
    change[1:] = v[1:] != v[:-1]
    group = np.cumsum(change, axis=0)
    n = v.shape[0]
    flat = group.reshape(n, -1)
    out = np.zeros(flat.shape[1])
    for j in range(flat.shape[1]):
        t = np.bincount(flat[:, j]).astype(np.float64)
        out[j] = (t**3 - t).sum()
    return out.reshape(v.shape[1:]) if v.ndim > 1 else out[0]


def mann_whitney_rbc(a, b) -> MannWhitney:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 1 or b.size < 1:
        raise ValueError("both samples must be nonempty")
    both = np.concatenate([a, b])
    ranks = rankdata(both, method="average")
    u, z, rbc = _mw_from_ranks(ranks[: a.size].sum(), a.size, b.size, _tie_term(np.sort(both)))
    z = float(z)
    return MannWhitney(float(u), z, float(rbc), math.erfc(abs(z) / math.sqrt(2)))


@dataclass
class GroupDiffMap:
    rbc: np.ndarray
    u: np.ndarray
    z: np.ndarray
    p: np.ndarray
    peak: tuple[int, ...]
    dim: int | None = None


def group_diff_map(maps, groups, group_a=1, group_b=0, dim: int | None = None) -> GroupDiffMap:
    """Voxel-wise Mann-Whitney contrast of per-subject maps ``[subjects, ...]``.

    Returns the RBC image and the coordinate of its peak absolute value.
    """
    maps = np.asarray(maps, dtype=np.float64)
    groups = np.asarray(groups)
    a = maps[groups == group_a]
    b = maps[groups == group_b]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both groups must be nonempty")
    both = np.concatenate([a, b])
    ranks = rankdata(both, method="average", axis=0)
    tie = _tie_term(np.sort(both, axis=0))
    u, z, rbc = _mw_from_ranks(ranks[: len(a)].sum(axis=0), len(a), len(b), tie)
    p = erfc(np.abs(z) / math.sqrt(2))
    peak = np.unravel_index(int(np.argmax(np.abs(rbc))), rbc.shape)
    return GroupDiffMap(rbc, u, z, np.asarray(p), tuple(int(i) for i in peak), dim)


def select_extreme_dims(weights) -> tuple[int, int]:
    """Dimensions with the largest positive and most negative probe weights (lowest index on ties)."""
    w = np.asarray(weights, dtype=np.float64)
    return int(np.argmax(w)), int(np.argmin(w))


def threshold_map(saliency: np.ndarray, percentile: float = 90.0, mask=None) -> np.ndarray:
    """Zero out values below the given in-mask percentile."""
    m = np.ones(saliency.shape, dtype=bool) if mask is None else np.asarray(mask) > 0
    cut = np.percentile(saliency[m], percentile)
    return np.where(m & (saliency >= cut), saliency, 0.0)
