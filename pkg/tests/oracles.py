"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np
from scipy.optimize import brentq


def pairwise_auc(scores, y) -> float:
    pos = [s for s, t in zip(scores, y) if t == 1]
    neg = [s for s, t in zip(scores, y) if t == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def pairwise_u(a, b) -> float:
    """Count of (a_i > b_j) pairs plus half the ties."""
    return sum(1.0 if x > z else 0.5 if x == z else 0.0 for x in a for z in b)


def _sigmoid(s):
    return np.where(s >= 0, 1 / (1 + np.exp(-np.abs(s))), np.exp(-np.abs(s)) / (1 + np.exp(-np.abs(s))))


def logreg_objective(X, y, w, b, l1, l2) -> float:
    s = X @ w + b
    nll = np.mean(np.logaddexp(0, s) - y * s)
    return float(nll + l1 * np.abs(w).sum() + 0.5 * l2 * w @ w)


def coordinate_descent_logreg(X, y, l1, l2, sweeps=5000, tol=1e-14):
    """Cyclic exact coordinate minimization; each 1-D subproblem solved by root-finding its derivative."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0

    def dderiv(j, t, s_rest):
        s = s_rest + X[:, j] * t
        return np.mean((_sigmoid(s) - y) * X[:, j]) + l2 * t

    prev = math.inf
    for _ in range(sweeps):
        # bias: smooth and unpenalized
        s_rest = X @ w
        f = lambda t: np.mean(_sigmoid(s_rest + t) - y)  # noqa: E731
        lo, hi = b - 1.0, b + 1.0
        while f(lo) > 0:
            lo -= 2 * (hi - lo)
        while f(hi) < 0:
            hi += 2 * (hi - lo)
        b = brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        for j in range(d):
            s_rest = X @ w + b - X[:, j] * w[j]
            g0 = dderiv(j, 0.0, s_rest)
            if abs(g0) <= l1:
                w[j] = 0.0
                continue
            sign = -1.0 if g0 > 0 else 1.0  # move against the smooth gradient
            h = lambda t: dderiv(j, t, s_rest) + sign * l1  # noqa: E731
            lo, hi = (0.0, 1.0) if sign > 0 else (-1.0, 0.0)
            while h(lo) > 0:
                lo -= 2 * (hi - lo)
            while h(hi) < 0:
                hi += 2 * (hi - lo)
            w[j] = brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        obj = logreg_objective(X, y, w, b, l1, l2)
        if prev - obj < tol:
            break
        prev = obj
    return w, b
