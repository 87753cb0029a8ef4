"""Evaluation metrics for default probabilities and loss distributions.

Probability metrics: rank AUC, Hand's H-measure, log-loss, Brier score and
expected calibration error over pooled-quantile bins.  Loss-distribution
metrics: empirical CRPS, the asymmetric quantile score and RMSE.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

PROB_CLAMP = 1e-15


def _check_binary(labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a nonempty vector")
    if np.any(~np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    if labels.min() == labels.max():
        raise ValueError("both classes must be present")
    return labels.astype(np.int64)


def auc(probs, labels):
    """Probability that a random positive outranks a random negative,
    counting ties as one half (Mann-Whitney rank form)."""
    labels = _check_binary(labels)
    probs = np.asarray(probs, dtype=float)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    ranks = stats.rankdata(probs)
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2) / (n0 * n1))


def _roc_points(probs, labels):
    # threshold sweep, descending score, ties grouped; rows (fpr, tpr)
    order = np.argsort(-probs, kind="stable")
    y = labels[order]
    p = probs[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.flatnonzero(np.append(np.diff(p) != 0, True))
    n1, n0 = tp[-1], fp[-1]
    x = np.concatenate([[0.0], fp[last] / n0])
    ty = np.concatenate([[0.0], tp[last] / n1])
    return np.column_stack([x, ty])


def _upper_hull(points):
    # Andrew monotone chain, upper envelope, points already sorted by x
    hull = []
    for pt in points:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (pt[1] - y1) - (y2 - y1) * (pt[0] - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append((float(pt[0]), float(pt[1])))
    return np.array(hull)


def _beta22_c_integral(lo, hi):
    # int_lo^hi c * Beta(2,2)(c) dc via the regularized incomplete beta
    return 0.5 * (special.betainc(3, 2, hi) - special.betainc(3, 2, lo))


def _beta22_1mc_integral(lo, hi):
    return 0.5 * (special.betainc(2, 3, hi) - special.betainc(2, 3, lo))


def h_measure(probs, labels):
    """Hand's H-measure with a Beta(2,2) severity distribution.

    Convention: scores are default probabilities, label 1 is the default
    class, and the normalized cost c is the price of flagging a non-default
    (so c near 1 makes false alarms expensive).  H = 1 minus the ratio of
    the hull classifier's expected minimum loss to the trivial classifier's,
    both averaged over Beta(2,2) costs.
    """
    labels = _check_binary(labels)
    probs = np.asarray(probs, dtype=float)
    pi1 = labels.mean()
    pi0 = 1.0 - pi1
    hull = _upper_hull(_roc_points(probs, labels))
    xs, ys = hull[:, 0], hull[:, 1]
    # cost where the optimal vertex switches from i-1 to i
    dy = np.diff(ys)
    dx = np.diff(xs)
    switch = pi1 * dy / (pi0 * dx + pi1 * dy)
    bounds = np.concatenate([[0.0], switch[::-1], [1.0]])
    # vertex order along increasing c: high c favors few false alarms,
    # i.e. the (0,0) end of the hull, so walk the hull backwards
    verts = np.arange(len(xs))[::-1]
    num = 0.0
    for k, v in enumerate(verts):
        lo, hi = bounds[k], bounds[k + 1]
        if hi <= lo:
            continue
        num += pi0 * xs[v] * _beta22_c_integral(lo, hi)
        num += pi1 * (1.0 - ys[v]) * _beta22_1mc_integral(lo, hi)
    den = pi0 * _beta22_c_integral(0.0, pi1) + pi1 * _beta22_1mc_integral(pi1, 1.0)
    return float(1.0 - num / den)


def log_loss(probs, labels):
    """Mean negative Bernoulli log-likelihood with probabilities clamped
    away from 0 and 1."""
    labels = np.asarray(labels, dtype=float)
    p = np.clip(np.asarray(probs, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p)))


def brier(probs, labels):
    """Mean squared difference between probabilities and outcomes."""
    labels = np.asarray(labels, dtype=float)
    p = np.asarray(probs, dtype=float)
    return float(np.mean((p - labels) ** 2))


@dataclass
class BinSpec:
    """Calibration bin boundaries covering [0, 1], nondecreasing."""

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("need at least two boundaries")
        if np.any(np.diff(b) < 0):
            raise ValueError("boundaries must be nondecreasing")
        if b[0] > 0 or b[-1] < 1:
            raise ValueError("boundaries must cover [0, 1]")
        self.boundaries = b

    @classmethod
    def from_pooled(cls, pooled_probs, count=20):
        """Boundaries at equally spaced quantiles of the pooled predictions,
        widened to cover [0, 1]."""
        pooled = np.asarray(pooled_probs, dtype=float)
        qs = np.quantile(pooled, np.linspace(0.0, 1.0, count + 1))
        qs[0] = 0.0
        qs[-1] = 1.0
        return cls(boundaries=np.maximum.accumulate(qs))

    @property
    def n_bins(self):
        return self.boundaries.size - 1

    def assign(self, probs):
        """Bin index per probability, in 0..n_bins-1."""
        idx = np.searchsorted(self.boundaries[1:-1], np.asarray(probs, dtype=float),
                              side="right")
        return idx.astype(np.int64)


def ece(probs, labels, bins):
    """Expected calibration error: bin-weighted absolute gap between mean
    predicted probability and empirical default rate; empty bins count 0."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    idx = bins.assign(probs)
    n = probs.size
    total = 0.0
    for b in range(bins.n_bins):
        mask = idx == b
        nb = int(mask.sum())
        if nb == 0:
            continue
        total += (nb / n) * abs(probs[mask].mean() - labels[mask].mean())
    return float(total)


def crps_empirical(samples, realized):
    """Empirical CRPS: mean|X - L| - 0.5 mean|X - X'| with the pair mean
    taken over all ordered pairs, computed in O(n log n) from the sorted
    sample."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("samples must be nonempty")
    term1 = np.mean(np.abs(x - realized))
    i = np.arange(n)
    pair_sum = np.sum((2 * i - n + 1) * x)
    return float(term1 - pair_sum / n**2)


def quantile_loss(q, realized, alpha=0.99):
    """Asymmetric quantile score (L - q)(alpha - 1{L <= q}); realizations
    above the quantile are penalized alpha-fold."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    q = float(q)
    realized = np.asarray(realized, dtype=float)
    val = (realized - q) * (alpha - (realized <= q))
    return float(val) if val.ndim == 0 else float(val.mean())


def rmse(predicted_means, realized):
    """Root-mean-square difference between aligned vectors."""
    a = np.asarray(predicted_means, dtype=float)
    b = np.asarray(realized, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def probability_metrics(probs, labels, bins):
    """The Table-3-style metric row for one model's pooled predictions."""
    return {
        "auc": auc(probs, labels),
        "h_measure": h_measure(probs, labels),
        "log_loss": log_loss(probs, labels),
        "brier": brier(probs, labels),
        "ece": ece(probs, labels, bins),
    }
