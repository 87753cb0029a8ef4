"""Depth-limited least-squares regression trees for the boosting updates.

Split search is exact and greedy: every feature and every boundary between
distinct sorted values is scored by the variance-reduction gain.  Ties are
deterministic (first the smaller feature index, then the smaller
threshold).  The ridge penalty enters the leaf values only,

    value = sum(targets) / (count + l2_reg),

so with no penalty a leaf predicts the plain mean of its targets.
One-hot encoded categorical columns take values 0/1, so the midpoint
threshold of 0.5 routes them cleanly.
"""

import numpy as np


class RegressionTree:
    """Greedy binary regression tree with exact split search."""

    def __init__(self, max_depth=3, min_samples_leaf=10, l2_reg=0.0):
        if max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")
        self.max_depth = int(max_depth)
        self.min_samples_leaf = int(min_samples_leaf)
        self.l2_reg = float(l2_reg)
        self.root = None

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("X must be (n, d) and y (n,)")
        if X.shape[0] == 0:
            raise ValueError("cannot fit a tree on zero rows")
        self.root = self._build(X, y, np.arange(X.shape[0]), 0)
        return self

    def _leaf(self, y_node):
        return {"value": float(y_node.sum() / (y_node.size + self.l2_reg))}

    def _best_split(self, X, y, idx):
        n = idx.size
        best_gain = 0.0
        best = None
        min_leaf = self.min_samples_leaf
        for f in range(X.shape[1]):
            xs = X[idx, f]
            order = np.argsort(xs, kind="stable")
            xs_s = xs[order]
            ys = y[idx][order]
            cum = np.cumsum(ys)
            total = cum[-1]
            k = np.arange(1, n)  # size of the left child
            valid = (xs_s[1:] != xs_s[:-1]) & (k >= min_leaf) & (n - k >= min_leaf)
            if not valid.any():
                continue
            sl = cum[:-1]
            with np.errstate(invalid="ignore"):
                gains = sl**2 / k + (total - sl) ** 2 / (n - k) - total**2 / n
            gains[~valid] = -np.inf
            pos = int(np.argmax(gains))  # first max: smallest threshold wins ties
            if gains[pos] > best_gain + 1e-12:
                best_gain = float(gains[pos])
                thr = 0.5 * (xs_s[pos] + xs_s[pos + 1])
                best = (f, thr)
        return best

    def _build(self, X, y, idx, depth):
        y_node = y[idx]
        if depth >= self.max_depth or idx.size < 2 * self.min_samples_leaf:
            return self._leaf(y_node)
        split = self._best_split(X, y, idx)
        if split is None:
            return self._leaf(y_node)
        f, thr = split
        go_left = X[idx, f] <= thr
        return {
            "feature": int(f),
            "threshold": float(thr),
            "left": self._build(X, y, idx[go_left], depth + 1),
            "right": self._build(X, y, idx[~go_left], depth + 1),
        }

    def predict(self, X):
        if self.root is None:
            raise ValueError("tree is not fitted")
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape[0])
        self._fill(self.root, X, out, np.ones(X.shape[0], dtype=bool))
        return out

    def _fill(self, node, X, out, mask):
        if "value" in node:
            out[mask] = node["value"]
            return
        cond = X[:, node["feature"]] <= node["threshold"]
        self._fill(node["left"], X, out, mask & cond)
        self._fill(node["right"], X, out, mask & ~cond)

    def to_dict(self):
        return {
            "max_depth": self.max_depth,
            "min_samples_leaf": self.min_samples_leaf,
            "l2_reg": self.l2_reg,
            "root": self.root,
        }

    @classmethod
    def from_dict(cls, d):
        tree = cls(
            max_depth=d["max_depth"],
            min_samples_leaf=d["min_samples_leaf"],
            l2_reg=d["l2_reg"],
        )
        tree.root = d["root"]
        return tree
