"""Recursively partitioned regression trees with cost-complexity pruning.

Implements an rpart-flavoured CART regressor: greedy ANOVA splitting gated
by a scaled complexity parameter, weakest-link pruning, and a k-fold
cross-validated complexity table. Numeric splits use midpoint thresholds
with the convention "value < threshold goes left"; categorical splits use
a left-set of category codes found by the mean-ordered prefix scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

DEFAULT_MINSPLIT = 25
DEFAULT_MINBUCKET = 100


@dataclass(frozen=True)
class Split:
    """Routing rule of an internal node.

    Numeric rule: value < threshold goes left. Categorical rule: value in
    left_set goes left; `categories` records every code seen at fit time
    so unseen codes can be flagged at predict time.
    """

    feature: int
    kind: str  # "numeric" | "categorical"
    threshold: Optional[float] = None
    left_set: Optional[frozenset] = None
    categories: Optional[frozenset] = None


@dataclass
class Node:
    n: int
    mean: float
    deviance: float
    split: Optional[Split] = None
    left: Optional["Node"] = None
    right: Optional["Node"] = None
    # Scaled cost-complexity at which this node collapses to a leaf under
    # weakest-link pruning; +inf for nodes never assigned (manual trees).
    collapse_alpha: float = math.inf

    def is_leaf(self) -> bool:
        return self.split is None


@dataclass
class CpRow:
    cp: float
    nsplit: int
    rel_error: float
    xerror: Optional[float] = None
    xstd: Optional[float] = None


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    kind: str
    sse_reduction: float
    threshold: Optional[float] = None
    left_set: Optional[tuple] = None


def _sse(y: np.ndarray) -> float:
    if y.size == 0:
        return 0.0
    return float(((y - y.mean()) ** 2).sum())


def _numeric_split(x: np.ndarray, y: np.ndarray, minbucket: int):
    """Best threshold for one numeric feature, or None.

    Scans midpoints between consecutive distinct sorted values; ties in
    SSE reduction keep the smallest threshold.
    """
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    n = ys.size
    if n < 2 * minbucket or xs[0] == xs[-1]:
        return None
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    total, total_sq = csum[-1], csq[-1]
    # k = size of the left group at each distinct-value boundary
    ks = np.nonzero(xs[1:] != xs[:-1])[0] + 1
    ks = ks[(ks >= minbucket) & (n - ks >= minbucket)]
    if ks.size == 0:
        return None
    sum_l = csum[ks - 1]
    sse_l = csq[ks - 1] - sum_l * sum_l / ks
    nr = n - ks
    sum_r = total - sum_l
    sse_r = (total_sq - csq[ks - 1]) - sum_r * sum_r / nr
    parent = total_sq - total * total / n
    reduction = parent - sse_l - sse_r
    best = int(np.argmax(reduction))  # first max -> smallest threshold
    k = int(ks[best])
    lo, hi = float(xs[k - 1]), float(xs[k])
    t = (lo + hi) / 2.0
    if not (lo < t <= hi):  # adjacent floats can collapse the midpoint
        t = hi
    return t, float(reduction[best])


def _categorical_split(codes: np.ndarray, y: np.ndarray, minbucket: int):
    """Best left-set for one categorical feature, or None.

    Categories are ordered by mean target (ties by code) and prefix cuts of
    that ordering are scanned, which is optimal for the SSE criterion. Ties
    in reduction keep the lexicographically smallest left-set.
    """
    cats, inv = np.unique(codes, return_inverse=True)
    k = cats.size
    if k < 2:
        return None
    counts = np.bincount(inv, minlength=k).astype(float)
    sums = np.bincount(inv, weights=y, minlength=k)
    sqs = np.bincount(inv, weights=y * y, minlength=k)
    means = sums / counts
    order = np.lexsort((cats, means))
    cn = np.cumsum(counts[order])
    cs = np.cumsum(sums[order])
    cq = np.cumsum(sqs[order])
    n, total, total_sq = cn[-1], cs[-1], cq[-1]
    nl = cn[:-1]
    nr = n - nl
    valid = (nl >= minbucket) & (nr >= minbucket)
    if not valid.any():
        return None
    parent = total_sq - total * total / n
    sse_l = cq[:-1] - cs[:-1] * cs[:-1] / nl
    sse_r = (total_sq - cq[:-1]) - (total - cs[:-1]) * (total - cs[:-1]) / nr
    reduction = np.where(valid, parent - sse_l - sse_r, -np.inf)
    best_red = reduction.max()
    ordered = cats[order]
    best_set = None
    for j in np.nonzero(reduction == best_red)[0]:
        left = tuple(sorted(str(c) for c in ordered[: j + 1]))
        if best_set is None or left < best_set:
            best_set = left
    return best_set, float(best_red)


def best_split(
    columns: Sequence[np.ndarray],
    kinds: Sequence[str],
    y: np.ndarray,
    minbucket: int = 1,
) -> Optional[SplitCandidate]:
    """Best admissible split over all features, or None.

    Ties are broken by lower feature index; within a feature by the scan's
    own rule (smaller threshold / lexicographically smaller left-set).
    """
    best: Optional[SplitCandidate] = None
    for f, (col, kind) in enumerate(zip(columns, kinds)):
        if kind == "numeric":
            found = _numeric_split(col, y, minbucket)
            if found is None:
                continue
            t, red = found
            cand = SplitCandidate(f, "numeric", red, threshold=t)
        else:
            found = _categorical_split(col, y, minbucket)
            if found is None:
                continue
            left, red = found
            cand = SplitCandidate(f, "categorical", red, left_set=left)
        if best is None or cand.sse_reduction > best.sse_reduction:
            best = cand
    return best


class RegressionTree(BaseEstimator, RegressorMixin):
    """CART regression tree with rpart-style complexity control.

    Parameters
    ----------
    cp : float
        Minimum scaled SSE improvement to keep a split: a split is grown
        only when its SSE reduction is at least ``cp`` times the root
        deviance. Also the knob for :meth:`prune`.
    minsplit, minbucket : int or None
        Minimum rows in a node to attempt a split, and minimum rows in any
        leaf. If exactly one is given the other is derived (minsplit =
        3 x minbucket, or minbucket = minsplit // 3, floored at 1); if
        neither is given the defaults are minsplit=25, minbucket=100.
    xval : int
        Number of cross-validation folds for the complexity table.
        Values below 2 skip cross-validation.
    max_depth : int
        Safety cap on tree depth.
    seed : int
        Seed for the fold assignment shuffle.
    categorical_features : tuple of int
        Column indices treated as categorical codes.
    feature_names : tuple of str, optional
        Display names used in exports; defaults to f0, f1, ...
    unseen_category : str
        Policy for category codes absent from a rule's fit-time set:
        "right" routes them down the right branch and flags the
        prediction, "error" raises.
    target_kind : str
        Free-form label of the target's unit, carried into serialized
        documents.
    """

    def __init__(
        self,
        cp: float = 1e-4,
        minsplit: Optional[int] = None,
        minbucket: Optional[int] = None,
        xval: int = 10,
        max_depth: int = 30,
        seed: int = 0,
        categorical_features: tuple = (),
        feature_names: Optional[tuple] = None,
        unseen_category: str = "right",
        target_kind: str = "",
    ):
        self.cp = cp
        self.minsplit = minsplit
        self.minbucket = minbucket
        self.xval = xval
        self.max_depth = max_depth
        self.seed = seed
        self.categorical_features = categorical_features
        self.feature_names = feature_names
        self.unseen_category = unseen_category
        self.target_kind = target_kind

    # ------------------------------------------------------------------
    # fitting

    def fit(self, X, y):
        cols, kinds = self._check_X(X, reset=True)
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or y.size != cols[0].size:
            raise ValueError("y must be 1-d and match X row count")
        if y.size == 0:
            raise ValueError("empty training table")
        if not np.isfinite(y).all():
            raise ValueError("targets must be finite")
        if self.cp < 0:
            raise ValueError("cp must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        self.minsplit_, self.minbucket_ = _resolve_min_sizes(self.minsplit, self.minbucket)

        self._kinds_ = kinds
        self.root_ = self._grow(cols, y, np.arange(y.size), depth=0)
        self.root_deviance_ = self.root_.deviance
        steps = _assign_collapse_alphas(self.root_, self.root_deviance_)
        self.cp_table_ = _build_cp_table(self.root_, steps, self.cp)
        if self.xval >= 2:
            if self.xval > y.size:
                raise ValueError("xval exceeds row count")
            self._cross_validate(cols, y)
        return self

    def _grow(self, cols, y, idx, depth: int) -> Node:
        y_node = y[idx]
        node = Node(n=int(idx.size), mean=float(y_node.mean()), deviance=_sse(y_node))
        if depth == 0:
            self._root_dev_tmp = node.deviance
        if node.n < self.minsplit_ or depth >= self.max_depth:
            return node
        if np.all(y_node == y_node[0]):
            return node
        cand = best_split([c[idx] for c in cols], self._kinds_, y_node, self.minbucket_)
        if cand is None:
            return node
        if not (cand.sse_reduction > 0 and cand.sse_reduction >= self.cp * self._root_dev_tmp):
            return node
        col = cols[cand.feature][idx]
        if cand.kind == "numeric":
            go_left = col < cand.threshold
            split = Split(cand.feature, "numeric", threshold=cand.threshold)
        else:
            left_set = frozenset(cand.left_set)
            go_left = np.isin(col, np.array(sorted(left_set)))
            split = Split(
                cand.feature,
                "categorical",
                left_set=left_set,
                categories=frozenset(str(c) for c in np.unique(col)),
            )
        node.split = split
        node.left = self._grow(cols, y, idx[go_left], depth + 1)
        node.right = self._grow(cols, y, idx[~go_left], depth + 1)
        return node

    # ------------------------------------------------------------------
    # prediction

    def predict(self, X) -> np.ndarray:
        values, _ = self.predict_flagged(X)
        return values

    def predict_flagged(self, X):
        """Predict and report which rows hit an unseen category code.

        Returns (values, flags) where flags[i] is True when row i carried a
        categorical code absent from some traversed rule's fit-time set.
        """
        self._require_fitted()
        cols, _ = self._check_X(X, reset=False)
        n = cols[0].size
        out = np.empty(n, dtype=float)
        flags = np.zeros(n, dtype=bool)
        self._route(self.root_, cols, np.arange(n), out, flags, cp_floor=None)
        return out, flags

    def predict_pruned(self, X, cp: float) -> np.ndarray:
        """Predict as if the tree were pruned at ``cp``, without copying it."""
        self._require_fitted()
        cols, _ = self._check_X(X, reset=False)
        n = cols[0].size
        out = np.empty(n, dtype=float)
        flags = np.zeros(n, dtype=bool)
        self._route(self.root_, cols, np.arange(n), out, flags, cp_floor=cp)
        return out

    def _route(self, node, cols, idx, out, flags, cp_floor):
        if idx.size == 0:
            return
        if node.split is None or (cp_floor is not None and node.collapse_alpha < cp_floor):
            out[idx] = node.mean
            return
        s = node.split
        col = cols[s.feature][idx]
        if s.kind == "numeric":
            go_left = col < s.threshold
        else:
            go_left = np.isin(col, np.array(sorted(s.left_set)))
            if s.categories is not None:
                unseen = ~np.isin(col, np.array(sorted(s.categories)))
                if unseen.any():
                    if self.unseen_category == "error":
                        bad = sorted(set(col[unseen].tolist()))
                        raise ValueError(f"unseen category codes: {bad}")
                    flags[idx[unseen]] = True
        self._route(node.left, cols, idx[go_left], out, flags, cp_floor)
        self._route(node.right, cols, idx[~go_left], out, flags, cp_floor)

    # ------------------------------------------------------------------
    # pruning and cross-validation

    def prune(self, cp: float) -> "RegressionTree":
        """Weakest-link pruned copy of this fitted tree.

        Internal nodes whose scaled collapse complexity is below ``cp``
        become leaves; splits at exactly ``cp`` are retained, so
        ``prune(0)`` is the identity.
        """
        self._require_fitted()
        if cp < 0:
            raise ValueError("cp must be >= 0")
        pruned = self._clone_with(cp=cp)
        pruned.root_ = _copy_pruned(self.root_, cp)
        pruned.root_deviance_ = self.root_deviance_
        pruned.minsplit_ = self.minsplit_
        pruned.minbucket_ = self.minbucket_
        pruned._kinds_ = self._kinds_
        pruned.n_features_in_ = self.n_features_in_
        steps = _assign_collapse_alphas(pruned.root_, pruned.root_deviance_)
        pruned.cp_table_ = _build_cp_table(pruned.root_, steps, cp)
        return pruned

    def _clone_with(self, **overrides) -> "RegressionTree":
        params = self.get_params()
        params.update(overrides)
        return RegressionTree(**params)

    def _cross_validate(self, cols, y):
        """Fill xerror/xstd on the complexity table.

        Rows are shuffled into ``xval`` folds; each pruned-tree size is
        evaluated at the geometric mean of adjacent table cp values, the
        topmost row at +inf (the root-only model). Held-out squared errors
        are pooled over all rows and scaled by the full fit's root
        deviance.
        """
        n = y.size
        rows = self.cp_table_
        betas = evaluation_cps(rows)
        rng = np.random.default_rng(self.seed)
        fold = np.empty(n, dtype=int)
        fold[rng.permutation(n)] = np.arange(n) % self.xval

        if self.root_deviance_ <= 0:
            for row in rows:
                row.xerror, row.xstd = 0.0, 0.0
            return
        sqerr = np.zeros((len(rows), n))
        for f in range(self.xval):
            test = fold == f
            train_idx = np.nonzero(~test)[0]
            test_idx = np.nonzero(test)[0]
            sub = self._clone_with(xval=0)
            sub.fit(_columns_to_matrix([c[train_idx] for c in cols]), y[train_idx])
            test_cols = [c[test_idx] for c in cols]
            out = np.empty(test_idx.size, dtype=float)
            flags = np.zeros(test_idx.size, dtype=bool)
            for i, beta in enumerate(betas):
                sub._route(sub.root_, test_cols, np.arange(test_idx.size), out, flags, cp_floor=beta)
                sqerr[i, test_idx] = (y[test_idx] - out) ** 2
        for i, row in enumerate(rows):
            e = sqerr[i]
            row.xerror = float(e.sum() / self.root_deviance_)
            row.xstd = float(math.sqrt(float(((e - e.mean()) ** 2).sum())) / self.root_deviance_)

    # ------------------------------------------------------------------
    # structure helpers

    def leaves(self):
        return [node for node in self.nodes() if node.is_leaf()]

    def nodes(self):
        self._require_fitted()
        out = []
        stack = [self.root_]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf():
                stack.append(node.right)
                stack.append(node.left)
        return out

    def n_splits(self) -> int:
        return sum(1 for node in self.nodes() if not node.is_leaf())

    def resolved_feature_names(self) -> tuple:
        if self.feature_names is not None:
            return tuple(self.feature_names)
        return tuple(f"f{i}" for i in range(self.n_features_in_))

    def _require_fitted(self):
        if not hasattr(self, "root_"):
            raise RuntimeError("tree is not fitted")

    def _check_X(self, X, reset: bool):
        cols = _matrix_to_columns(X, self.categorical_features)
        if reset:
            self.n_features_in_ = len(cols)
            if self.feature_names is not None and len(self.feature_names) != len(cols):
                raise ValueError("feature_names length does not match X")
        elif hasattr(self, "n_features_in_") and len(cols) != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {len(cols)}")
        kinds = [
            "categorical" if i in set(self.categorical_features) else "numeric"
            for i in range(len(cols))
        ]
        for i, (col, kind) in enumerate(zip(cols, kinds)):
            if kind == "numeric" and not np.isfinite(col).all():
                raise ValueError(f"feature {i} contains non-finite values")
        return cols, kinds


def evaluation_cps(cp_table) -> list:
    """Pruning thresholds that realize each complexity-table row.

    The geometric mean of adjacent cp values lands strictly inside the
    interval where a row's subtree is optimal; the topmost row uses +inf
    (the root-only model).
    """
    betas = [math.inf]
    for i in range(1, len(cp_table)):
        betas.append(math.sqrt(cp_table[i].cp * cp_table[i - 1].cp))
    return betas


def _resolve_min_sizes(minsplit, minbucket):
    """Apply the one-given-derives-the-other rule for node size floors."""
    if minsplit is None and minbucket is None:
        return DEFAULT_MINSPLIT, DEFAULT_MINBUCKET
    if minsplit is None:
        minsplit = max(1, minbucket * 3)
    elif minbucket is None:
        minbucket = max(1, minsplit // 3)
    if minsplit < 1 or minbucket < 1:
        raise ValueError("minsplit and minbucket must be positive")
    return int(minsplit), int(minbucket)


def _matrix_to_columns(X, categorical_features) -> list:
    """Split a 2-d array-like into per-feature column arrays."""
    cat = set(categorical_features)
    if hasattr(X, "iloc"):  # pandas DataFrame without a hard dependency
        raw = [np.asarray(X.iloc[:, i]) for i in range(X.shape[1])]
    else:
        arr = np.asarray(X, dtype=object)
        if arr.ndim != 2:
            raise ValueError("X must be 2-dimensional")
        raw = [arr[:, i] for i in range(arr.shape[1])]
    cols = []
    for i, col in enumerate(raw):
        if i in cat:
            cols.append(np.asarray([str(v) for v in col], dtype=str))
        else:
            cols.append(np.asarray(col, dtype=float))
    return cols


def _columns_to_matrix(cols) -> np.ndarray:
    out = np.empty((cols[0].size, len(cols)), dtype=object)
    for i, col in enumerate(cols):
        out[:, i] = col
    return out


def _copy_pruned(node: Node, cp: float) -> Node:
    if node.split is None or node.collapse_alpha < cp:
        return Node(node.n, node.mean, node.deviance)
    out = Node(node.n, node.mean, node.deviance, split=node.split,
               collapse_alpha=node.collapse_alpha)
    out.left = _copy_pruned(node.left, cp)
    out.right = _copy_pruned(node.right, cp)
    return out


def _assign_collapse_alphas(root: Node, root_deviance: float):
    """Run the weakest-link sequence, stamping collapse_alpha on each node.

    Returns the collapse steps as (scaled_alpha, nsplit_after, rel_error_after),
    merging simultaneous collapses at equal complexity into one step.
    """
    internals = [n for n in _preorder(root) if not n.is_leaf()]
    for n in internals:
        n.collapse_alpha = math.inf
    if not internals:
        return []
    if root_deviance <= 0:
        for n in internals:
            n.collapse_alpha = 0.0
        return [(0.0, 0, 1.0)]

    collapsed: set = set()

    def live_walk():
        # (live internal nodes, per-node (subtree SSE, leaf count), root SSE)
        stats = {}

        def rec(n):
            if n.is_leaf() or id(n) in collapsed:
                return n.deviance, 1
            ls, ll = rec(n.left)
            rs, rl = rec(n.right)
            stats[id(n)] = (n, ls + rs, ll + rl)
            return ls + rs, ll + rl

        root_sse, _ = rec(root)
        return stats, root_sse

    steps = []
    while id(root) not in collapsed:
        stats, _ = live_walk()
        g_raw = {
            key: (n.deviance - sub_sse) / (leaves - 1)
            for key, (n, sub_sse, leaves) in stats.items()
        }
        alpha_raw = min(g_raw.values())
        alpha = alpha_raw / root_deviance
        for key, g in g_raw.items():
            if g == alpha_raw:
                for d in _preorder(stats[key][0]):
                    if not d.is_leaf() and id(d) not in collapsed:
                        d.collapse_alpha = alpha
                        collapsed.add(id(d))
        stats, live_sse = live_walk()
        step = (alpha, len(stats), live_sse / root_deviance)
        if steps and steps[-1][0] == alpha:
            steps[-1] = step
        else:
            steps.append(step)
    return steps


def _preorder(node):
    out = []
    stack = [node]
    while stack:
        n = stack.pop()
        out.append(n)
        if not n.is_leaf():
            stack.append(n.right)
            stack.append(n.left)
    return out


def _build_cp_table(root: Node, steps, cp_param: float):
    """Assemble the complexity table, nsplit ascending.

    Each collapse step contributes a row labelled with the complexity that
    produced it; the fully grown tree is labelled with the fit's own cp.
    """
    nsplit_full = sum(1 for n in _preorder(root) if not n.is_leaf())
    if root.deviance <= 0 or nsplit_full == 0:
        return [CpRow(cp=float(cp_param), nsplit=0, rel_error=1.0)]
    rows = [CpRow(cp=a, nsplit=k, rel_error=rel) for a, k, rel in reversed(steps)]
    full_sse = _subtree_sse(root)
    rows.append(CpRow(cp=float(cp_param), nsplit=nsplit_full, rel_error=full_sse / root.deviance))
    return rows


def _subtree_sse(node: Node) -> float:
    if node.is_leaf():
        return node.deviance
    return _subtree_sse(node.left) + _subtree_sse(node.right)
