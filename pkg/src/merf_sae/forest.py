"""Regression random forest with out-of-bag predictions.

Trees are grown by variance reduction on bootstrap samples, with ``mtry``
candidate features per node. Each tree draws its randomness from its own
splitmix64 stream seeded from ``(seed, tree_index)``, so the fitted forest
does not depend on the number of workers. Candidate features of a node are
drawn from a key derived from the node's path, so refitting on a slightly
changed response only re-randomizes subtrees whose splits actually moved.

Trees are stored in flat arrays (one row per node, children as offsets
within the tree), which keeps prediction in compiled loops and makes
serialization a matter of dumping arrays.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from numba import njit

from ._rng import substream_seed
from .exceptions import ConfigError, SchemaError

logger = logging.getLogger(__name__)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def _next(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _below(state, n):
    """Uniform integer in [0, n)."""
    u = np.float64(_next(state) >> np.uint64(11)) * _INV53
    k = np.int64(u * n)
    return k if k < n else n - 1


@njit(cache=True, nogil=True)
def _child_key(key, side):
    state = np.empty(1, dtype=np.uint64)
    state[0] = key ^ (np.uint64(side + 1) * _MIX2)
    return _next(state)


@njit(cache=True, nogil=True)
def _best_split(Xt, y, order, start, end, f, node_mean, best):
    """Scan all thresholds of feature ``f`` (``order[start:end]`` holds the
    node's samples sorted by it); update ``best`` = (gain, thr, feat) when a
    strictly better split is found."""
    m = end - start
    total = 0.0
    for i in range(start, end):
        total += y[order[i]] - node_mean
    left = 0.0
    found = False
    b = Xt[f, order[start]]
    for i in range(start, end - 1):
        left += y[order[i]] - node_mean
        a = b
        b = Xt[f, order[i + 1]]
        if a < b:
            n_left = i - start + 1
            right = total - left
            gain = left * left / n_left + right * right / (m - n_left)
            if gain > best[0]:
                thr = 0.5 * (a + b)
                if thr >= b:
                    thr = a
                best[0] = gain
                best[1] = thr
                best[2] = f
                found = True
    return found


@njit(cache=True, nogil=True)
def _grow(Xt, y, srt, mtry, min_node_size, state):
    """Grow one tree; row ``f`` of ``srt`` holds the in-bag multiset sorted
    by feature ``f`` (modified in place).

    A node owns the same slice ``[start, end)`` of every row of ``srt``;
    splitting a node stably partitions each row so the children stay sorted.
    """
    p = Xt.shape[0]
    m = srt.shape[1]

    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.zeros(cap, dtype=np.int32)
    right = np.zeros(cap, dtype=np.int32)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int32)

    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_key = np.empty(cap, dtype=np.uint64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = m
    st_key[0] = _next(state)
    node_state = np.empty(1, dtype=np.uint64)
    top = 1
    n_nodes = 1
    perm = np.arange(p)
    buf = np.empty(m, dtype=np.int64)
    goes_left = np.zeros(Xt.shape[1], dtype=np.bool_)
    best = np.empty(3)

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        key = st_key[top]
        size = end - start
        acc = 0.0
        for i in range(start, end):
            acc += y[srt[0, i]]
        mean = acc / size
        value[node] = mean
        count[node] = size
        if size < 2 * min_node_size:
            continue
        first = y[srt[0, start]]
        pure = True
        for i in range(start + 1, end):
            if y[srt[0, i]] != first:
                pure = False
                break
        if pure:
            continue

        # the node's draws depend only on its path from the root, so a
        # changed split elsewhere leaves this node's candidates unchanged
        node_state[0] = key
        for k in range(p):
            perm[k] = k
        for k in range(p):
            j = k + _below(node_state, p - k)
            tmp = perm[k]
            perm[k] = perm[j]
            perm[j] = tmp
        cand = np.sort(perm[:mtry])
        best[0] = -np.inf
        best[2] = -1.0
        for f in cand:
            _best_split(Xt, y, srt[f], start, end, f, mean, best)
        # none of the drawn features varies within the node: try the rest
        k = mtry
        while best[2] < 0 and k < p:
            _best_split(Xt, y, srt[perm[k]], start, end, perm[k], mean, best)
            k += 1
        if best[2] < 0:
            continue

        f = np.int64(best[2])
        thr = best[1]
        for i in range(start, end):
            s = srt[f, i]
            goes_left[s] = Xt[f, s] <= thr
        mid = start
        for g in range(p):
            row = srt[g]
            lo = start
            hi = 0
            for i in range(start, end):
                s = row[i]
                if goes_left[s]:
                    row[lo] = s
                    lo += 1
                else:
                    buf[hi] = s
                    hi += 1
            for i in range(hi):
                row[lo + i] = buf[i]
            mid = lo

        feature[node] = f
        threshold[node] = thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top] = n_nodes + 1
        st_start[top] = mid
        st_end[top] = end
        st_key[top] = _child_key(key, 1)
        top += 1
        st_node[top] = n_nodes
        st_start[top] = start
        st_end[top] = mid
        st_key[top] = _child_key(key, 0)
        top += 1
        n_nodes += 2

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _fit_tree(Xt, y, order, seed, mtry, min_node_size, bootstrap):
    """One tree from its seed; ``order[f]`` sorts all training rows by
    feature ``f`` so the in-bag multiset is sorted by expanding counts."""
    p, n = Xt.shape
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    inbag = np.zeros(n, dtype=np.uint16)
    if bootstrap:
        for i in range(n):
            inbag[_below(state, n)] += 1
    else:
        for i in range(n):
            inbag[i] = 1
    srt = np.empty((p, n), dtype=np.int64)
    for f in range(p):
        k = 0
        for i in range(n):
            s = order[f, i]
            for _ in range(inbag[s]):
                srt[f, k] = s
                k += 1
    tree = _grow(Xt, y, srt, mtry, min_node_size, state)
    return tree, inbag


def _feature_order(Xt) -> np.ndarray:
    """Stable argsort of the training rows along every feature."""
    return np.ascontiguousarray(np.argsort(Xt, axis=1, kind="stable"), dtype=np.int64)


@njit(cache=True, nogil=True)
def _leaf(X, i, feature, threshold, left, right, base):
    node = base
    while feature[node] >= 0:
        if X[i, feature[node]] <= threshold[node]:
            node = base + left[node]
        else:
            node = base + right[node]
    return node


@njit(cache=True, nogil=True)
def _routing(feature, threshold, left, offsets):
    """Branch-free routing arrays: leaves point at themselves with an infinite
    threshold, so every row can take exactly ``depth[t]`` steps."""
    n = feature.shape[0]
    feat = np.zeros(n, dtype=np.int32)
    thr = np.full(n, np.inf)
    child = np.empty(n, dtype=np.int64)
    level = np.zeros(n, dtype=np.int64)
    depth = np.zeros(offsets.shape[0] - 1, dtype=np.int64)
    for t in range(offsets.shape[0] - 1):
        base = offsets[t]
        for k in range(base, offsets[t + 1]):
            if feature[k] >= 0:
                feat[k] = feature[k]
                thr[k] = threshold[k]
                child[k] = base + left[k]
                level[base + left[k]] = level[k] + 1
                level[base + left[k] + 1] = level[k] + 1
            else:
                child[k] = k
            if level[k] > depth[t]:
                depth[t] = level[k]
    return feat, thr, child, depth


@njit(cache=True, nogil=True)
def _predict_rows(X, lo, hi, feat, thr, child, depth, value, offsets, out):
    """out[i] = mean over trees for rows lo..hi.

    Trees are the outer loop so one tree stays in cache; each row still sums
    trees in index order, so any row partition gives identical output.
    """
    block = 128
    nodes = np.empty(block, dtype=np.int64)
    n_trees = offsets.shape[0] - 1
    for i in range(lo, hi):
        out[i] = 0.0
    for t in range(n_trees):
        base = offsets[t]
        for s in range(lo, hi, block):
            e = min(s + block, hi)
            for k in range(e - s):
                nodes[k] = base
            for _ in range(depth[t]):
                for k in range(e - s):
                    nd = nodes[k]
                    nodes[k] = child[nd] + (X[s + k, feat[nd]] > thr[nd])
            for k in range(e - s):
                out[s + k] += value[nodes[k]]
    for i in range(lo, hi):
        out[i] /= n_trees


@njit(cache=True, nogil=True)
def _predict_oob(X, feature, threshold, left, right, value, offsets, inbag, sums, counts):
    n_trees = offsets.shape[0] - 1
    for i in range(X.shape[0]):
        sums[i] = 0.0
        counts[i] = 0
    for t in range(n_trees):
        base = offsets[t]
        for i in range(X.shape[0]):
            if inbag[t, i] == 0:
                sums[i] += value[_leaf(X, i, feature, threshold, left, right, base)]
                counts[i] += 1


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyper-parameters.

    ``n_jobs`` only controls parallelism; it never changes the fitted forest.
    ``bootstrap=False`` (every tree sees the data once) exists for testing.
    """

    n_trees: int = 500
    mtry: int = 1
    min_node_size: int = 5
    seed: int = 0
    bootstrap: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be positive")
        if self.mtry < 1:
            raise ConfigError("mtry must be positive")
        if self.min_node_size < 1:
            raise ConfigError("min_node_size must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class Forest:
    """A fitted forest: trees in flat node arrays plus per-tree in-bag counts."""

    config: ForestConfig
    n_features: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    offsets: np.ndarray
    inbag: np.ndarray
    X_train: np.ndarray | None = field(default=None, repr=False)
    oob_fallbacks: int = 0
    _route: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def n_trees(self) -> int:
        return self.offsets.shape[0] - 1

    def tree(self, t: int) -> dict[str, np.ndarray]:
        """Node arrays of tree ``t`` (children indices local to the tree)."""
        sl = slice(self.offsets[t], self.offsets[t + 1])
        return {"feature": self.feature[sl], "threshold": self.threshold[sl],
                "left": self.left[sl], "right": self.right[sl],
                "value": self.value[sl], "count": self.count[sl]}

    def predict(self, X_new, n_jobs: int | None = None) -> np.ndarray:
        X_new = np.ascontiguousarray(X_new, dtype=np.float64)
        if X_new.ndim != 2 or X_new.shape[1] != self.n_features:
            raise SchemaError(
                f"expected {self.n_features} columns, got shape {X_new.shape}")
        out = np.empty(X_new.shape[0])
        if self._route is None:
            self._route = _routing(self.feature, self.threshold, self.left, self.offsets)
        args = (*self._route, self.value, self.offsets)
        jobs = self.config.n_jobs if n_jobs is None else n_jobs
        m = X_new.shape[0]
        if jobs <= 1 or m < 1024:
            _predict_rows(X_new, 0, m, *args, out)
            return out
        bounds = np.linspace(0, m, jobs + 1).astype(int)
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(lambda k: _predict_rows(X_new, bounds[k], bounds[k + 1], *args, out),
                          range(jobs)))
        return out

    def predict_oob(self) -> np.ndarray:
        """Mean over the trees whose bootstrap sample excludes each training row.

        Rows that are in-bag for every tree fall back to the full-forest
        prediction; their number is stored in ``oob_fallbacks``.
        """
        if self.X_train is None:
            raise SchemaError("forest was stored without its training matrix")
        X = self.X_train
        sums = np.empty(X.shape[0])
        counts = np.empty(X.shape[0], dtype=np.int64)
        _predict_oob(X, self.feature, self.threshold, self.left, self.right, self.value,
                     self.offsets, self.inbag, sums, counts)
        never = counts == 0
        self.oob_fallbacks = int(never.sum())
        out = np.empty(X.shape[0])
        out[~never] = sums[~never] / counts[~never]
        if self.oob_fallbacks:
            logger.warning("%d training rows are in-bag for every tree; "
                           "using full-forest predictions for them", self.oob_fallbacks)
            out[never] = self.predict(X[never])
        return out


@lru_cache(maxsize=64)
def _tree_seeds(seed: int, n_trees: int) -> np.ndarray:
    seeds = np.array([substream_seed(seed, t) for t in range(n_trees)], dtype=np.uint64)
    seeds.flags.writeable = False
    return seeds


def _grow_range(Xt, y, order, seeds, cfg, lo, hi, out):
    for t in range(lo, hi):
        out[t] = _fit_tree(Xt, y, order, seeds[t], cfg.mtry, cfg.min_node_size, cfg.bootstrap)


def fit_forest(X, y, config: ForestConfig = ForestConfig()) -> Forest:
    """Fit a regression forest.

    Tree ``t`` is seeded from ``(config.seed, t)``; ``config.n_jobs`` threads
    grow disjoint tree ranges.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise SchemaError(f"X has shape {X.shape} but y has length {y.shape[0]}")
    n, p = X.shape
    if n < 2:
        raise ConfigError("need at least two observations")
    if config.mtry > p:
        raise ConfigError(f"mtry={config.mtry} exceeds the number of features p={p}")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise SchemaError("X and y must be finite")
    Xt = np.ascontiguousarray(X.T)
    order = _feature_order(Xt)
    seeds = _tree_seeds(config.seed, config.n_trees)
    trees = [None] * config.n_trees
    jobs = max(1, min(config.n_jobs, config.n_trees))
    if jobs == 1:
        _grow_range(Xt, y, order, seeds, config, 0, config.n_trees, trees)
    else:
        bounds = np.linspace(0, config.n_trees, jobs + 1).astype(int)
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(lambda k: _grow_range(Xt, y, order, seeds, config, bounds[k],
                                                bounds[k + 1], trees), range(jobs)))
    sizes = np.array([tree[0][0].shape[0] for tree in trees])
    offsets = np.zeros(config.n_trees + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    parts = list(zip(*(tree[0] for tree in trees)))
    return Forest(
        config=config,
        n_features=p,
        feature=np.concatenate(parts[0]),
        threshold=np.concatenate(parts[1]),
        left=np.concatenate(parts[2]),
        right=np.concatenate(parts[3]),
        value=np.concatenate(parts[4]),
        count=np.concatenate(parts[5]),
        offsets=offsets,
        inbag=np.vstack([tree[1] for tree in trees]),
        X_train=X,
    )


def predict(forest: Forest, X_new) -> np.ndarray:
    return forest.predict(X_new)


def predict_oob(forest: Forest) -> np.ndarray:
    return forest.predict_oob()


def with_seed(config: ForestConfig, seed: int) -> ForestConfig:
    return replace(config, seed=int(seed))
