"""Prototype-based granular-ball splitting.

Pooled features are clustered into K pseudo-domains, the centroids are matched
to K persistent prototypes by a minimum-cost assignment so that label k keeps
meaning the same pseudo-domain from one iteration to the next, and the
prototypes follow their matched centroids by an exponential moving average.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from gbdal.errors import ConfigError, ContractError, InsufficientDataError

LEVELS = ("local", "global")


# ---------------------------------------------------------------------------
# pooling

def region_bounds(size: int, parts: int) -> list[tuple[int, int]]:
    """Half-open [start, stop) ranges: part a covers floor(a*size/parts) .. floor((a+1)*size/parts) - 1."""
    return [((a * size) // parts, ((a + 1) * size) // parts) for a in range(parts)]


def region_map(height: int, width: int, grid: tuple[int, int]) -> np.ndarray:
    """[H, W] array holding the row-major region index of every cell."""
    gh, gw = grid
    if gh < 1 or gw < 1 or gh > height or gw > width:
        raise ConfigError(f"pooling grid {grid} does not fit a {height}x{width} feature map")
    out = np.empty((height, width), dtype=np.int64)
    for a, (r0, r1) in enumerate(region_bounds(height, gh)):
        for b, (c0, c1) in enumerate(region_bounds(width, gw)):
            out[r0:r1, c0:c1] = a * gw + b
    return out


def pool_local(fmap, grid: tuple[int, int] = (3, 3)) -> tuple[np.ndarray, np.ndarray]:
    """Adaptive average pooling of a [C, H, W] (or [B, C, H, W]) map.

    Returns pooled vectors of shape [N, C] (or [B, N, C]) with N = gh * gw and
    the [H, W] region map that tells which pooled vector each cell belongs to.
    """
    f = np.asarray(fmap, dtype=np.float64)
    single = f.ndim == 3
    if single:
        f = f[None]
    _, c, h, w = f.shape
    regions = region_map(h, w, grid)
    n = grid[0] * grid[1]
    onehot = np.zeros((h * w, n))
    onehot[np.arange(h * w), regions.ravel()] = 1.0
    onehot /= onehot.sum(axis=0, keepdims=True)
    pooled = np.einsum("bcp,pn->bnc", f.reshape(len(f), c, h * w), onehot)
    return (pooled[0] if single else pooled), regions


def pool_global(fmap) -> np.ndarray:
    f = np.asarray(fmap, dtype=np.float64)
    return f.mean(axis=(-2, -1))


# ---------------------------------------------------------------------------
# clustering

@dataclass
class ClusterResult:
    centroids: np.ndarray  # [K, C]
    assignment: np.ndarray  # [n]
    objective: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def _distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct differences rather than the |x|^2 - 2xc + |c|^2 expansion: exact zeros, no cancellation
    return np.sqrt(((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1))


def objective(x: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    """Sum of (unsquared) Euclidean distances from each feature to its centroid."""
    d = np.sqrt(((x - centroids[assignment]) ** 2).sum(axis=-1))
    return math.fsum(d)


def _assign(x, centroids):
    d = _distances(x, centroids)
    a = np.argmin(d, axis=1)  # ties -> lowest index
    return a, d[np.arange(len(x)), a]


def _repair_empty(x, centroids, assignment, dist, k):
    """Reseed empty clusters at the feature farthest from its centroid."""
    taken = set()
    for j in range(k):
        if np.any(assignment == j):
            continue
        order = np.argsort(-dist, kind="stable")
        far = next((i for i in order if i not in taken and dist[i] > 0), None)
        if far is None:
            continue  # fewer distinct features than clusters
        taken.add(far)
        centroids[j] = x[far]
        assignment, dist = _assign(x, centroids)
    return centroids, assignment, dist


def _weiszfeld(x, onehot, start, iters=5, tol=1e-12):
    """Geometric medians of every cluster at once (Weiszfeld with the Vardi-Zhang fix).

    ``onehot`` is the [n, K] membership matrix; rows of ``start`` belonging to
    empty clusters are returned unchanged. Members that coincide with the
    current estimate are left out of the weighted mean and enter through the
    step-length factor instead, so an estimate sitting on a data point only
    moves if that point is not the median.
    """
    z = start.copy()
    live = onehot.any(axis=0)
    scale = max(1.0, float(np.abs(x).max()))
    owner = onehot.argmax(axis=1)
    for _ in range(iters):
        d = np.sqrt(((x - z[owner]) ** 2).sum(axis=1))
        at_z = d <= 1e-14 * scale
        w = onehot * np.where(at_z, 0.0, 1.0 / np.where(at_z, 1.0, d))[:, None]  # [n, K]
        wsum = w.sum(axis=0)
        pull = w.T @ x  # sum_i w_i x_i per cluster
        moving = live & (wsum > 0)
        t = z.copy()
        t[moving] = pull[moving] / wsum[moving, None]
        r = np.sqrt(((pull - wsum[:, None] * z) ** 2).sum(axis=1))
        eta = (onehot & at_z[:, None]).sum(axis=0)
        gamma = np.where(r > 0, np.minimum(1.0, eta / np.where(r > 0, r, 1.0)), 1.0)
        z_new = (1.0 - gamma)[:, None] * t + gamma[:, None] * z
        if np.abs(z_new - z).max() < tol * scale:
            return z_new
        z = z_new
    return z


def kmeans(features, k: int, init, max_iters: int = 50, tol: float = 1e-6) -> ClusterResult:
    """Lloyd-style alternation for the sum-of-distances objective.

    Assignment: nearest centroid (ties to the lowest index). Update: each
    centroid takes a few Weiszfeld steps towards the geometric median of its
    members, warm-started from the member mean or the current centroid,
    whichever is cheaper. Moves are kept only if they do not raise the
    objective, so the objective never increases. Stops once the largest centroid shift is below
    ``tol`` and reassignment changes nothing, or after ``max_iters``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError("features must be a [n, C] array")
    if len(x) < k:
        raise InsufficientDataError(f"{len(x)} features for {k} clusters")
    centroids = np.array(init, dtype=np.float64, copy=True)
    if centroids.shape != (k, x.shape[1]):
        raise ContractError(f"init must have shape {(k, x.shape[1])}, got {centroids.shape}")
    if not (np.isfinite(x).all() and np.isfinite(centroids).all()):
        raise ContractError("non-finite features or initial centroids")

    assignment, dist = _assign(x, centroids)
    centroids, assignment, dist = _repair_empty(x, centroids, assignment, dist, k)
    current = math.fsum(dist)
    history = [current]
    it = 0
    for it in range(1, max_iters + 1):
        previous = centroids.copy()
        onehot = assignment[:, None] == np.arange(k)[None, :]
        counts = onehot.sum(axis=0)
        means = np.where(counts[:, None] > 0, (onehot.T @ x) / np.maximum(counts, 1)[:, None], centroids)
        # warm start each cluster from whichever of member mean / current centroid is cheaper
        cost_mean = onehot.T @ np.sqrt(((x - means[assignment]) ** 2).sum(axis=1))
        cost_cur = onehot.T @ dist
        start = np.where((cost_mean <= cost_cur)[:, None], means, centroids)
        cand = _weiszfeld(x, onehot, start)
        trial = np.sqrt(((x - cand[assignment]) ** 2).sum(axis=1))
        total = math.fsum(trial)
        if total <= current:
            centroids, dist, current = cand, trial, total
        else:
            # fall back to accepting cluster moves one at a time
            for j in np.flatnonzero(counts):
                members = onehot[:, j]
                step = dist.copy()
                step[members] = trial[members]
                t = math.fsum(step)
                if t <= current:
                    centroids[j] = cand[j]
                    dist, current = step, t
        new_assignment, dist = _assign(x, centroids)
        centroids, new_assignment, dist = _repair_empty(x, centroids, new_assignment, dist, k)
        current = math.fsum(dist)
        history.append(current)
        shift = np.max(np.sqrt(((centroids - previous) ** 2).sum(axis=1)))
        changed = np.any(new_assignment != assignment)
        assignment = new_assignment
        if shift < tol and not changed:
            break
    return ClusterResult(centroids=centroids, assignment=assignment, objective=current, history=history, iterations=it)


# ---------------------------------------------------------------------------
# matching

@dataclass(frozen=True)
class MatchResult:
    permutation: tuple[int, ...]  # prototype k <-> centroid permutation[k]
    total_cost: float


def _hungarian_value(cost: np.ndarray) -> tuple[float, list[int]]:
    """Shortest augmenting path Hungarian method on a square matrix, O(n^3)."""
    n = cost.shape[0]
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row matched to column j (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = inf, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return math.fsum(cost[r, row_to_col[r]] for r in range(n)), row_to_col


def linear_assignment(cost) -> MatchResult:
    """Minimum-cost perfect matching; the lexicographically smallest optimum wins ties.

    Rows are fixed in order, each to the lowest column that still admits an
    optimal completion, with Hungarian solves on the remaining sub-matrix.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ContractError(f"cost matrix must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ContractError("non-finite matching cost")
    n = cost.shape[0]
    if n == 0:
        return MatchResult((), 0.0)
    best, completion = _hungarian_value(cost)
    tol = 1e-12 * max(1.0, abs(best)) * n
    sol = dict(enumerate(completion))  # row -> column of the current optimal completion
    perm: list[int] = []
    free = list(range(n))
    fixed = 0.0
    for r in range(n):
        rest_rows = list(range(r + 1, n))
        chosen = sol[r]
        for c in free:
            if c >= chosen:
                break
            rest_cols = [j for j in free if j != c]
            if rest_rows:
                rest, rest_sol = _hungarian_value(cost[np.ix_(rest_rows, rest_cols)])
            else:
                rest, rest_sol = 0.0, []
            if fixed + cost[r, c] + rest <= best + tol:
                chosen = c
                sol = {row: rest_cols[j] for row, j in zip(rest_rows, rest_sol)}
                break
        perm.append(chosen)
        fixed += cost[r, chosen]
        free.remove(chosen)
    total = math.fsum(cost[r, perm[r]] for r in range(n))
    return MatchResult(tuple(perm), total)


def match_cost(prototypes, centroids) -> np.ndarray:
    q = np.asarray(prototypes, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if q.shape != c.shape:
        raise ContractError(f"prototypes {q.shape} and centroids {c.shape} differ in shape")
    return _distances(q, c)


def hungarian_match(prototypes, centroids) -> MatchResult:
    """Permutation minimising the summed Euclidean distance prototype k <-> centroid sigma(k)."""
    return linear_assignment(match_cost(prototypes, centroids))


@dataclass
class DomainAssignment:
    labels: np.ndarray
    permutation: tuple[int, ...]
    feature_ids: np.ndarray | None = None


def assign_labels(cluster: ClusterResult, match: MatchResult, feature_ids=None) -> DomainAssignment:
    """Label k goes to every feature of cluster permutation[k]."""
    k = len(cluster.centroids)
    if len(match.permutation) != k:
        raise ContractError("match and clustering disagree on K")
    inverse = np.empty(k, dtype=np.int64)
    inverse[np.asarray(match.permutation)] = np.arange(k)
    labels = inverse[cluster.assignment]
    return DomainAssignment(labels=labels, permutation=match.permutation, feature_ids=feature_ids)


# ---------------------------------------------------------------------------
# prototype bank and feature buffer

@dataclass(frozen=True)
class PrototypeBank:
    k: int
    level: str = "local"
    prototypes: np.ndarray | None = None
    t: int = 0
    alpha_min: float = 0.5
    alpha_max: float = 0.99
    warmup_iters: int = 100

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("K must be >= 1")
        if self.level not in LEVELS:
            raise ConfigError(f"unknown bank level {self.level!r}")

    def alpha(self, t: int | None = None) -> float:
        t = self.t if t is None else t
        if self.warmup_iters <= 0:
            return self.alpha_max
        return self.alpha_min + (self.alpha_max - self.alpha_min) * min(t, self.warmup_iters) / self.warmup_iters


def update_prototypes(bank: PrototypeBank, centroids, match: MatchResult | None = None) -> PrototypeBank:
    """EMA step towards the matched centroids; the first call copies them."""
    c = np.asarray(centroids, dtype=np.float64)
    if c.shape[0] != bank.k:
        raise ContractError(f"expected {bank.k} centroids, got {c.shape[0]}")
    if bank.t == 0 or bank.prototypes is None:
        return replace(bank, prototypes=c.copy(), t=bank.t + 1)
    perm = np.arange(bank.k) if match is None else np.asarray(match.permutation)
    a = bank.alpha()
    q = a * bank.prototypes + (1.0 - a) * c[perm]
    return replace(bank, prototypes=q, t=bank.t + 1)


class FeatureBuffer:
    """FIFO of recent pooled features, capacity M."""

    def __init__(self, capacity: int = 256, level: str = "local", dim: int | None = None):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.level = level
        self._items: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, features) -> None:
        for row in np.asarray(features, dtype=np.float64):
            self._items.append(row.copy())

    def array(self, dim: int) -> np.ndarray:
        if not self._items:
            return np.empty((0, dim))
        return np.stack(self._items)

    def load(self, rows: np.ndarray) -> None:
        self._items.clear()
        self.push(rows)


def _distinct_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K distinct features sampled uniformly (without replacement over distinct rows)."""
    distinct = np.unique(x, axis=0)
    if len(distinct) < k:
        raise InsufficientDataError(f"only {len(distinct)} distinct features for {k} clusters")
    idx = np.sort(rng.choice(len(distinct), size=k, replace=False))
    return distinct[idx]


def split(bank: PrototypeBank, buffer: FeatureBuffer, new_features, rng: np.random.Generator,
          max_iters: int = 50, tol: float = 1e-6):
    """One splitting step: cluster buffer + new features, match, label the new ones, EMA-update.

    Returns ``(assignment | None, bank, buffer)``. The assignment is None while
    fewer than K distinct features are available; the new features still enter
    the buffer so later calls can warm up.
    """
    new = np.asarray(new_features, dtype=np.float64)
    if new.ndim != 2:
        raise ContractError("new_features must be [n, C]")
    population = np.concatenate([buffer.array(new.shape[1]), new], axis=0)
    try:
        if bank.t > 0 and bank.prototypes is not None:
            init = bank.prototypes
        else:
            init = _distinct_init(population, bank.k, rng)
        cluster = kmeans(population, bank.k, init, max_iters=max_iters, tol=tol)
    except InsufficientDataError:
        buffer.push(new)
        return None, bank, buffer
    if bank.t > 0 and bank.prototypes is not None:
        match = hungarian_match(bank.prototypes, cluster.centroids)
    else:
        match = MatchResult(tuple(range(bank.k)), 0.0)
    full = assign_labels(cluster, match)
    n_new = len(new)
    ids = np.arange(len(population) - n_new, len(population))
    assignment = DomainAssignment(labels=full.labels[ids], permutation=match.permutation, feature_ids=ids)
    bank = update_prototypes(bank, cluster.centroids, match)
    buffer.push(new)
    return assignment, bank, buffer
