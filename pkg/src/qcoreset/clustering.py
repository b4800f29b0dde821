"""(k, p)-clustering coresets from bicriteria centers, and loss-aware data selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import ContractViolation
from .framework import WeightedSubset
from .linalg import as_matrix
from .rng import child_seed, stream
from .sampler import QueryLedger, qsample_with_probs

EPS_INNER = 0.01


@dataclass
class CenterSet:
    centers: np.ndarray
    p: float = 2.0
    provenance: str = "user"

    def __post_init__(self):
        self.centers = as_matrix(np.atleast_2d(self.centers), "centers")
        if self.centers.shape[0] < 1:
            raise ContractViolation("a center set needs at least one center")
        if self.provenance not in ("bicriteria", "user"):
            raise ContractViolation(f"unknown provenance {self.provenance!r}")

    @property
    def m(self) -> int:
        return self.centers.shape[0]


def sq_distances(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """n x m squared Euclidean distances, clipped at zero."""
    d2 = np.einsum("ij,ij->i", A, A)[:, None] - 2.0 * A @ X.T + np.einsum("ij,ij->i", X, X)[None, :]
    return np.maximum(d2, 0.0)


def clustering_cost(A, X, p: float = 2.0, weights=None) -> float:
    """sum_i w_i min_j ||a_i - x_j||^p."""
    A, X = as_matrix(A), as_matrix(np.atleast_2d(X), "X")
    c = np.min(sq_distances(A, X), axis=1) ** (p / 2.0)
    return float(c.sum() if weights is None else np.dot(weights, c))


class PartitionOracle:
    """Exact nearest-center assignment with a per-point distance cache."""

    def __init__(self, A, centers: CenterSet, ledger: QueryLedger | None = None):
        self.A = as_matrix(A)
        self.centers = centers
        self.ledger = ledger
        n = self.A.shape[0]
        self._assign = np.full(n, -1, dtype=int)
        self._dist = np.zeros(n)

    def _fill(self, idx: np.ndarray) -> None:
        todo = idx[self._assign[idx] < 0]
        if todo.size == 0:
            return
        d2 = sq_distances(self.A[todo], self.centers.centers)
        j = np.argmin(d2, axis=1)
        self._assign[todo] = j
        self._dist[todo] = np.sqrt(d2[np.arange(todo.size), j])
        if self.ledger is not None:
            self.ledger.charge_reads(todo.size * self.A.shape[1])

    def assign(self, idx=None) -> np.ndarray:
        idx = np.arange(self.A.shape[0]) if idx is None else np.asarray(idx, dtype=int)
        self._fill(idx)
        return self._assign[idx]

    def cost(self, idx=None) -> np.ndarray:
        """||a_i - tau(a_i)||^p."""
        idx = np.arange(self.A.shape[0]) if idx is None else np.asarray(idx, dtype=int)
        self._fill(idx)
        return self._dist[idx] ** self.centers.p


# ---------------------------------------------------------------- bicriteria

def bicriteria_size(n: int, k: int, c: float = 0.25) -> int:
    return max(k, int(math.ceil(c * k * math.log(max(n, 2)) ** 2)))


def bicriteria_centers(A, k: int, p: float, seed, m: int | None = None, c: float = 0.25) -> CenterSet:
    """m = O(k log^2 n) centers by D^p sampling: each round adds one point
    with probability proportional to its current cost."""
    A = as_matrix(A)
    n = A.shape[0]
    if not 1 <= k <= n:
        raise ContractViolation(f"k={k} out of range for n={n}")
    m = min(n, m or bicriteria_size(n, k, c))
    rng = stream(seed, "bicriteria")
    chosen = [int(rng.integers(n))]
    d2 = sq_distances(A, A[chosen])[:, 0]
    for _ in range(m - 1):
        w = d2 ** (p / 2.0)
        tot = w.sum()
        if tot <= 0:
            break
        i = int(rng.choice(n, p=w / tot))
        chosen.append(i)
        d2 = np.minimum(d2, sq_distances(A, A[i:i + 1])[:, 0])
    return CenterSet(A[chosen], p, "bicriteria")


# ---------------------------------------------------------------- estimators

def sum_budget(n: int, eps: float, delta: float, c_q: float) -> int:
    return int(math.ceil(c_q * math.sqrt(n) * math.log(1.0 / delta) / eps))


def count_budget(n: int, m: int, eps: float, delta: float, c_q: float) -> int:
    return int(math.ceil(c_q * math.sqrt(n * m / eps) * math.log(1.0 / delta)))


def _stress_factor(rng, eps: float, size=None):
    return 1.0 + rng.uniform(-eps / 2.0, eps / 2.0, size)


def estimate_sum(values: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]], eps: float, delta: float,
                 ledger: QueryLedger, seed, n: int | None = None, stress: bool = False) -> float:
    """Sum of nonnegative values, charged at the cost of a (1 +- eps) quantum estimate.

    With ``stress`` the exact sum is multiplied by a seeded factor in
    [1 - eps/2, 1 + eps/2].
    """
    if callable(values):
        if n is None:
            raise ContractViolation("n is required for a callable value oracle")
        v = np.asarray(values(np.arange(n)), dtype=float)
    else:
        v = np.asarray(values, dtype=float)
    if v.size and (not np.all(np.isfinite(v)) or v.min() < 0):
        raise ContractViolation("estimate_sum needs finite nonnegative values")
    ledger.charge_quantum(sum_budget(max(v.size, 1), eps, delta, ledger.c_q), "estimate_sum")
    total = float(v.sum())
    if stress:
        total *= float(_stress_factor(stream(seed, "stress_sum"), eps))
    return total


def estimate_cluster_sizes(tau: PartitionOracle, m: int, eps: float, delta: float, ledger: QueryLedger,
                           seed, stress: bool = False) -> np.ndarray:
    """Cluster sizes |{i : tau(i) = j}| for j < m, charged as a quantum count."""
    labels = tau.assign()
    n = labels.size
    ledger.charge_quantum(count_budget(n, m, eps, delta, ledger.c_q), "estimate_cluster_sizes")
    counts = np.bincount(labels, minlength=m).astype(float)
    if stress:
        counts *= _stress_factor(stream(seed, "stress_count"), eps, m)
    return counts


# ---------------------------------------------------------------- coreset

@dataclass(frozen=True)
class ClusterConstants:
    """``bicriteria`` scales m = c k ln^2 n; ``size`` scales the default sample
    size s = size * m / eps^2."""

    bicriteria: float = 0.25
    size: float = 2.0
    delta: float = 0.01


def sensitivity_scores(costs: np.ndarray, labels: np.ndarray, cost_est: float, sizes_est: np.ndarray,
                       p: float) -> np.ndarray:
    """2^{4p+2} (||a_i - x*(a_i)||^p / cost + 1 / n_{i(j)}), with n floored at 1."""
    inv = 1.0 / np.maximum(sizes_est[labels], 1.0)
    ratio = costs / cost_est if cost_est > 0 else np.zeros_like(costs)
    return 2.0 ** (4 * p + 2) * (ratio + inv)


def qcluster(A, k: int, p: float, eps: float, ledger: QueryLedger, seed, size: int | None = None,
             consts: ClusterConstants = ClusterConstants(), stress: bool = False) -> WeightedSubset:
    """Sensitivity-sampling coreset over bicriteria centers.

    Rates are min(1, s * s_i / sum(s)), so the expected size is at most s.
    """
    A = as_matrix(A)
    n = A.shape[0]
    if p < 1:
        raise ContractViolation("p must be at least 1")
    if not 1 <= k <= n:
        raise ContractViolation(f"k={k} out of range for n={n}")
    x = bicriteria_centers(A, k, p, child_seed(seed, "bicriteria"), c=consts.bicriteria)
    s = size if size is not None else int(math.ceil(consts.size * x.m / eps**2))
    if n <= s:
        out = WeightedSubset.everything(n, "rows", "cluster")
        out.meta.update(centers=x.m, target=s)
        return out
    tau = PartitionOracle(A, x, ledger)
    sizes = estimate_cluster_sizes(tau, x.m, EPS_INNER, consts.delta, ledger, child_seed(seed, "sizes"), stress)
    cost_est = estimate_sum(tau.cost(), EPS_INNER, consts.delta, ledger, child_seed(seed, "cost"), stress=stress)
    scores = sensitivity_scores(tau.cost(), tau.assign(), cost_est, sizes, p)
    probs = np.minimum(1.0, s * scores / scores.sum())
    picked, pp = qsample_with_probs(n, probs, ledger, child_seed(seed, "sample"), tag="cluster")
    out = WeightedSubset(n, picked, 1.0 / pp, "rows", "cluster", pp)
    out.meta.update(centers=x.m, target=s, sensitivity_total=float(scores.sum()))
    return out


def lloyd(A, k: int, p: float = 2.0, seed=0, weights=None, iters: int = 50, restarts: int = 5) -> np.ndarray:
    """Weighted Lloyd iterations from D^p seeding; centers are weighted means."""
    A = as_matrix(A)
    w = np.ones(A.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    best, best_cost = None, np.inf
    for r in range(restarts):
        rng = stream(seed, "lloyd", r)
        X = [A[rng.choice(A.shape[0], p=w / w.sum())]]
        for _ in range(k - 1):
            d = np.min(sq_distances(A, np.array(X)), axis=1) ** (p / 2.0) * w
            X.append(A[rng.choice(A.shape[0], p=d / d.sum())] if d.sum() > 0 else A[rng.integers(A.shape[0])])
        X = np.array(X)
        for _ in range(iters):
            lab = np.argmin(sq_distances(A, X), axis=1)
            new = X.copy()
            for j in range(k):
                mask = lab == j
                if np.any(mask):
                    new[j] = np.average(A[mask], axis=0, weights=w[mask])
            if np.allclose(new, X):
                break
            X = new
        c = clustering_cost(A, X, p, w)
        if c < best_cost:
            best, best_cost = X, c
    return best


# ---------------------------------------------------------------- data selection

@dataclass
class SelectionResult:
    subset: WeightedSubset
    loss_queries: int
    denominator: float
    center_losses: np.ndarray
    meta: dict = field(default_factory=dict)

    def weights(self) -> np.ndarray:
        w = np.zeros(self.subset.source_n)
        w[self.subset.indices] = self.subset.weights
        return w


def qdata_selection(A, x: CenterSet, loss, eps: float, ledger: QueryLedger, seed, lam=None,
                    size: int | None = None, c_size: float = 2.0, delta: float = 0.01,
                    stress: bool = False) -> SelectionResult:
    """One-round adaptive sampling of points for estimating sum_i loss(a_i).

    ``loss`` is a callable on a center vector or an array of per-center
    losses; it is queried exactly once per center.  Point i is kept with
    probability min(1, s q_i), q_i = (loss(tau(a_i)) + lam_j ||a_i - tau(a_i)||^p)
    / (cost^lam(A, x) + sum_j n_j loss(x_j)), and weighted 1/p_i.
    """
    A = as_matrix(A)
    n = A.shape[0]
    k = x.m
    lam = np.ones(k) if lam is None else np.asarray(lam, dtype=float)
    if lam.shape != (k,) or np.any(lam < 0):
        raise ContractViolation("lam needs one nonnegative entry per center")
    if callable(loss):
        center_loss = np.array([float(loss(c)) for c in x.centers])
    else:
        center_loss = np.asarray(loss, dtype=float)
        if center_loss.shape != (k,):
            raise ContractViolation("loss table needs one entry per center")
    ledger.loss_queries += k
    if np.any(center_loss < 0) or not np.all(np.isfinite(center_loss)):
        raise ContractViolation("losses must be finite and nonnegative")
    s = size if size is not None else int(math.ceil(c_size / eps**2))
    tau = PartitionOracle(A, x, ledger)
    labels = tau.assign()
    v = lam[labels] * tau.cost()
    cost_lam = estimate_sum(v, EPS_INNER, delta, ledger, child_seed(seed, "cost"), stress=stress)
    sizes = estimate_cluster_sizes(tau, k, EPS_INNER, delta, ledger, child_seed(seed, "sizes"), stress)
    total = cost_lam + float(np.dot(sizes, center_loss))
    if total <= 0:
        empty = WeightedSubset(n, np.zeros(0, dtype=int), np.zeros(0), "rows", "selection")
        return SelectionResult(empty, k, 0.0, center_loss, {"exact_zero": True, "target": s})
    q = (center_loss[labels] + v) / total
    probs = np.minimum(1.0, s * q)
    picked, pp = qsample_with_probs(n, probs, ledger, child_seed(seed, "sample"), tag="selection")
    sub = WeightedSubset(n, picked, 1.0 / pp, "rows", "selection", pp)
    return SelectionResult(sub, k, total, center_loss, {"exact_zero": False, "target": s})
