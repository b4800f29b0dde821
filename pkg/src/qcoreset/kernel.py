"""Recursive Nystrom ridge-score sampling and kernel low-rank approximation.

All kernel entries go through :class:`KernelOracle`, which memoizes them
and charges each distinct (unordered) pair once to the ledger.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractViolation, KernelContractError
from .framework import WeightedSubset
from .linalg import pseudoinverse, thin_svd, top_k
from .lowrank import FactoredLowRank, column_pcp, generalized_lowrank, qls
from .rng import child_seed
from .sampler import QueryLedger, halving_chain, qsample_with_probs

CACHE_LIMIT = 4096


@dataclass
class KernelSpec:
    """Points plus a kernel: 'linear', 'poly' (degree, coef0), 'rbf' (gamma) or a
    custom vectorized ``func(X, Y) -> Gram block``."""

    points: np.ndarray
    kind: str = "rbf"
    gamma: float = 1.0
    degree: int = 2
    coef0: float = 1.0
    func: Callable | None = None
    symmetric: bool = True

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not np.all(np.isfinite(self.points)):
            raise ContractViolation("kernel points must be finite")
        if self.func is None and self.kind not in ("linear", "poly", "rbf"):
            raise ContractViolation(f"unknown kernel {self.kind!r}")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def evaluate(self, I, J) -> np.ndarray:
        X, Y = self.points[I], self.points[J]
        if self.func is not None:
            return np.asarray(self.func(X, Y), dtype=float)
        G = X @ Y.T
        if self.kind == "linear":
            return G
        if self.kind == "poly":
            return (G + self.coef0) ** self.degree
        sq = np.einsum("ij,ij->i", X, X)[:, None] + np.einsum("ij,ij->i", Y, Y)[None, :] - 2 * G
        return np.exp(-self.gamma * np.maximum(sq, 0.0))

    def gram(self) -> np.ndarray:
        idx = np.arange(self.n)
        return self.evaluate(idx, idx)


class KernelOracle:
    """Memoized kernel access charging distinct evaluations to the ledger."""

    def __init__(self, spec: KernelSpec, ledger: QueryLedger):
        self.spec = spec
        self.ledger = ledger
        n = spec.n
        self.seen = np.zeros((n, n), dtype=bool) if n <= CACHE_LIMIT else None

    def block(self, I, J) -> np.ndarray:
        I = np.asarray(I, dtype=int)
        J = np.asarray(J, dtype=int)
        out = self.spec.evaluate(I, J)
        if self.seen is None:
            self.ledger.charge_kernel(out.size)
            return out
        sub = self.seen[np.ix_(I, J)]
        # duplicates inside I or J must not be double counted
        fresh = ~sub
        if fresh.any():
            ii, jj = np.nonzero(fresh)
            pairs = np.unique(np.minimum(I[ii], J[jj]) * self.spec.n + np.maximum(I[ii], J[jj]))
            a, b = pairs // self.spec.n, pairs % self.spec.n
            self.ledger.charge_kernel(pairs.size)
            self.seen[a, b] = True
            if self.spec.symmetric:
                self.seen[b, a] = True
        return out

    def diag(self, I) -> np.ndarray:
        I = np.asarray(I, dtype=int)
        vals = np.array([self.spec.evaluate([i], [i])[0, 0] for i in I])
        if self.seen is None:
            self.ledger.charge_kernel(I.size)
        else:
            new = ~self.seen[I, I]
            self.ledger.charge_kernel(int(np.unique(I[new]).size))
            self.seen[I, I] = True
        return vals

    @property
    def distinct(self) -> int:
        return int(np.triu(self.seen).sum()) if self.seen is not None else -1


@dataclass(frozen=True)
class NystromConstants:
    """Constants of the recursive sampler: rank rule c k log(2k/delta) <= s,
    scores (score/lambda) * residual and rates min(1, rate * q log(2k/delta))."""

    c: float = 8.0
    score: float = 5.0
    rate: float = 16.0


def nystrom_rank(s: int, delta: float, c: float = 8.0) -> int:
    k = 1
    while c * (k + 1) * math.log(2 * (k + 1) / delta) <= s:
        k += 1
    return k


def _tail_lambda(M: np.ndarray, k: int) -> float:
    # a level with at most k points has no tail; cap the rank at half the level
    ev = np.clip(np.linalg.eigvalsh((M + M.T) / 2), 0.0, None)[::-1]
    if M.shape[0] < 2:
        return float(ev.sum() / k)
    k = max(1, min(k, M.shape[0] // 2))
    return float(ev[k:].sum() / k)


def qnystrom(spec: KernelSpec, s: int, delta: float, ledger: QueryLedger, seed,
             oversample: float = 1.0, rank: int | None = None,
             consts: NystromConstants = NystromConstants(),
             oracle: KernelOracle | None = None, draws: int = 1):
    """Recursive ridge leverage sampling of kernel columns.

    Returns the final level's sample; stored weights are 1/p_i, so the
    column scaling is p_i^{-1/2}.  ``oversample`` multiplies the final
    level's rates only.  With ``draws > 1`` a list of independent final-level
    samples sharing the intermediate levels is returned.
    """
    oracle = oracle or KernelOracle(spec, ledger)
    n = spec.n
    if s >= n:
        out = WeightedSubset.everything(n, "columns", "nystrom")
        return out if draws == 1 else [out] * draws
    k = rank if rank is not None else nystrom_rank(s, delta, consts.c)
    logf = math.log(2 * k / delta)
    chain = halving_chain(n, s, child_seed(seed, "chain"))
    idx = chain.levels[0]
    w = np.ones(idx.size)
    diag = None
    for t in range(1, chain.T + 1):
        level = chain.levels[t]
        sw = np.sqrt(w)
        M = oracle.block(idx, idx) * sw[:, None] * sw[None, :]
        lam = _tail_lambda(M, k)
        lam = max(lam, 1e-12 * max(float(np.trace(M)), 1e-300))
        Kl = oracle.block(level, idx) * sw[None, :]
        if diag is None:
            diag = oracle.diag(np.arange(n))
            if np.any(diag < 0):
                raise KernelContractError("kernel Gram has a negative diagonal entry")
        sol = np.linalg.solve(M + lam * np.eye(idx.size), Kl.T)
        resid = diag[level] - np.einsum("ij,ji->i", Kl, sol)
        floor = -1e-8 * np.abs(diag[level])
        if np.any(resid < floor - 1e-12):
            raise KernelContractError("kernel Gram is not positive semidefinite")
        q = consts.score / lam * np.maximum(resid, 0.0)
        if t == chain.T:
            probs = np.minimum(1.0, consts.rate * logf * oversample * q)
            outs = []
            for j in range(draws):
                picked, pp = qsample_with_probs(level.size, probs, ledger, child_seed(seed, "final", j),
                                                tag="nystrom:final")
                out = WeightedSubset(n, level[picked], 1.0 / pp, "columns", "nystrom", pp)
                out.meta.update(rank=k, levels=chain.T)
                outs.append(out)
            return outs[0] if draws == 1 else outs
        probs = np.minimum(1.0, consts.rate * logf * q)
        picked, pp = qsample_with_probs(level.size, probs, ledger, child_seed(seed, "level", t), tag=f"nystrom:level{t}")
        idx, w = level[picked], 1.0 / pp
        if idx.size == 0:
            idx, w = level[:1], np.ones(1)
    raise AssertionError("unreachable")


class LazyRows:
    """Rows of K D M (D a weighted column sample) evaluated on request."""

    def __init__(self, oracle: KernelOracle, cols: np.ndarray, col_scale: np.ndarray, M: np.ndarray):
        self.oracle, self.cols, self.col_scale, self.M = oracle, cols, col_scale, M

    def rows(self, I) -> np.ndarray:
        return (self.oracle.block(I, self.cols) * self.col_scale[None, :]) @ self.M

    @property
    def shape(self):
        return (self.oracle.spec.n, self.M.shape[1])


@dataclass(frozen=True)
class KernelConstants:
    """Desk-scale constants for qlowrank_kernel.

    ``level_size`` is the Nystrom level size, ``over`` multiplies the
    sqrt(n/(eps k)) oversampling of D1/D2, ``z_rate`` that of D3, and
    ``c4``, ``c6`` the leverage sample sizes k'/eps^2 and k/eps.  Degenerate
    sketches are redrawn up to ``retries`` times.
    """

    level_size: int = 24
    over: float = 0.35
    z_rate: float = 0.25
    c4: float = 2.0
    c6: float = 7.0
    chain_rank: float = 0.5
    retries: int = 3
    nystrom: NystromConstants = field(default_factory=lambda: NystromConstants(rate=0.02))


def qlowrank_kernel(spec: KernelSpec, k: int, eps: float, delta: float, ledger: QueryLedger, seed,
                    consts: KernelConstants = KernelConstants()) -> FactoredLowRank:
    """Rank-k approximation K ~ M N^T from sampled kernel entries only."""
    n = spec.n
    if not 1 <= k <= n:
        raise ContractViolation(f"k={k} out of range")
    oracle = KernelOracle(spec, ledger)
    kp = min(n, int(math.ceil(k / eps)))
    if kp >= n or consts.level_size >= n:
        K = oracle.block(np.arange(n), np.arange(n))
        U, s, V = top_k(K, k)
        return FactoredLowRank(U * s, V, k, {"exact": True})
    d6 = delta / 6
    last = None
    for attempt in range(consts.retries + 1):
        sd = child_seed(seed, "kernel", attempt)
        over = consts.over * math.sqrt(n / (eps * k))
        kr = max(1, int(math.ceil(consts.chain_rank * kp)))
        D1, D2 = qnystrom(spec, consts.level_size, d6, ledger, child_seed(sd, "nystrom"), over, kr,
                          consts.nystrom, oracle, draws=2)
        w1, w2 = np.sqrt(D1.weights), np.sqrt(D2.weights)
        R = oracle.block(D2.indices, D1.indices) * w2[:, None] * w1[None, :]
        # dominant row space of R (a subspace of R^{t1}) from a projection-cost
        # preserving subset of its rows
        kz = min(kp, min(R.shape))
        Rt = column_pcp(R.T, kz, 0.01, d6, ledger, child_seed(sd, "pcp")).scaled(R.T)
        Z = thin_svd(Rt).U[:, :kz]
        zr = np.einsum("ij,ij->i", Z, Z)
        p3 = np.minimum(1.0, consts.z_rate * math.sqrt(n / (eps * k)) * zr)
        pick3, pp3 = qsample_with_probs(Z.shape[0], p3, ledger, child_seed(sd, "D3"), tag="kernel:D3")
        if pick3.size == 0:
            continue
        s3 = 1.0 / np.sqrt(pp3)
        ZD3 = (Z[pick3] * s3[:, None]).T
        Wmap = (s3[:, None] * pseudoinverse(ZD3))
        W = LazyRows(oracle, D1.indices[pick3], w1[pick3], Wmap)
        # leverage samples of W; the simulation evaluates every row once
        Wfull = W.rows(np.arange(n))
        m4 = int(math.ceil(consts.c4 * kp / eps**2))
        D4 = qls(Wfull, m4, d6, ledger, child_seed(sd, "D4"))
        D5 = qls(Wfull, m4, d6, ledger, child_seed(sd, "D5"))
        w4, w5 = np.sqrt(D4.weights), np.sqrt(D5.weights)
        D4W = Wfull[D4.indices] * w4[:, None]
        WD5 = (Wfull[D5.indices] * w5[:, None]).T
        D4KD5 = oracle.block(D4.indices, D5.indices) * w4[:, None] * w5[None, :]
        Y = generalized_lowrank(D4KD5, D4W, WD5, k)
        Ustar = top_k(Y, k).U
        WU = Wfull @ Ustar
        if WU.shape[1] < k:
            last = "rank collapse"
            continue
        m6 = int(math.ceil(consts.c6 * k / eps))
        D6 = qls(WU, m6, d6, ledger, child_seed(sd, "D6"))
        w6 = np.sqrt(D6.weights)
        D6K = oracle.block(D6.indices, np.arange(n)) * w6[:, None]
        N = pseudoinverse(WU[D6.indices] * w6[:, None]) @ D6K
        out = FactoredLowRank(WU, N.T, k)
        out.meta.update(t1=len(D1), t2=len(D2), d3=int(pick3.size), d4=len(D4), d5=len(D5), d6=len(D6),
                        attempt=attempt, distinct_evaluations=oracle.distinct)
        return out
    raise ContractViolation(f"kernel sketches degenerate on every attempt ({last or 'empty D3'})")
