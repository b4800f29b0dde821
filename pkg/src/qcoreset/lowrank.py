"""Column subset selection and sampling-only Frobenius low-rank approximation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .framework import SchemeConfig, WeightedSubset, intermediate_size, iterate_sample
from .linalg import as_matrix, pseudoinverse, thin_svd, top_k
from .rng import child_seed
from .sampler import QueryLedger


@dataclass
class FactoredLowRank:
    M: np.ndarray
    N: np.ndarray
    k: int
    meta: dict = field(default_factory=dict)

    def dense(self) -> np.ndarray:
        return self.M @ self.N.T

    def residual(self, A) -> float:
        """||A - M N^T||_F^2."""
        return float(np.linalg.norm(np.asarray(A) - self.dense()) ** 2)


class TrackedMatrix:
    """Read-only view of A that charges and records every entry it hands out."""

    def __init__(self, A, ledger: QueryLedger):
        self.A = as_matrix(A)
        self.ledger = ledger
        self.touched = np.zeros(self.A.shape, dtype=bool)
        self.reads = 0

    @property
    def shape(self):
        return self.A.shape

    def block(self, rows=None, cols=None) -> np.ndarray:
        r = slice(None) if rows is None else np.asarray(rows)
        c = slice(None) if cols is None else np.asarray(cols)
        out = self.A[r][:, c] if rows is not None else self.A[:, c]
        self.ledger.charge_reads(out.size)
        self.reads += out.size
        if rows is None:
            self.touched[:, c] = True
        elif cols is None:
            self.touched[r, :] = True
        else:
            self.touched[np.ix_(r, c)] = True
        return out

    def rows(self, idx) -> np.ndarray:
        return self.block(rows=idx)

    def cols(self, idx) -> np.ndarray:
        return self.block(cols=idx)


def qls(A, s: int, delta: float, ledger: QueryLedger, seed, cfg: SchemeConfig | None = None) -> WeightedSubset:
    """Leverage-score row sample of expected size at most ``s``.

    Rows are kept independently with probability p_i and weight 1/p_i, so
    E[(SA)^T (SA)] = A^T A.
    """
    A = as_matrix(A)
    cfg = cfg or SchemeConfig("l2", delta=min(max(delta, 1e-12), 0.999))
    d = max(1, thin_svd(A).rank)
    return iterate_sample(A, cfg, int(s), intermediate_size(cfg, d), ledger, seed, add_self=False)


def pcp_size(k: int, eps: float, delta: float, c: float = 4.0) -> int:
    return int(math.ceil(c * k * math.log(max(k, 2) / delta) / eps**2))


def column_pcp(A, k: int, eps: float, delta: float, ledger: QueryLedger, seed,
               size: int | None = None, c: float = 4.0) -> WeightedSubset:
    """Weighted column subset C with ||(I-P) C_w||_F^2 = (1 +- eps) ||(I-P) A||_F^2
    for rank-k projections P, via ridge leverage sampling of the columns."""
    A = as_matrix(A)
    n, d = A.shape
    if not 1 <= k <= min(n, d):
        raise ContractViolation(f"k={k} out of range for shape {A.shape}")
    cfg = SchemeConfig("ridge", k=k, eps=eps, delta=min(delta, 0.999))
    s = size if size is not None else pcp_size(k, eps, delta, c)
    return iterate_sample(A, cfg, s, intermediate_size(cfg, n), ledger, seed, add_self=False, axis="columns")


def generalized_lowrank(A, B, C, k: int) -> np.ndarray:
    """argmin_{rank(X) <= k} ||A - B X C||_F = B^+ [P_B A P_C]_k C^+."""
    A, B, C = as_matrix(A), as_matrix(B, "B"), as_matrix(C, "C")
    Ub = thin_svd(B).U
    Vc = thin_svd(C).V
    inner = Ub @ (Ub.T @ A @ Vc) @ Vc.T
    U, s, V = top_k(inner, k)
    return pseudoinverse(B) @ ((U * s) @ V.T) @ pseudoinverse(C)


def sampled_regression(SA, SB) -> np.ndarray:
    """argmin_Y ||SA Y - SB||_F."""
    return pseudoinverse(SA) @ as_matrix(SB, "SB")


@dataclass(frozen=True)
class LowRankConstants:
    """Multipliers of the three sample sizes in qlowrank.

    k1 = c1 k ln(k/delta) / eps^2 columns, k2 = c2 (k1 ln k1 + k1/eps) rows,
    k3 = c3 (k2 ln k2 + k2/eps) columns, each capped by the matrix size.
    """

    c1: float = 0.5
    c2: float = 0.25
    c3: float = 0.25
    delta: float = 0.001


def _sizes(k: int, eps: float, n: int, d: int, consts: LowRankConstants):
    k1 = min(d, max(k, int(math.ceil(consts.c1 * k * math.log(max(k, 2) / consts.delta) / eps**2))))
    k2 = min(n, max(k1, int(math.ceil(consts.c2 * (k1 * math.log(max(k1, 2)) + k1 / eps)))))
    k3 = min(d, max(k2, int(math.ceil(consts.c3 * (k2 * math.log(max(k2, 2)) + k2 / eps)))))
    return k1, k2, k3


def qlowrank(A, k: int, eps: float, ledger: QueryLedger, seed,
             consts: LowRankConstants = LowRankConstants()) -> FactoredLowRank:
    """Rank-k approximation A ~ M N^T touching only sampled rows and columns
    once the column subset has been chosen.

    C = column_pcp(A); S, T1 leverage samples of C's rows; T2 a leverage
    sample of the columns of SA; the small problem
    min ||T1 C X S A T2 - T1 A T2|| over rank-k X is solved in closed form.
    """
    A = as_matrix(A)
    n, d = A.shape
    if not 1 <= k <= min(n, d):
        raise ContractViolation(f"k={k} out of range for shape {A.shape}")
    k1, k2, k3 = _sizes(k, eps, n, d, consts)
    delta = consts.delta
    for attempt in range(2):
        sd = child_seed(seed, "qlowrank", attempt)
        J = column_pcp(A, k, eps, delta, ledger, child_seed(sd, "pcp"), size=k1)
        tracked = TrackedMatrix(A, ledger)
        C = tracked.cols(J.indices) * np.sqrt(J.weights)[None, :]
        S = qls(C, k2, delta, ledger, child_seed(sd, "S"))
        T1 = qls(C, k2, delta, ledger, child_seed(sd, "T1"))
        sw = np.sqrt(S.weights)
        SA = tracked.rows(S.indices) * sw[:, None]
        T2 = qls(SA.T, k3, delta, ledger, child_seed(sd, "T2"))
        t1w, t2w = np.sqrt(T1.weights), np.sqrt(T2.weights)
        T1C = C[T1.indices] * t1w[:, None]
        SAT2 = SA[:, T2.indices] * t2w[None, :]
        T1AT2 = tracked.block(T1.indices, T2.indices) * t1w[:, None] * t2w[None, :]
        if min(thin_svd(T1C).rank, thin_svd(SAT2).rank) < min(k, len(J)):
            continue
        Mhat = generalized_lowrank(T1AT2, T1C, SAT2, k)
        U, s, V = top_k(Mhat, k)
        out = FactoredLowRank(C @ (U * s), SA.T @ V, k)
        out.meta.update(
            k1=len(J), k2=(len(S), len(T1)), k3=len(T2), attempt=attempt,
            column_indices=J.indices, row_indices=np.union1d(S.indices, T1.indices),
            reads_after_selection=tracked.reads,
            distinct_reads=int(tracked.touched.sum()), touched=tracked.touched,
            sample=(J, S, T1, T2),
        )
        return out
    raise ContractViolation("sketches collapsed in rank twice")
