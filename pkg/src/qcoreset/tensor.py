"""Third-order tensor low-rank approximation built from sampled fibers.

Flattening convention: ``flatten(A, m)`` is n_m x (product of the other two
dims) with the later remaining mode varying fastest.  A CP tensor
sum_r U_r (x) V_r (x) W_r therefore satisfies flatten(A, 1) = U kr(V, W)^T with
kr(V, W)[j * n3 + l, r] = V[j, r] W[l, r].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .framework import WeightedSubset
from .linalg import (as_matrix, as_tensor, cp_reconstruct, flatten, pseudoinverse, row_projector,
                     tensor_contract, thin_svd)
from .lowrank import column_pcp, generalized_lowrank, qls
from .oracles import exact_leverage
from .rng import child_seed, stream
from .sampler import QueryLedger

EXACT_LIMIT = 100_000


@dataclass
class CPFactors:
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.U, self.V, self.W = (as_matrix(X, name) for X, name in ((self.U, "U"), (self.V, "V"), (self.W, "W")))
        if not self.U.shape[1] == self.V.shape[1] == self.W.shape[1]:
            raise ContractViolation("CP factors need equal column counts")

    @property
    def r(self) -> int:
        return self.U.shape[1]

    def dense(self) -> np.ndarray:
        return cp_reconstruct(self.U, self.V, self.W)

    def residual(self, A) -> float:
        return float(np.sum((as_tensor(A) - self.dense()) ** 2))


@dataclass
class CURT:
    """Fibers of the source tensor: C mode-1 (columns), R mode-2 (rows), T mode-3
    (tubes), with index pairs into the other two modes, and an optional core."""

    C: np.ndarray
    R: np.ndarray
    T: np.ndarray
    col_index: np.ndarray
    row_index: np.ndarray
    tube_index: np.ndarray
    U: np.ndarray | None = None
    core_factors: tuple | None = None
    meta: dict = field(default_factory=dict)

    def core(self) -> np.ndarray:
        """Dense c x r x t core; built from ``core_factors`` when only those are kept."""
        if self.U is None and self.core_factors is not None:
            self.U = cp_reconstruct(*self.core_factors)
        return self.U

    def dense(self, core=None) -> np.ndarray:
        if core is None and self.core_factors is not None:
            P1, P2, P3 = self.core_factors
            return cp_reconstruct(self.C @ P1, self.R @ P2, self.T @ P3)
        core = self.U if core is None else core
        if core is None:
            raise ContractViolation("CURT has no core; use best_core first")
        return tensor_contract(core, self.C.T, self.R.T, self.T.T)

    def best_core(self, A) -> np.ndarray:
        """argmin_U ||A - U(C, R, T)||_F, by projecting A onto the fiber spans."""
        return tensor_contract(as_tensor(A), pseudoinverse(self.C).T, pseudoinverse(self.R).T,
                               pseudoinverse(self.T).T)

    def residual(self, A, core=None) -> float:
        return float(np.sum((as_tensor(A) - self.dense(core)) ** 2))

    def best_fit(self, A) -> np.ndarray:
        """best_core(A)(C, R, T), computed as A projected onto the three fiber
        spans without forming the core."""
        Q = [row_projector(X) for X in (self.C, self.R, self.T)]
        return tensor_contract(as_tensor(A), *(q @ q.T for q in Q))

    def best_residual(self, A) -> float:
        return float(np.sum((as_tensor(A) - self.best_fit(A)) ** 2))


@dataclass(frozen=True)
class TensorConstants:
    """Multipliers of the sample sizes: ``pcp`` for the k/eps^2 fiber samples,
    ``lev`` for the m log m + m/eps Khatri-Rao leverage draws and ``reduce``
    for the reduction samples.  ``max_draws`` caps one leverage draw at that
    many multiples of the index space.  Fiber samples of rank below k are
    redrawn up to ``retries`` times."""

    pcp: float = 2.0
    lev: float = 1.0
    reduce: float = 1.0
    max_draws: int = 50
    als_restarts: int = 20
    retries: int = 3
    delta: float = 0.001


def kr_columns(U, V) -> np.ndarray:
    """Column-wise Khatri-Rao product (n1 n2) x k of n1 x k and n2 x k."""
    return (U[:, None, :] * V[None, :, :]).reshape(-1, U.shape[1])


def _lev_draws(m: int, eps: float, c: float) -> int:
    return max(m, int(math.ceil(c * (m * math.log(max(m, 2)) + m / eps))))


def _pcp_size(k: int, eps: float, c: float) -> int:
    return max(k, int(math.ceil(c * k / eps**2)))


# ---------------------------------------------------------------- leverage

def khatri_rao_leverage(U, V) -> np.ndarray:
    """Exact leverage scores of the n1*n2 columns of U (.) V (U: k x n1, V: k x n2)."""
    U, V = as_matrix(U, "U"), as_matrix(V, "V")
    if U.shape[0] != V.shape[0]:
        raise ContractViolation("U and V need equal row counts")
    X = kr_columns(U.T, V.T)
    G = (U @ U.T) * (V @ V.T)
    return np.einsum("ij,ij->i", X @ pseudoinverse(G), X)


def tensor_leverage_sample(U, V, r_sample: int, eps: float, ledger: QueryLedger, seed,
                           exact_limit: int = EXACT_LIMIT) -> WeightedSubset:
    """r_sample i.i.d. draws of columns of U (.) V from the leverage distribution.

    Small index spaces are materialized; larger ones draw i and j from the
    single-factor leverage scores and accept with tau_ij / (tau_i tau_j), which
    is at most one.  Repeated draws are merged, so the stored weight of an
    index drawn c times is c / (r_sample p).
    """
    U, V = as_matrix(U, "U"), as_matrix(V, "V")
    if U.shape[0] != V.shape[0]:
        raise ContractViolation("U and V need equal row counts")
    r_sample = int(r_sample)
    if r_sample < 1:
        raise ContractViolation("r_sample must be positive")
    n1, n2 = U.shape[1], V.shape[1]
    N = n1 * n2
    G = (U @ U.T) * (V @ V.T)
    Gp = pseudoinverse(G)
    total = float(thin_svd(G).rank)
    if total == 0:
        raise ContractViolation("Khatri-Rao product is zero")
    rng = stream(seed, "tensor_leverage")

    def tau(i, j):
        X = U[:, i].T * V[:, j].T
        return np.einsum("ij,ij->i", X @ Gp, X)

    if N <= exact_limit:
        scores = khatri_rao_leverage(U, V)
        p_all = np.maximum(scores, 0.0) / scores.sum()
        draws = rng.choice(N, size=r_sample, p=p_all)
        ledger.oracle_calls += N
        method = "exact"
    else:
        tu, tv = exact_leverage(U.T), exact_leverage(V.T)
        pu, pv = tu / tu.sum(), tv / tv.sum()
        got = []
        need = r_sample
        proposals = 0
        while need > 0:
            batch = max(2 * need, 64)
            i = rng.choice(n1, size=batch, p=pu)
            j = rng.choice(n2, size=batch, p=pv)
            ratio = tau(i, j) / np.maximum(tu[i] * tv[j], 1e-300)
            keep = rng.random(batch) < np.minimum(ratio, 1.0)
            proposals += batch
            acc = (i * n2 + j)[keep][:need]
            got.append(acc)
            need -= acc.size
        draws = np.concatenate(got)
        ledger.oracle_calls += proposals
        method = "rejection"
    idx, counts = np.unique(draws, return_counts=True)
    p = np.maximum(tau(idx // n2, idx % n2), 0.0) / total
    out = WeightedSubset(N, idx, counts / (r_sample * p), "columns", "tensor_leverage", p)
    out.meta.update(draws=r_sample, dims=(n1, n2), method=method, eps=eps)
    return out


def pair_leverage_sample(X1, X2, r_sample: int, ledger: QueryLedger, seed) -> WeightedSubset:
    """Leverage draws over the columns of P1^T (.) P2^T where (P1, P2) pair every
    column of X1 (n1 x a) with every column of X2 (n2 x b).

    For such pairs the Khatri-Rao Gram matrix is the Kronecker product of the
    two row Gram matrices, so tau_(i,j) = tau_i(X1) tau_j(X2) exactly and the
    indices can be drawn independently.
    """
    X1, X2 = as_matrix(X1, "X1"), as_matrix(X2, "X2")
    r_sample = int(r_sample)
    if r_sample < 1:
        raise ContractViolation("r_sample must be positive")
    t1, t2 = exact_leverage(X1), exact_leverage(X2)
    if t1.sum() <= 0 or t2.sum() <= 0:
        raise ContractViolation("Khatri-Rao product is zero")
    p1, p2 = t1 / t1.sum(), t2 / t2.sum()
    rng = stream(seed, "pair_leverage")
    i = rng.choice(X1.shape[0], size=r_sample, p=p1)
    j = rng.choice(X2.shape[0], size=r_sample, p=p2)
    n2 = X2.shape[0]
    ledger.oracle_calls += X1.shape[0] + n2
    idx, counts = np.unique(i * n2 + j, return_counts=True)
    p = p1[idx // n2] * p2[idx % n2]
    out = WeightedSubset(X1.shape[0] * n2, idx, counts / (r_sample * p), "columns", "tensor_leverage", p)
    out.meta.update(draws=r_sample, dims=(X1.shape[0], n2), method="product")
    return out


def _sampling_scale(D: WeightedSubset) -> np.ndarray:
    return np.sqrt(D.weights)


# ---------------------------------------------------------------- response sampling

def response_span_projector(B_sample, k: int) -> np.ndarray:
    """Top-k left singular vectors of the sampled response columns."""
    U = thin_svd(as_matrix(B_sample, "B_sample")).U
    return U[:, :k]


def response_regression(A, B, k: int, eps: float, ledger: QueryLedger, seed, method: str = "span",
                        delta: float = 0.01):
    """Rank-k solution X of min ||X A - B||_F from a ridge leverage column
    sample of B with k/eps^2 expected columns.

    ``span`` returns X = Q Q^T B A^+ with Q = response_span_projector(B S^T, k);
    ``sampled`` solves the subsampled problem min ||X A S^T - B S^T||_F.
    Returns (X, sample).
    """
    A, B = as_matrix(A, "A"), as_matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ContractViolation("A and B need equal column counts")
    k = min(k, *B.shape)
    r = int(math.ceil(k / eps**2))
    S = column_pcp(B, k, eps, delta, ledger, seed, size=r)
    BS = S.scaled(B)
    if method == "span":
        Q = response_span_projector(BS, k)
        X = Q @ (Q.T @ B) @ pseudoinverse(A)
    elif method == "sampled":
        AS = S.scaled(A)
        X = generalized_lowrank(BS, np.eye(B.shape[0]), AS, k)
    else:
        raise ContractViolation(f"unknown method {method!r}")
    return X, S


def response_opt(A, B, k: int) -> float:
    """min over rank-k X of ||X A - B||_F^2, in closed form."""
    A, B = as_matrix(A, "A"), as_matrix(B, "B")
    X = generalized_lowrank(B, np.eye(B.shape[0]), A, k)
    return float(np.linalg.norm(X @ A - B) ** 2)


# ---------------------------------------------------------------- bicriteria

def _fiber_sample(A, mode: int, k: int, eps: float, ledger: QueryLedger, seed, consts: TensorConstants):
    """Ridge leverage sample of mode-m fibers, redrawn while its rank is below k."""
    Am = flatten(A, mode)
    kk = min(k, min(Am.shape))
    for attempt in range(consts.retries + 1):
        J = column_pcp(Am, kk, eps, consts.delta, ledger, child_seed(seed, attempt),
                       size=_pcp_size(k, eps, consts.pcp))
        C = J.scaled(Am)
        if len(J) and thin_svd(C).rank >= kk:
            break
    if not len(J):
        raise ContractViolation(f"mode-{mode} fiber sample stayed empty")
    J.meta["attempt"] = attempt
    return C, J


def _pair_columns(X1, X2):
    """Every pair (a, b) of columns: (repeat X1, tile X2)."""
    return np.repeat(X1, X2.shape[1], axis=1), np.tile(X2, (1, X1.shape[1]))


def _mode_columns(A, mode: int, D: WeightedSubset, ledger: QueryLedger, weighted: bool = True) -> np.ndarray:
    M = flatten(A, mode)[:, D.indices]
    ledger.charge_reads(M.size)
    return M * _sampling_scale(D)[None, :] if weighted else M


def _capped(draws: int, N: int, consts: TensorConstants) -> int:
    return int(min(draws, consts.max_draws * N))


def bicriteria(A, k: int, eps: float, ledger: QueryLedger, seed,
               consts: TensorConstants = TensorConstants()) -> CPFactors:
    """Rank s1*s2 CP approximation with cost at most (4 + O(eps)) OPT_k."""
    A = as_tensor(A)
    n1, n2, n3 = A.shape
    if not 1 <= k <= min(A.shape):
        raise ContractViolation(f"k={k} out of range for shape {A.shape}")
    C1, J1 = _fiber_sample(A, 1, k, eps, ledger, child_seed(seed, "C1"), consts)
    C2, J2 = _fiber_sample(A, 2, k, eps, ledger, child_seed(seed, "C2"), consts)
    Uh, Vh = _pair_columns(C1, C2)
    m = Uh.shape[1]
    s3 = _capped(_lev_draws(m, eps, consts.lev), n1 * n2, consts)
    D3 = pair_leverage_sample(C1, C2, s3, ledger, child_seed(seed, "D3"))
    scale = _sampling_scale(D3)
    B = kr_columns(Uh, Vh)[D3.indices].T * scale[None, :]
    Wh = _mode_columns(A, 3, D3, ledger) @ pseudoinverse(B)
    return CPFactors(Uh, Vh, Wh, {"s1": C1.shape[1], "s2": C2.shape[1], "s3": s3, "d3": len(D3),
                                  "rank": m, "fibers": (J1, J2, D3)})


# ---------------------------------------------------------------- CRT selection

def crt_select(A, k: int, eps: float, ledger: QueryLedger, seed,
               consts: TensorConstants = TensorConstants()) -> CURT:
    """Column, row and tube subsets admitting a (4 + O(eps))-approximate core.

    The final draw over mode-1 fibers is called D1 here; it is independent of
    the earlier tube sample D3.
    """
    A = as_tensor(A)
    n1, n2, n3 = A.shape
    if not 1 <= k <= min(A.shape):
        raise ContractViolation(f"k={k} out of range for shape {A.shape}")
    C1, _ = _fiber_sample(A, 1, k, eps, ledger, child_seed(seed, "C1"), consts)
    C2, _ = _fiber_sample(A, 2, k, eps, ledger, child_seed(seed, "C2"), consts)
    d3 = _capped(_lev_draws(C1.shape[1] * C2.shape[1], eps, consts.lev), n1 * n2, consts)
    D3 = pair_leverage_sample(C1, C2, d3, ledger, child_seed(seed, "D3"))
    M3 = _mode_columns(A, 3, D3, ledger)
    d2 = _capped(_lev_draws(C1.shape[1] * M3.shape[1], eps, consts.lev), n1 * n3, consts)
    D2 = pair_leverage_sample(C1, M3, d2, ledger, child_seed(seed, "D2"))
    M2 = _mode_columns(A, 2, D2, ledger)
    d1 = _capped(_lev_draws(M2.shape[1] * M3.shape[1], eps, consts.lev), n2 * n3, consts)
    D1 = pair_leverage_sample(M2, M3, d1, ledger, child_seed(seed, "D1"))
    C = _mode_columns(A, 1, D1, ledger, weighted=False)
    R = _mode_columns(A, 2, D2, ledger, weighted=False)
    T = _mode_columns(A, 3, D3, ledger, weighted=False)
    return CURT(C, R, T, D1.indices, D2.indices, D3.indices,
                meta={"draws": (d1, d2, d3), "sizes": (len(D1), len(D2), len(D3))})


# ---------------------------------------------------------------- low rank -> CURT

def lowrank_to_curt(A, factors: CPFactors, eps: float, ledger: QueryLedger, seed,
                    consts: TensorConstants = TensorConstants()) -> CURT:
    """CURT decomposition with a rank-r core from rank-r CP factors.

    Each factor is refit by a leverage-sampled regression against fibers of A;
    the core is sum_i P1_i (x) P2_i (x) P3_i with P_m = (B_m D_m)^+ scaled by the
    sampling weights so that C, R, T stay verbatim fibers.  The core is kept
    in this factored form; ``CURT.core()`` materializes it.
    """
    A = as_tensor(A)
    n1, n2, n3 = A.shape
    r = factors.r
    d = _lev_draws(r, eps, consts.lev)

    def refit(mode, X, Y, N, tag):
        """Leverage sample over kr(X, Y) and the regression through it."""
        B = kr_columns(X, Y)
        for attempt in range(2):
            D = tensor_leverage_sample(X.T, Y.T, _capped(d, N, consts), 1e-2, ledger, child_seed(seed, tag, attempt))
            sc = _sampling_scale(D)
            BD = B[D.indices].T * sc[None, :]
            if thin_svd(BD).rank >= thin_svd(B).rank:
                break
        P = pseudoinverse(BD)
        fibers = _mode_columns(A, mode, D, ledger, weighted=False)
        core = P * sc[:, None]
        return D, fibers, core, fibers @ core

    D1, C, P1, Uh = refit(1, factors.V, factors.W, n2 * n3, "D1")
    D2, R, P2, Vh = refit(2, Uh, factors.W, n1 * n3, "D2")
    D3, T, P3, Wh = refit(3, Uh, Vh, n1 * n2, "D3")
    return CURT(C, R, T, D1.indices, D2.indices, D3.indices, core_factors=(P1, P2, P3),
                meta={"rank": r, "sizes": (len(D1), len(D2), len(D3)), "factors": CPFactors(Uh, Vh, Wh)})


# ---------------------------------------------------------------- ALS

@dataclass
class ALSResult:
    X: tuple
    residual: float
    converged: bool
    restarts: int


def _als_run(C, Ys, Ypinv, X, max_iter, tol):
    Fs = [Y @ Xm for Y, Xm in zip(Ys, X)]
    norm2 = float(np.sum(C**2))
    prev = np.inf
    specs = ("ijl,jr,lr->ir", "ijl,ir,lr->jr", "ijl,ir,jr->lr")
    for it in range(max_iter):
        for m in range(3):
            a, b = [Fs[o] for o in range(3) if o != m]
            gram = (a.T @ a) * (b.T @ b)
            rhs = np.einsum(specs[m], C, a, b, optimize=True)
            X[m] = Ypinv[m] @ rhs @ pseudoinverse(gram)
            Fs[m] = Ys[m] @ X[m]
        res = float(np.sum((C - cp_reconstruct(*Fs)) ** 2))
        if prev - res <= tol * max(norm2, 1e-300):
            return X, res, True
        prev = res
    return X, res, False


def als_cp(C, k: int, seed, bases=None, restarts: int = 20, max_iter: int = 500, tol: float = 1e-12) -> ALSResult:
    """min over X_m of ||sum_i (Y1 X1)_i (x) (Y2 X2)_i (x) (Y3 X3)_i - C||_F^2 by ALS.

    ``bases`` are the Y_m (identity when omitted).  The first start uses the
    top-k singular vectors of each flattening, the rest are Gaussian.
    """
    C = as_tensor(C)
    Ys = [np.eye(C.shape[m]) if bases is None or bases[m] is None else as_matrix(bases[m]) for m in range(3)]
    for m in range(3):
        if Ys[m].shape[0] != C.shape[m]:
            raise ContractViolation(f"basis {m + 1} has {Ys[m].shape[0]} rows, expected {C.shape[m]}")
    Ypinv = [pseudoinverse(Y) for Y in Ys]
    rng = stream(seed, "als")
    best = None
    for t in range(max(1, restarts)):
        if t == 0:
            X = []
            for m in range(3):
                U = thin_svd(flatten(C, m + 1)).U[:, :k]
                U = np.pad(U, ((0, 0), (0, k - U.shape[1])))
                X.append(Ypinv[m] @ U)
        else:
            X = [rng.standard_normal((Y.shape[1], k)) for Y in Ys]
        X, res, conv = _als_run(C, Ys, Ypinv, X, max_iter, tol)
        if best is None or res < best.residual:
            best = ALSResult(tuple(X), res, conv, t)
    return best


# ---------------------------------------------------------------- reduction + FPT

def sublinear_reduction(A, V1, V2, V3, k: int, eps: float, ledger: QueryLedger, seed,
                        consts: TensorConstants = TensorConstants(), force_identity: bool = False):
    """Leverage-sample the rows of V1, V2, V3 and restrict A to the samples.

    Returns (Y1, Y2, Y3, C) with Y_m = T_m V_m and C = A(T1, T2, T3), all
    scaled by the square roots of the sampling weights.
    """
    A = as_tensor(A)
    Vs = [as_matrix(V, f"V{m + 1}") for m, V in enumerate((V1, V2, V3))]
    for m, V in enumerate(Vs):
        if V.shape[0] != A.shape[m]:
            raise ContractViolation(f"V{m + 1} has {V.shape[0]} rows, expected {A.shape[m]}")
    samples = []
    for m, V in enumerate(Vs):
        if force_identity:
            samples.append(WeightedSubset.everything(V.shape[0]))
            continue
        b = max(1, thin_svd(V).rank)
        c = _lev_draws(b, eps, consts.reduce)
        # a sample that loses rank cannot represent the factor; redraw, then keep the whole mode
        S = WeightedSubset.everything(V.shape[0])
        for attempt in range(consts.retries + 1):
            T = qls(V, c, consts.delta, ledger, child_seed(seed, "T", m, attempt))
            if len(T) and thin_svd(T.scaled(V)).rank >= b:
                S = T
                break
        samples.append(S)
    Ys = [S.scaled(V) for S, V in zip(samples, Vs)]
    sc = [np.sqrt(S.weights) for S in samples]
    sub = A[np.ix_(samples[0].indices, samples[1].indices, samples[2].indices)]
    ledger.charge_reads(sub.size)
    C = sub * sc[0][:, None, None] * sc[1][None, :, None] * sc[2][None, None, :]
    return Ys[0], Ys[1], Ys[2], C, samples


def fpt_lowrank(A, k: int, eps: float, ledger: QueryLedger, seed,
                consts: TensorConstants = TensorConstants()) -> CPFactors:
    """Rank-k CP approximation: fiber samples, input reduction, then ALS with
    restarts on the reduced problem in place of an exact polynomial solver."""
    A = as_tensor(A)
    n1, n2, n3 = A.shape
    if not 1 <= k <= min(A.shape):
        raise ContractViolation(f"k={k} out of range for shape {A.shape}")
    C1, _ = _fiber_sample(A, 1, k, eps, ledger, child_seed(seed, "C1"), consts)
    C2, _ = _fiber_sample(A, 2, k, eps, ledger, child_seed(seed, "C2"), consts)
    d3 = _capped(_lev_draws(C1.shape[1] * C2.shape[1], eps, consts.lev), n1 * n2, consts)
    D3 = pair_leverage_sample(C1, C2, d3, ledger, child_seed(seed, "D3"))
    M3 = _mode_columns(A, 3, D3, ledger)
    Y1, Y2, Y3, C, samples = sublinear_reduction(A, C1, C2, M3, k, eps, ledger, child_seed(seed, "reduce"), consts)
    sol = als_cp(C, k, child_seed(seed, "als"), (Y1, Y2, Y3), consts.als_restarts)
    X1, X2, X3 = sol.X
    return CPFactors(C1 @ X1, C2 @ X2, M3 @ X3,
                     {"certified": False, "als_converged": sol.converged, "reduced_residual": sol.residual,
                      "reduced_shape": C.shape, "s1": C1.shape[1], "s2": C2.shape[1], "d3": len(D3)})
