"""Iterative importance-sampling engine and the l2 / lp / (k,p)-subspace coresets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation
from .linalg import as_matrix, thin_svd
from .oracles import (
    DEFAULT_DIM_FACTOR,
    DEFAULT_JL_C,
    WeightOracleState,
    leverage_preprocess,
    lewis_preprocess,
    ridge_form,
    ridge_preprocess,
)
from .rng import child_seed
from .sampler import QueryLedger, halving_chain, qsample_with_probs

SCHEMES = ("l2", "lewis", "ridge", "kp_subspace")


@dataclass
class WeightedSubset:
    source_n: int
    indices: np.ndarray
    weights: np.ndarray
    axis: str = "rows"
    scheme: str = "l2"
    probs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.indices.shape != self.weights.shape:
            raise ContractViolation("indices and weights must have equal length")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.source_n:
                raise ContractViolation("coreset index out of range")
            if np.unique(self.indices).size != self.indices.size:
                raise ContractViolation("coreset indices must be distinct")
            if np.any(self.weights <= 0):
                raise ContractViolation("coreset weights must be positive")

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def size(self) -> int:
        return len(self)

    def take(self, A) -> np.ndarray:
        A = np.asarray(A)
        return A[self.indices] if self.axis == "rows" else A[:, self.indices]

    def scaled(self, A, power: float = 2.0) -> np.ndarray:
        """Selected rows (or columns) multiplied by weight**(1/power)."""
        s = self.weights ** (1.0 / power)
        X = self.take(A)
        return X * s[:, None] if self.axis == "rows" else X * s[None, :]

    @classmethod
    def everything(cls, n: int, axis: str = "rows", scheme: str = "l2") -> "WeightedSubset":
        return cls(n, np.arange(n), np.ones(n), axis, scheme, np.ones(n))


@dataclass(frozen=True)
class SchemeConfig:
    """Parameters of a weight scheme and its sample-size constants.

    ``expansion`` is the factor by which the summed overestimates of one
    level may exceed the total weight (4 in expectation); sampling rates are
    divided by it so that ``s`` bounds the expected sample size.
    """

    scheme: str = "l2"
    p: float = 2.0
    k: int | None = None
    eps: float = 0.5
    delta: float = 0.1
    c_final: float = 4.0
    c_intermediate: float = 1.0
    expansion: float = 4.0
    eps_mid: float = 0.01
    vc_dim: int | None = None
    jl_c: float = DEFAULT_JL_C
    dim_factor: float = DEFAULT_DIM_FACTOR
    alpha_const: float = 1.0
    literal_lambda: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractViolation(f"unknown scheme {self.scheme!r}")
        if not (0 < self.eps < 1 and 0 < self.delta < 1):
            raise ContractViolation("eps and delta must lie in (0, 1)")
        if self.p <= 0:
            raise ContractViolation("p must be positive")
        for name in ("c_final", "c_intermediate", "expansion", "jl_c", "dim_factor"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be at least 1")
        if self.scheme in ("ridge", "kp_subspace") and not self.k:
            raise ContractViolation(f"scheme {self.scheme} needs k")

    @property
    def row_power(self) -> float:
        """Exponent relating a stored weight to its row scaling."""
        return self.p if self.scheme == "lewis" else 2.0

    def weight_total(self, d: int) -> float:
        """Upper bound on ||w(A, A)||_1 for the scheme."""
        if self.scheme == "ridge":
            return 2.0 * self.k
        return float(d)

    def dimension(self, d: int) -> int:
        return self.vc_dim if self.vc_dim is not None else d + 1


def _preprocess(cfg: SchemeConfig, Cw: np.ndarray, n_total: int, seed) -> WeightOracleState:
    if cfg.scheme == "l2":
        return leverage_preprocess(Cw, n_total, cfg.jl_c, seed, cfg.dim_factor)
    if cfg.scheme == "lewis":
        return lewis_preprocess(Cw, cfg.p, n_total, cfg.jl_c, seed, cfg.dim_factor)
    return ridge_preprocess(Cw, cfg.k, n_total, cfg.jl_c, seed, cfg.dim_factor, cfg.literal_lambda)


def score_rows(state: WeightOracleState, rows: np.ndarray, add_self: np.ndarray | None = None) -> np.ndarray:
    """Scores of ``rows`` against the preprocessed coreset.

    Rows with a component outside the coreset's row span get an infinite
    quadratic form (ridge handles that component exactly unless its lambda
    vanishes).  Where
    ``add_self`` is set the rank-one update q / (1 + q) accounts for the row
    itself being added to the coreset.
    """
    q = state.quadratic(rows)
    if state.scheme != "ridge" or state.lam <= 0:
        norms = np.einsum("ij,ij->i", rows, rows)
        outside = state.span_residual(rows) > 1e-10 * np.maximum(norms, 1e-300)
        q = np.where(outside, np.inf, q)
    if add_self is not None and np.any(add_self):
        q = np.where(add_self, np.where(np.isinf(q), 1.0, q / (1.0 + q)), q)
    if state.exponent != 2:
        q = q ** (state.exponent / 2.0)
    return q


def iterate_sample(A, cfg: SchemeConfig, s: int, s_mid: int, ledger: QueryLedger, seed,
                   add_self: bool = True, axis: str = "rows", max_restarts: int = 3) -> WeightedSubset:
    """Halving-chain importance sampling with a target expected size ``s``.

    Level t scores the points of A_t against the weighted coreset C_{t-1}
    and keeps point i with probability min(1, c * score_i), storing weight
    1/p_i.  Intermediate levels aim at ``s_mid`` points, the last at ``s``.
    """
    A = as_matrix(A)
    X = A if axis == "rows" else A.T
    n, d = X.shape
    if n <= s:
        return WeightedSubset.everything(n, axis, cfg.scheme)
    s_mid = int(min(max(s_mid, 1), n))
    total = cfg.weight_total(d) * cfg.expansion
    power = cfg.row_power
    for attempt in range(max_restarts + 1):
        boost = 2.0**attempt
        chain = halving_chain(n, int(s), child_seed(seed, "chain", attempt))
        idx = chain.levels[0]
        w = np.ones(idx.size)
        ok = True
        for t in range(1, chain.T + 1):
            level = chain.levels[t]
            final = t == chain.T
            c = boost * (s if final else s_mid) / total
            if idx.size == 0:
                ok = False
                break
            Cw = X[idx] * (w ** (1.0 / power))[:, None]
            state = _preprocess(cfg, Cw, n, child_seed(seed, "prep", attempt, t))
            rows = X[level]
            ledger.charge_reads(rows.size)
            mask = None
            if add_self:
                mask = ~np.isin(level, chain.levels[t - 1], assume_unique=True)
            scores = score_rows(state, rows, mask)
            probs = np.minimum(1.0, c * scores)
            picked, pp = qsample_with_probs(level.size, probs, ledger,
                                            child_seed(seed, "level", attempt, t), tag=f"{cfg.scheme}:level{t}")
            idx, w = level[picked], 1.0 / pp
            if not final and idx.size == 0:
                ok = False
                break
        if ok:
            out = WeightedSubset(n, idx, w, axis, cfg.scheme, 1.0 / w)
            out.meta["levels"] = chain.T
            out.meta["restarts"] = attempt
            return out
    raise ContractViolation("intermediate coreset stayed empty after restarts")


def intermediate_size(cfg: SchemeConfig, d: int) -> int:
    """Constant-accuracy size c_intermediate * expansion * W * ln(W / delta)."""
    W = cfg.weight_total(d)
    return int(math.ceil(cfg.c_intermediate * cfg.expansion * W * math.log(max(W, 2.0) / cfg.delta)))


def l2_size(eps: float, delta: float, d: int, c_final: float = 4.0) -> int:
    return int(math.ceil(c_final * d * math.log(max(d, 2) / delta) / eps**2))


def l2_coreset(A, eps: float, delta: float, ledger: QueryLedger, seed, cfg: SchemeConfig | None = None) -> WeightedSubset:
    """Spectral coreset: (1-eps) A^T A <= B_w^T B_w <= (1+eps) A^T A w.h.p.

    Scores use w_i(A, C) without the add-self rule.
    """
    A = as_matrix(A)
    cfg = cfg or SchemeConfig("l2", eps=eps, delta=delta)
    d = max(1, thin_svd(A).rank)
    s = l2_size(eps, delta, d, cfg.c_final)
    return iterate_sample(A, cfg, s, intermediate_size(cfg, d), ledger, seed, add_self=False)


def lp_alpha(p: float, eps: float, delta: float, n: int, d: int, const: float = 1.0) -> float:
    """Oversampling rate of the one-shot Lewis sampling step, per p-regime."""
    ln = math.log
    ld = ln(max(d, 2))
    if p < 1:
        base = ld**3 + ln(1 / delta)
    elif p == 1:
        base = ln(n / delta)
    elif p < 2:
        base = ld**2 * ln(n) + ln(1 / delta)
    else:
        base = d ** (p / 2 - 1) * (ld**2 * ln(n) + ln(1 / delta))
    return const * base / eps**2


def lp_coreset(A, p: float, eps: float, delta: float, ledger: QueryLedger, seed,
               cfg: SchemeConfig | None = None) -> WeightedSubset:
    """lp subspace coreset: sum_b w_b |b^T x|^p = (1 +- eps) ||Ax||_p^p.

    Stage 1 builds a constant-factor Lewis approximator B by iterate_sample;
    stage 2 scores every row against B with a JL sketch of c p^2 log n rows
    and keeps row i with probability q_i = min(1, alpha u_i), weight 1/q_i.
    """
    A = as_matrix(A)
    n, d = A.shape
    cfg = cfg or SchemeConfig("lewis", p=p, eps=eps, delta=delta)
    cfg = replace(cfg, scheme="lewis", p=p)
    s1 = int(math.ceil(cfg.c_intermediate * cfg.expansion * d ** max(p / 2, 1.0) * math.log(max(d, 2) / delta)))
    s_mid = intermediate_size(cfg, d)
    B = iterate_sample(A, cfg, s1, s_mid, ledger, child_seed(seed, "stage1"), add_self=False)
    state = lewis_preprocess(B.scaled(A, p), p, n, cfg.jl_c, child_seed(seed, "stage2-prep"), cfg.dim_factor)
    ledger.charge_reads(A.size)
    u = score_rows(state, A)
    alpha = lp_alpha(p, eps, delta, n, d, cfg.alpha_const)
    q = np.minimum(1.0, alpha * u)
    picked, pq = qsample_with_probs(n, q, ledger, child_seed(seed, "stage2"), tag="lewis:final")
    out = WeightedSubset(n, picked, 1.0 / pq, "rows", f"lp({p:g})", pq)
    out.meta.update(alpha=alpha, stage1_size=len(B))
    return out


# Default constant inside alpha = KP_ALPHA * eps^2 / ln(n)^3 for (k,p)-subspace sampling.
KP_ALPHA = 400.0


def kp_probabilities(scores: np.ndarray, n: int, p: float, alpha: float) -> np.ndarray:
    """min(1, n^{p/2-1} tau^{p/2} / alpha) for p >= 2, min(1, tau^{p/2} / alpha) below."""
    scores = np.maximum(np.asarray(scores, dtype=float), 0.0)
    factor = n ** (p / 2 - 1) if p >= 2 else 1.0
    return np.minimum(1.0, factor * scores ** (p / 2) / alpha)


def kp_subspace_sample(A, k: int, p: float, eps: float, ledger: QueryLedger, seed,
                       alpha_const: float = KP_ALPHA) -> WeightedSubset:
    """Sample preserving sum_i ||a_i (I - P)||_2^p for every rank-k projection P.

    Ridge scores use rank parameter s = k/eps^p (p >= 2) or k/eps^2 (p < 2),
    computed exactly from the SVD of A.
    """
    A = as_matrix(A)
    n, d = A.shape
    if p < 1:
        raise ContractViolation("kp_subspace_sample needs p >= 1")
    if not 1 <= k <= d:
        raise ContractViolation(f"k={k} out of range")
    s = int(math.ceil(k / eps**p if p >= 2 else k / eps**2))
    U, sig, V = thin_svd(A)
    s = min(s, sig.size)
    lam = float(np.sum(sig[s:] ** 2) / s)
    ledger.charge_reads(A.size)
    tau = ridge_form(A, s, A, lam) if lam > 0 else np.einsum("ij,ij->i", U, U)
    alpha = alpha_const * eps**2 / math.log(max(n, 3)) ** 3
    probs = kp_probabilities(tau, n, p, alpha)
    picked, pp = qsample_with_probs(n, probs, ledger, child_seed(seed, "kp"), tag="kp_subspace")
    out = WeightedSubset(n, picked, 1.0 / pp, "rows", f"kp({k},{p:g})", pp)
    out.meta.update(alpha=alpha, ridge_rank=s)
    return out


# ---------------------------------------------------------------- cost helpers

def lp_cost(A, x, p: float, weights=None) -> float:
    r = np.abs(np.asarray(A) @ x) ** p
    return float(r.sum() if weights is None else weights @ r)


def subspace_cost(A, basis, p: float, weights=None) -> float:
    """sum_i w_i ||a_i (I - Q Q^T)||_2^p for an orthonormal d x k basis Q."""
    A = np.asarray(A)
    R = A - (A @ basis) @ basis.T
    r = np.einsum("ij,ij->i", R, R) ** (p / 2)
    return float(r.sum() if weights is None else weights @ r)
