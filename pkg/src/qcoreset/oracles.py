"""Weight oracles: leverage scores, Lewis weights and ridge leverage scores.

Each ``*_preprocess`` builds a small sketch ``M`` from the current coreset so
that a score query for any row costs O(m d).  Exact dense counterparts are
provided as reference implementations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NonConvergenceError
from .linalg import as_matrix, thin_svd
from .rng import stream

DEFAULT_JL_C = 24
# Rows of the JL sketch per dimension of the sketched subspace.  A Gaussian
# sketch with m rows distorts an r-dimensional subspace by about 1 +- 2 sqrt(r/m);
# 48 rows per dimension keeps the worst query inside a factor of 2.
DEFAULT_DIM_FACTOR = 48


def _log_rows(n_total: int) -> int:
    return max(1, math.ceil(math.log2(max(n_total, 2))))


def sketch_rows(n_total: int, c: float, rank: int, dim_factor: float = DEFAULT_DIM_FACTOR,
                p: float = 2.0) -> int:
    base = c * max(1.0, p * p) * _log_rows(n_total)
    return int(max(math.ceil(base), math.ceil(dim_factor * rank), 1))


def _sketch(m: int, r: int, seed, tag: str):
    G = stream(seed, "jl", tag).standard_normal((m, r)) / np.sqrt(m)
    if r == 0:
        return G, 1.0, 1.0
    s = np.linalg.svd(G, compute_uv=False)
    return G, float(s[-1]), float(s[0])


@dataclass
class LewisState:
    weights: np.ndarray
    p: float
    residual: float
    iterations: int = 0


@dataclass
class WeightOracleState:
    """Preprocessed sketch for score queries.

    query(a) = (scale * ||M a||^2 + extra(a)) ** (exponent / 2), where
    ``extra`` is the exact orthogonal-complement term used by the ridge
    scheme.  ``scale = 1 / sigma_min(G)^2`` makes every query an overestimate
    of the sketched quadratic form.
    """

    M: np.ndarray
    scheme: str
    exponent: float
    scale: float
    eps0: float
    basis: np.ndarray | None = None  # V, orthonormal basis of the coreset's row span
    lam: float = 0.0
    k: int | None = None
    lewis: LewisState | None = None
    meta: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.M.shape[0]

    def quadratic(self, a) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        q = self.scale * np.einsum("ij,ij->i", a @ self.M.T, a @ self.M.T)
        if self.scheme == "ridge" and self.lam > 0:
            proj = a @ self.basis
            perp = np.einsum("ij,ij->i", a, a) - np.einsum("ij,ij->i", proj, proj)
            q = q + np.maximum(perp, 0.0) / self.lam
        return q

    def query(self, a) -> np.ndarray:
        q = self.quadratic(a)
        if self.exponent == 2:
            return q
        return q ** (self.exponent / 2.0)

    def span_residual(self, a) -> np.ndarray:
        """Squared norm of the part of each row outside the coreset's row span."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        proj = a @ self.basis
        return np.maximum(np.einsum("ij,ij->i", a, a) - np.einsum("ij,ij->i", proj, proj), 0.0)


# ---------------------------------------------------------------- exact forms

def exact_leverage(A) -> np.ndarray:
    U = thin_svd(as_matrix(A)).U
    return np.einsum("ij,ij->i", U, U)


def leverage_form(C, Q) -> np.ndarray:
    """q^T (C^T C)^+ q for each row q of Q."""
    _, s, V = thin_svd(as_matrix(C))
    Z = (np.atleast_2d(Q) @ V) / s
    return np.einsum("ij,ij->i", Z, Z)


def ridge_lambda(sigma: np.ndarray, k: int) -> float:
    return float(np.sum(sigma[k:] ** 2) / k)


def ridge_form(C, k: int, Q, lam: float | None = None) -> np.ndarray:
    """q^T (C^T C + lam I)^{-1} q with lam = ||C - C_k||_F^2 / k by default.

    Falls back to the pseudoinverse form when lam is zero.
    """
    C = as_matrix(C)
    _, s, V = thin_svd(C)
    if lam is None:
        lam = ridge_lambda(s, k)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    P = Q @ V
    if lam <= 0:
        Z = P / s
        return np.einsum("ij,ij->i", Z, Z)
    inside = np.einsum("ij,ij->i", P * (1.0 / (s**2 + lam)), P)
    perp = np.maximum(np.einsum("ij,ij->i", Q, Q) - np.einsum("ij,ij->i", P, P), 0.0)
    return inside + perp / lam


def exact_ridge_leverage(A, k: int) -> np.ndarray:
    A = as_matrix(A)
    if not 1 <= k <= min(A.shape):
        raise ContractViolation(f"k={k} out of range for shape {A.shape}")
    return ridge_form(A, k, A)


def exact_l2_sensitivity_prime(A, subset) -> np.ndarray:
    """w'_i(A, A_S): leverage of a_i against A_S, or against A_S plus a_i itself
    when i is not in S."""
    A = as_matrix(A)
    subset = np.asarray(sorted(set(int(i) for i in subset)), dtype=int)
    inside = np.zeros(A.shape[0], dtype=bool)
    inside[subset] = True
    B = A[subset]
    G = B.T @ B
    out = np.empty(A.shape[0])
    for i, a in enumerate(A):
        Gi = G if inside[i] else G + np.outer(a, a)
        out[i] = float(a @ np.linalg.pinv(Gi, rcond=1e-10, hermitian=True) @ a)
    return out


# ---------------------------------------------------------------- Lewis weights

def lewis_weights(A, p: float, tol: float = 1e-8, max_iter: int = 200) -> LewisState:
    """Fixed-point iteration w_i <- (a_i^T (A^T W^{1-2/p} A)^{-1} a_i)^{p/2}.

    Undamped for p < 4; for p >= 4 the update is damped with exponent 2/p.
    """
    A = as_matrix(A)
    if p <= 0:
        raise ContractViolation("p must be positive")
    n, d = A.shape
    U = thin_svd(A).U
    if U.shape[1] < d:
        raise ContractViolation(f"Lewis weights need full column rank, got rank {U.shape[1]} < {d}")
    if p == 2:
        w = np.einsum("ij,ij->i", U, U)
        return LewisState(w, p, 0.0, 0)

    def forms(w):
        ww = np.maximum(w, 1e-12 * w.max())
        s = ww ** (0.5 - 1.0 / p)
        Qb = np.linalg.qr(A * s[:, None])[0]
        lev = np.einsum("ij,ij->i", Qb, Qb)
        return lev / s**2

    w = np.full(n, d / n)
    theta = 1.0 if p < 4 else 2.0 / p
    residual = np.inf
    for it in range(1, max_iter + 1):
        q = forms(w)
        w2p = w ** (2.0 / p)
        residual = float(np.max(np.abs(w2p - q) / np.maximum(w2p, 1e-300)))
        if residual <= tol:
            return LewisState(w, p, residual, it - 1)
        target = q ** (p / 2.0)
        w = target if theta == 1.0 else w ** (1 - theta) * target**theta
    q = forms(w)
    w2p = w ** (2.0 / p)
    residual = float(np.max(np.abs(w2p - q) / np.maximum(w2p, 1e-300)))
    if residual <= tol:
        return LewisState(w, p, residual, max_iter)
    raise NonConvergenceError(f"Lewis iteration did not converge (residual {residual:.3e})", residual)


def lewis_form(C, p: float, Q, state: LewisState | None = None) -> np.ndarray:
    """(q^T (C^T W_C^{1-2/p} C)^{-1} q)^{p/2} for each row q of Q."""
    C = as_matrix(C)
    if state is None:
        state = lewis_weights(C, p)
    B = C * (state.weights ** (0.5 - 1.0 / p))[:, None]
    return leverage_form(B, Q) ** (p / 2.0)


# ---------------------------------------------------------------- sketches

def leverage_preprocess(C, n_total: int, c: float = DEFAULT_JL_C, seed=0,
                        dim_factor: float = DEFAULT_DIM_FACTOR) -> WeightOracleState:
    """Sketch M = G Sigma^+ V^T so that ||M a||^2 estimates a^T (C^T C)^+ a."""
    C = as_matrix(C)
    _, s, V = thin_svd(C)
    m = sketch_rows(n_total, c, s.size, dim_factor)
    G, smin, smax = _sketch(m, s.size, seed, "leverage")
    M = (G / s) @ V.T
    scale = 1.0 / smin**2 if s.size else 1.0
    return WeightOracleState(M, "l2", 2.0, scale, 1.0 - smin**2, basis=V)


def lewis_preprocess(C, p: float, n_total: int, c: float = DEFAULT_JL_C, seed=0,
                     dim_factor: float = DEFAULT_DIM_FACTOR, tol: float = 1e-8,
                     max_iter: int = 200) -> WeightOracleState:
    """Sketch of the Lewis quadratic form of C; query returns ||M a||^p."""
    C = as_matrix(C)
    state = lewis_weights(C, p, tol, max_iter)
    B = C * (state.weights ** (0.5 - 1.0 / p))[:, None]
    _, s, V = thin_svd(B)
    m = sketch_rows(n_total, c, s.size, dim_factor, p=p)
    G, smin, _ = _sketch(m, s.size, seed, "lewis")
    M = (G / s) @ V.T
    scale = 1.0 / smin**2 if s.size else 1.0
    return WeightOracleState(M, f"lp({p:g})", float(p), scale, 1.0 - smin**2, basis=V, lewis=state)


def ridge_preprocess(C, k: int, n_total: int, c: float = DEFAULT_JL_C, seed=0,
                     dim_factor: float = DEFAULT_DIM_FACTOR,
                     literal_lambda: bool = False) -> WeightOracleState:
    """Sketch of a^T (C^T C + lam I)^{-1} a with lam = ||C - C_k||_F^2 / k.

    The component of ``a`` orthogonal to the row span of C is handled exactly
    by the term lam^{-1} (||a||^2 - ||V^T a||^2).  ``literal_lambda`` switches to
    lam = sum_{i>k} sigma_i (unsquared, not divided by k).
    """
    C = as_matrix(C)
    _, s, V = thin_svd(C)
    lam = float(np.sum(s[k:])) if literal_lambda else ridge_lambda(s, k)
    m = sketch_rows(n_total, c, s.size, dim_factor)
    G, smin, _ = _sketch(m, s.size, seed, "ridge")
    if lam > 0:
        M = (G / np.sqrt(s**2 + lam)) @ V.T
    else:
        M = (G / s) @ V.T
    scale = 1.0 / smin**2 if s.size else 1.0
    state = WeightOracleState(M, "ridge", 2.0, scale, 1.0 - smin**2, basis=V, lam=lam, k=k)
    state.meta["literal_lambda"] = literal_lambda
    return state
