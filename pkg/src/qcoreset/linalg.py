"""Dense linear algebra kernels and third-order tensor reshaping.

Matrices are plain 2-D float64 numpy arrays and third-order tensors are
3-D float64 arrays indexed ``T[i, j, l]``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractViolation

RANK_TOL = 1e-10


class ThinSVD(NamedTuple):
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.U.shape[1]


def as_matrix(A, name: str = "A") -> np.ndarray:
    """Validate and convert to a finite 2-D float array."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return A


def as_tensor(T, name: str = "T") -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.ndim != 3:
        raise ContractViolation(f"{name} must be 3-D, got shape {T.shape}")
    if not np.all(np.isfinite(T)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return T


def _fix_signs(U: np.ndarray, Vt: np.ndarray) -> None:
    # first nonzero entry of each U column made nonnegative, in place
    if U.size == 0:
        return
    nz = np.abs(U) > 0
    first = np.argmax(nz, axis=0)
    signs = np.sign(U[first, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U *= signs
    Vt *= signs[:, None]


def _gram_svd(A: np.ndarray):
    """SVD from the eigendecomposition of the smaller Gram matrix; only used
    when the divide-and-conquer driver fails to converge."""
    if A.shape[0] < A.shape[1]:
        V, s, Ut = _gram_svd(A.T)
        return Ut.T, s, V.T
    ev, V = np.linalg.eigh(A.T @ A)
    order = np.argsort(ev)[::-1]
    s = np.sqrt(np.clip(ev[order], 0.0, None))
    V = V[:, order]
    U = A @ V / np.where(s > 0, s, 1.0)
    return U, s, V.T


def thin_svd(A, tol: float = RANK_TOL, full: bool = False) -> ThinSVD:
    """Thin SVD truncated to numerical rank (sigma_i > tol * sigma_1).

    With ``full=True`` all min(n, d) triplets are kept.  Ties in sigma keep
    LAPACK's order, which is stable with respect to the input index.
    """
    A = as_matrix(A)
    n, d = A.shape
    if n == 0 or d == 0:
        return ThinSVD(np.zeros((n, 0)), np.zeros(0), np.zeros((d, 0)))
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        U, s, Vt = _gram_svd(A)
    if not full:
        r = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
        U, s, Vt = U[:, :r], s[:r], Vt[:r]
    U = np.ascontiguousarray(U)
    Vt = np.ascontiguousarray(Vt)
    _fix_signs(U, Vt)
    return ThinSVD(U, s, Vt.T)


def pseudoinverse(A, tol: float = RANK_TOL) -> np.ndarray:
    A = as_matrix(A)
    U, s, V = thin_svd(A, tol)
    return (V / s) @ U.T


def best_rank_k(A, k: int) -> np.ndarray:
    A = as_matrix(A)
    if not 0 <= k <= min(A.shape):
        raise ContractViolation(f"k={k} out of range for shape {A.shape}")
    U, s, V = thin_svd(A)
    k = min(k, s.size)
    return (U[:, :k] * s[:k]) @ V[:, :k].T


def top_k(A, k: int) -> ThinSVD:
    U, s, V = thin_svd(A)
    return ThinSVD(U[:, :k], s[:k], V[:, :k])


def row_projector(B, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the column space of B (P_B = Q Q^T)."""
    return thin_svd(B, tol).U


def gaussian_sketch(m: int, n: int, seed) -> np.ndarray:
    """m x n matrix of i.i.d. N(0, 1/m) entries."""
    from .rng import stream

    if m < 1 or n < 1:
        raise ContractViolation("sketch dimensions must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "gaussian_sketch")
    return rng.standard_normal((m, n)) / np.sqrt(m)


def flatten(T, mode: int) -> np.ndarray:
    """Mode-m flattening of shape n_m x (product of the other two dims).

    Column ordering follows the remaining modes in increasing order with the
    later mode varying fastest.
    """
    T = as_tensor(T)
    if mode not in (1, 2, 3):
        raise ContractViolation(f"invalid mode {mode}")
    ax = mode - 1
    return np.moveaxis(T, ax, 0).reshape(T.shape[ax], -1)


def unflatten(M, mode: int, dims) -> np.ndarray:
    if mode not in (1, 2, 3):
        raise ContractViolation(f"invalid mode {mode}")
    ax = mode - 1
    rest = [dims[i] for i in range(3) if i != ax]
    return np.moveaxis(np.asarray(M, dtype=float).reshape(dims[ax], *rest), 0, ax)


def khatri_rao_rows(A, B) -> np.ndarray:
    """Row-wise Kronecker product: row i is A[i] (x) B[i]."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[0] != B.shape[0]:
        raise ContractViolation("khatri_rao_rows needs equal row counts")
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


def tensor_contract(T, B1=None, B2=None, B3=None) -> np.ndarray:
    """T(B1, B2, B3)[i,j,l] = sum T[a,b,c] B1[a,i] B2[b,j] B3[c,l].

    ``None`` stands for the identity on that mode.
    """
    T = as_tensor(T)
    out = T
    for ax, B in enumerate((B1, B2, B3)):
        if B is None:
            continue
        B = as_matrix(B, f"B{ax + 1}")
        if B.shape[0] != T.shape[ax]:
            raise ContractViolation(f"B{ax + 1} has {B.shape[0]} rows, expected {T.shape[ax]}")
        out = np.moveaxis(np.tensordot(out, B, axes=([ax], [0])), -1, ax)
    return out


def cp_reconstruct(U, V, W) -> np.ndarray:
    """sum_i U[:, i] (x) V[:, i] (x) W[:, i]."""
    return np.einsum("ir,jr,lr->ijl", U, V, W, optimize=True)
