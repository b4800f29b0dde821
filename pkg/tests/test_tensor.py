import numpy as np
import pytest
from scipy.optimize import minimize

import refs
from qcoreset.errors import ContractViolation
from qcoreset.tensor import (CPFactors, als_cp, bicriteria, crt_select, fpt_lowrank, khatri_rao_leverage,
                             lowrank_to_curt, pair_leverage_sample, response_opt, response_regression,
                             sublinear_reduction, tensor_leverage_sample)
from qcoreset.sampler import QueryLedger


def kr_rows(U, V):
    return np.array([U[:, i] * V[:, j] for i in range(U.shape[1]) for j in range(V.shape[1])])


def draw_counts(D):
    c = np.zeros(D.source_n)
    c[D.indices] = np.round(D.weights * D.meta["draws"] * D.probs)
    return c


# ---------------------------------------------------------------- leverage sampling

def test_khatri_rao_leverage_matches_reference():
    rng = np.random.default_rng(0)
    U, V = rng.standard_normal((3, 7)), rng.standard_normal((3, 5))
    assert np.allclose(khatri_rao_leverage(U, V), refs.leverage(kr_rows(U, V)))


@pytest.mark.parametrize("exact_limit", [10**5, 0])
def test_tensor_leverage_total_variation(exact_limit):
    rng = np.random.default_rng(1)
    U = rng.standard_normal((3, 40)) * np.exp(rng.standard_normal(40))
    V = rng.standard_normal((3, 40))
    p = refs.leverage(kr_rows(U, V))
    p /= p.sum()
    D = tensor_leverage_sample(U, V, 100_000, 0.1, QueryLedger(), 1, exact_limit=exact_limit)
    assert D.meta["method"] == ("exact" if exact_limit else "rejection")
    c = draw_counts(D)
    assert c.sum() == 100_000
    assert refs.total_variation(c / c.sum(), p) <= 0.05
    assert np.allclose(D.probs, p[D.indices])


def test_tensor_leverage_orthonormal_rows_uniform():
    Ones = np.ones((1, 12)) / np.sqrt(12)
    D = tensor_leverage_sample(Ones, Ones, 500, 0.1, QueryLedger(), 2)
    assert np.allclose(D.probs, 1 / 144)


def test_tensor_leverage_rank_one_closed_form():
    rng = np.random.default_rng(3)
    u, v = rng.standard_normal((1, 6)), rng.standard_normal((1, 4))
    D = tensor_leverage_sample(u, v, 2000, 0.1, QueryLedger(), 3)
    expect = np.outer(u[0] ** 2, v[0] ** 2).ravel()
    expect /= expect.sum()
    assert np.allclose(D.probs, expect[D.indices])


def test_pair_sampling_matches_materialized_leverage():
    rng = np.random.default_rng(4)
    X1, X2 = rng.standard_normal((20, 3)), rng.standard_normal((15, 2))
    # columns of P1^T (.) P2^T over all (a, b) pairs
    P1 = np.repeat(X1, 2, axis=1)
    P2 = np.tile(X2, (1, 3))
    p = refs.leverage(kr_rows(P1.T, P2.T))
    p /= p.sum()
    D = pair_leverage_sample(X1, X2, 50_000, QueryLedger(), 4)
    assert np.allclose(D.probs, p[D.indices])
    c = draw_counts(D)
    assert refs.total_variation(c / c.sum(), p) <= 0.05


def test_leverage_sample_rejects_bad_input():
    with pytest.raises(ContractViolation):
        tensor_leverage_sample(np.ones((2, 3)), np.ones((3, 3)), 10, 0.1, QueryLedger(), 0)
    with pytest.raises(ContractViolation):
        tensor_leverage_sample(np.zeros((2, 3)), np.ones((2, 3)), 10, 0.1, QueryLedger(), 0)
    with pytest.raises(ContractViolation):
        pair_leverage_sample(np.ones((3, 2)), np.ones((3, 2)), 0, QueryLedger(), 0)


# ---------------------------------------------------------------- response regression

def test_response_adversarial_sampled_ratio_two():
    n = 50
    A = np.zeros((1, n))
    A[0, 3] = A[0, -1] = 1
    B = np.zeros((1, n))
    B[0, -1] = 1
    X, S = response_regression(A, B, 1, 0.25, QueryLedger(), 1, method="sampled")
    assert np.array_equal(S.indices, [n - 1])
    assert abs(np.linalg.norm(X @ A - B) ** 2 / response_opt(A, B, 1) - 2) <= 1e-9
    X, _ = response_regression(A, B, 1, 0.25, QueryLedger(), 1, method="span")
    assert np.linalg.norm(X @ A - B) ** 2 <= response_opt(A, B, 1) * (1 + 1e-9)


def test_response_rank_k_target_exact():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((30, 200))
    B = rng.standard_normal((50, 4)) @ rng.standard_normal((4, 30)) @ A
    X, _ = response_regression(A, B, 4, 0.25, QueryLedger(), 5)
    opt = response_opt(A, B, 4)
    assert np.linalg.norm(X @ A - B) ** 2 <= max(opt, 1e-12 * np.sum(B**2)) * (1 + 1e-6)
    assert np.linalg.matrix_rank(X) <= 4


def test_response_opt_matches_brute_force():
    rng = np.random.default_rng(6)
    A, B = rng.standard_normal((5, 30)), rng.standard_normal((4, 30))
    # rank-k optimum: project B A^+ A onto its top-k left singular space
    P = B @ np.linalg.pinv(A) @ A
    U = np.linalg.svd(P)[0][:, :2]
    best = np.sum((B - U @ U.T @ P) ** 2)
    assert np.isclose(response_opt(A, B, 2), best)


def test_response_unknown_method():
    with pytest.raises(ContractViolation):
        response_regression(np.eye(3), np.eye(3), 1, 0.5, QueryLedger(), 0, method="nope")


# ---------------------------------------------------------------- decompositions

@pytest.mark.parametrize("seed", range(3))
def test_noiseless_recovery(seed):
    _, _, A0 = refs.planted_tensor(20, 3, 0.0, seed)
    scale = np.sum(A0**2)
    L = QueryLedger()
    F = bicriteria(A0, 3, 0.5, L, seed)
    assert F.residual(A0) <= 1e-6 * scale
    C = crt_select(A0, 3, 0.5, L, seed)
    assert C.best_residual(A0) <= 1e-6 * scale
    V = lowrank_to_curt(A0, F, 0.5, L, seed)
    assert V.residual(A0) <= 1e-6 * scale
    assert np.allclose(V.dense(), V.dense(V.core()))


def test_curt_fibers_are_verbatim():
    A, _, _ = refs.planted_tensor(12, 2, 0.1, 7)
    C = crt_select(A, 2, 0.5, QueryLedger(), 7)
    n1, n2, n3 = A.shape
    for col, t in enumerate(C.tube_index):
        assert np.array_equal(C.T[:, col], A[t // n2, t % n2, :])
    for col, r in enumerate(C.row_index):
        assert np.array_equal(C.R[:, col], A[r // n3, :, r % n3])
    for col, c in enumerate(C.col_index):
        assert np.array_equal(C.C[:, col], A[:, c // n3, c % n3])


def test_rank_one():
    rng = np.random.default_rng(8)
    u, v, w = rng.standard_normal((3, 10, 1))
    A = refs.cp(u, v, w)
    L = QueryLedger()
    F = bicriteria(A, 1, 0.5, L, 8)
    assert F.residual(A) <= 1e-10 * np.sum(A**2)
    G = fpt_lowrank(A, 1, 0.5, L, 8)
    assert G.r == 1 and G.residual(A) <= 1e-8 * np.sum(A**2)


@pytest.mark.parametrize("seed", range(5))
def test_planted_noisy_bicriteria(seed):
    A, noise, _ = refs.planted_tensor(30, 3, 0.1, seed)
    L = QueryLedger()
    F = bicriteria(A, 3, 0.5, L, seed)
    assert F.residual(A) <= 4.5 * noise
    C = crt_select(A, 3, 0.5, L, seed)
    assert C.best_residual(A) <= 4.5 * noise
    assert lowrank_to_curt(A, F, 0.5, L, seed).residual(A) <= 4.5 * noise


def test_decomposition_errors():
    A = np.zeros((4, 4, 4))
    with pytest.raises(ContractViolation):
        bicriteria(A, 5, 0.5, QueryLedger(), 0)
    with pytest.raises(ContractViolation):
        crt_select(A, 0, 0.5, QueryLedger(), 0)
    with pytest.raises(ContractViolation):
        CPFactors(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 1)))


# ---------------------------------------------------------------- reduction and ALS

def test_sublinear_reduction_identity():
    rng = np.random.default_rng(9)
    A = rng.standard_normal((5, 6, 7))
    Vs = [rng.standard_normal((m, 2)) for m in A.shape]
    Y1, Y2, Y3, C, _ = sublinear_reduction(A, *Vs, 2, 0.5, QueryLedger(), 9, force_identity=True)
    assert np.array_equal(C, A)
    for Y, V in zip((Y1, Y2, Y3), Vs):
        assert np.array_equal(Y, V)
    with pytest.raises(ContractViolation):
        sublinear_reduction(A, Vs[1], Vs[1], Vs[2], 2, 0.5, QueryLedger(), 9)


def test_sublinear_reduction_preserves_cost_of_planted():
    _, _, A0 = refs.planted_tensor(30, 2, 0.0, 10)
    U = np.linalg.svd(A0.reshape(30, -1))[0][:, :2]
    V = np.linalg.svd(np.moveaxis(A0, 1, 0).reshape(30, -1))[0][:, :2]
    W = np.linalg.svd(np.moveaxis(A0, 2, 0).reshape(30, -1))[0][:, :2]
    Y1, Y2, Y3, C, samples = sublinear_reduction(A0, U, V, W, 2, 0.5, QueryLedger(), 10)
    assert all(len(S) <= 30 for S in samples)
    sol = als_cp(C, 2, 10, (Y1, Y2, Y3), restarts=5)
    assert sol.residual <= 1e-8 * np.sum(C**2)


def test_fpt_noiseless_rank_two():
    _, _, A0 = refs.planted_tensor(15, 2, 0.0, 11)
    F = fpt_lowrank(A0, 2, 0.5, QueryLedger(), 11)
    assert F.meta["certified"] is False
    assert F.residual(A0) <= 1e-6 * np.sum(A0**2)


def test_als_rank_one_matches_optimizer():
    rng = np.random.default_rng(12)
    A = rng.standard_normal((5, 5, 5))
    sol = als_cp(A, 1, 12, restarts=10)

    def f(z):
        return np.sum((A - np.einsum("i,j,l->ijl", z[:5], z[5:10], z[10:])) ** 2)

    best = min(minimize(f, rng.standard_normal(15), method="BFGS").fun for _ in range(20))
    assert sol.residual <= best + 1e-4 * np.sum(A**2)
    assert abs(sol.residual - f(np.concatenate([x[:, 0] for x in sol.X]))) <= 1e-8 * np.sum(A**2)
