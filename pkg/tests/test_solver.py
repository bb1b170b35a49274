import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from morphoumi.mesh import icosahedron, local_shrink, singleton_mesh, sphere_mesh
from morphoumi.solver import (SolverConfig, SolverError, count_svds, decompose, default_params,
                              effective_rank, observation_stats, svt, update_coefficients,
                              update_noise, update_orthobasis, update_sparse)
from morphoumi.synthetic import planted_instance


def random_orthonormal(rng, m, r):
    q, _ = np.linalg.qr(rng.normal(size=(m, r)))
    return q


# --- defaults ----------------------------------------------------------------------

def test_default_lambda_direct_formula():
    cfg, _ = default_params(np.random.default_rng(0).normal(size=(100, 422)))
    assert cfg.lam == pytest.approx(1 / math.sqrt(422))
    assert round(cfg.lam, 5) == 0.04868


def test_default_lambda_at_hippocampal_scale():
    # about 15000 surface vertices gives lambda near 0.0082
    assert round(1 / math.sqrt(14872), 4) == 0.0082


def test_identity_observation_stats():
    A = np.eye(10)
    cfg, stats = default_params(A)
    mean = 10 / 100
    delta = math.sqrt(sum((x - mean) ** 2 for x in A.ravel()) / 100)
    assert stats.delta == pytest.approx(delta, abs=1e-15)
    assert stats.sigma_L == pytest.approx(1.0)
    assert cfg.epsilon == pytest.approx(math.sqrt(10 + math.sqrt(8) * 10) * delta)
    assert cfg.rank_budget == 10


def test_default_params_rejects_zero():
    with pytest.raises(SolverError, match="trivial"):
        default_params(np.zeros((4, 3)))


def test_constant_matrix_zero_epsilon():
    cfg, stats = default_params(np.full((5, 4), 2.0))
    assert stats.delta == 0 and cfg.epsilon == 0


@pytest.mark.parametrize("kw", [dict(alpha=1.0), dict(alpha=2.0), dict(lam=0.0), dict(tau=0.0),
                                dict(rank_budget=0), dict(max_iters=0), dict(epsilon=-1.0)])
def test_config_validation(kw):
    with pytest.raises(SolverError):
        SolverConfig(**kw)


def test_rank_budget_too_large():
    with pytest.raises(SolverError):
        decompose(np.ones((4, 3)) + np.eye(4, 3), singleton_mesh(4), SolverConfig(rank_budget=5))


# --- sub-steps ---------------------------------------------------------------------

def test_update_noise_cases(rng):
    A = rng.normal(size=(6, 4))
    Z = np.zeros_like(A)
    nhat = A.copy()
    r = np.linalg.norm(nhat)
    assert np.array_equal(update_noise(Z, A, Z, Z, 1.0, 2 * r), nhat)
    assert np.array_equal(update_noise(Z, A, Z, Z, 1.0, 0.0), Z)
    assert np.allclose(update_noise(Z, A, Z, Z, 1.0, r / 2), nhat / 2)
    assert np.array_equal(update_noise(Z, Z, Z, Z, 1.0, 1.0), Z)


def test_update_sparse_cases(rng):
    ico = icosahedron()
    A = rng.normal(size=(12, 3))
    Y = rng.normal(size=(12, 3))
    UV = rng.normal(size=(12, 3))
    N = rng.normal(size=(12, 3)) * 0.1
    G = Y / 2.0 + A - UV - N
    assert np.array_equal(update_sparse(Y, A, UV, N, 2.0, 0.0, ico), G)
    Z = np.zeros((12, 3))
    assert np.array_equal(update_sparse(Z, Z, Z, Z, 2.0, 0.3, ico), Z)
    assert np.array_equal(update_sparse(Y, A, UV, N, 2.0, 0.6, ico), local_shrink(G, 0.3, ico))


def test_orthobasis_trivial_cases(rng):
    Q = random_orthonormal(rng, 7, 3)
    assert np.allclose(update_orthobasis(Q, np.eye(3)), Q, atol=1e-12)
    assert np.allclose(update_orthobasis(2 * np.eye(4), np.eye(4)), np.eye(4), atol=1e-12)


def test_orthobasis_polar_optimality(rng):
    Z = rng.normal(size=(20, 5))
    U = update_orthobasis(Z, np.eye(5))
    assert np.abs(U.T @ U - np.eye(5)).max() <= 1e-10
    best = np.trace(U.T @ Z)
    for _ in range(1000):
        assert np.trace(random_orthonormal(rng, 20, 5).T @ Z) <= best + 1e-12


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_orthobasis_rank_deficient_stays_orthonormal(seed, k):
    rng = np.random.default_rng(seed)
    r = 6
    G = rng.normal(size=(30, 12))
    V = np.zeros((r, 12))
    V[:k] = rng.normal(size=(k, 12))
    if k > 1:
        V[k - 1] = V[0]
    U = update_orthobasis(G, V)
    assert U.shape == (30, r)
    assert np.abs(U.T @ U - np.eye(r)).max() <= 1e-10
    assert np.array_equal(U, update_orthobasis(G, V))


def test_orthobasis_zero_product():
    U = update_orthobasis(np.zeros((8, 5)), np.zeros((3, 5)))
    assert np.abs(U.T @ U - np.eye(3)).max() <= 1e-12


def test_svt_cases(rng):
    T = rng.normal(size=(8, 6))
    assert np.allclose(svt(T, 0.0), T, atol=1e-10)
    assert np.allclose(svt(np.diag([5.0, 3.0, 1.0]), 2.0), np.diag([3.0, 1.0, 0.0]), atol=1e-12)
    with pytest.raises(ValueError):
        svt(T, -1.0)


def prox_violation(T, X, mu):
    """Distance of (T - X)/mu from the nuclear-norm subdifferential at X."""
    D = (T - X) / mu
    J, s, Kt = np.linalg.svd(X, full_matrices=False)
    k = int(np.sum(s > 1e-12 * max(1.0, s.max(initial=0))))
    J, K = J[:, :k], Kt[:k].T
    err = 0.0
    if k:
        err = max(np.abs(D @ K - J).max(), np.abs(J.T @ D - K.T).max())
    rest = D - J @ (J.T @ D) - (D @ K) @ K.T + J @ (J.T @ D @ K) @ K.T
    return max(err, np.linalg.norm(rest, 2) - 1.0)


def test_svt_prox_optimality(rng):
    T = rng.normal(size=(8, 6))
    assert prox_violation(T, svt(T, 0.7), 0.7) <= 1e-8


def test_update_coefficients(rng):
    U = random_orthonormal(rng, 9, 4)
    G = rng.normal(size=(9, 5))
    assert np.array_equal(update_coefficients(U, np.zeros((9, 5)), 3.0), np.zeros((4, 5)))
    assert np.allclose(update_coefficients(U, G, 3.0), svt(U.T @ G, 1 / 3.0), atol=1e-14)
    assert np.allclose(update_coefficients(np.eye(5), G[:5], 1e12), G[:5], atol=1e-10)


def test_effective_rank():
    assert effective_rank(np.zeros((3, 4)), 1.0) == 0
    assert effective_rank(np.diag([10.0, 2.0]), 1.0) == 1
    assert effective_rank(np.diag([10.0, 3.0]), 1.0) == 1


# --- decompose ----------------------------------------------------------------------

def test_zero_matrix():
    res = decompose(np.zeros((6, 4)), singleton_mesh(6))
    assert res.converged and res.iters <= 2
    assert not res.L.any() and not res.S.any() and not res.N.any()


def test_rank_one_exact(rng):
    u, v = rng.uniform(1, 2, 40), rng.uniform(1, 2, 12)
    A = np.outer(u, v)
    res = decompose(A, sphere_mesh(40), SolverConfig(epsilon=0.0, tau=1e-8, max_iters=2000))
    assert np.linalg.norm(res.L - A) / np.linalg.norm(A) <= 1e-4
    assert np.abs(res.S).max() <= 1e-4 * np.abs(A).max()


def test_nonfinite_rejected():
    A = np.ones((4, 3))
    A[0, 0] = np.nan
    with pytest.raises(SolverError, match="non-finite"):
        decompose(A, singleton_mesh(4))


def test_row_mismatch():
    with pytest.raises(SolverError):
        decompose(np.ones((5, 3)), singleton_mesh(4))


def test_max_iters_returns_unconverged():
    inst = planted_instance(0, m=200, n=20)
    res = decompose(inst.A, inst.mesh, SolverConfig(max_iters=2))
    assert not res.converged and res.iters == 2 and len(res.history) == 2


@pytest.fixture(scope="module")
def planted():
    inst = planted_instance(3, m=300, n=30)
    return inst, decompose(inst.A, inst.mesh)


def test_invariants_on_planted(planted):
    inst, res = planted
    assert np.abs(res.U.T @ res.U - np.eye(res.U.shape[1])).max() <= 1e-8
    assert np.linalg.norm(res.N) <= res.config.epsilon + 1e-8
    resid = np.linalg.norm(res.L + res.S + res.N - inst.A) / (np.linalg.norm(inst.A) + 1)
    assert resid == pytest.approx(res.final_residual, rel=1e-9)
    assert res.final_residual <= 0.1
    assert res.config.lam == pytest.approx(1 / math.sqrt(300))


def test_deterministic(planted):
    inst, res = planted
    again = decompose(inst.A, inst.mesh)
    for name in ("U", "V", "S", "N", "Y"):
        assert np.array_equal(getattr(res, name), getattr(again, name))


def test_diagnostics_json(planted, tmp_path):
    import json

    _, res = planted
    res.write_diagnostics(tmp_path / "d.json")
    d = json.loads((tmp_path / "d.json").read_text())
    assert d["iters"] == res.iters and len(d["history"]) == res.iters
    assert d["beta0"] == pytest.approx(1.25 / res.stats.sigma_L)


def test_no_full_svd_in_loop():
    inst = planted_instance(1, m=300, n=60)
    with count_svds() as counter:
        res = decompose(inst.A, inst.mesh)
    m, n = inst.A.shape
    r = res.config.rank_budget
    assert r < n
    assert counter.shapes("init") == {(m, n)}
    assert counter.shapes("orthobasis") == {(m, r)}
    assert counter.shapes("svt") == {(r, n)}


def test_observation_stats_population_sd(rng):
    A = rng.normal(size=(5, 7))
    assert observation_stats(A).delta == pytest.approx(np.sqrt(np.mean((A - A.mean()) ** 2)))


@given(hnp.arrays(np.float64, (10, 6), elements=st.floats(-5, 5, allow_nan=False)))
def test_decompose_properties(A):
    res = decompose(A, singleton_mesh(10), SolverConfig(max_iters=50))
    r = res.U.shape[1]
    assert np.abs(res.U.T @ res.U - np.eye(r)).max() <= 1e-8
    assert np.linalg.norm(res.N) <= res.config.epsilon + 1e-8
    assert all(np.isfinite(h.residual) for h in res.history)
