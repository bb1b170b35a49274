"""Factorized stable principal component pursuit with one-ring group sparsity.

Decomposes a vertices-by-subjects matrix ``A`` into ``L + S + N`` where
``L = U @ V`` is low rank with ``U`` column-orthonormal, ``S`` is sparse in mesh
patches, and ``N`` lies in a Frobenius ball of radius ``epsilon``. The iteration
is an augmented-Lagrangian splitting with penalty ``beta`` growing geometrically:

    N <- project(Y/beta + A - UV - S) onto the epsilon ball
    S <- local_shrink(Y/beta + A - UV - N, lam/beta)
    G <- Y/beta + A - S - N
    U <- polar(G V^T);  V <- svt(U^T G, 1/(alpha beta))
    Y <- Y - beta (UV + S + N - A);  beta <- alpha beta

Only ``m x r`` and ``r x n`` SVDs occur inside the loop.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .mesh import TriangleMesh, VertexMap, local_shrink, local_sparse_norm


class SolverError(ValueError):
    """Input that the solver cannot work with (non-finite, zero matrix for defaults...)."""


# --- SVD instrumentation ---------------------------------------------------------

class SvdCounter:
    """Records the shape of every SVD taken by this module, tagged by call site."""

    def __init__(self):
        self.calls: Counter = Counter()
        self.active = False

    def record(self, tag: str, shape) -> None:
        if self.active:
            self.calls[(tag, tuple(shape))] += 1

    def shapes(self, tag: str | None = None):
        return {s for (t, s) in self.calls if tag is None or t == tag}


SVD_COUNTER = SvdCounter()


@contextmanager
def count_svds():
    SVD_COUNTER.calls.clear()
    SVD_COUNTER.active = True
    try:
        yield SVD_COUNTER
    finally:
        SVD_COUNTER.active = False


def _svd(M: np.ndarray, tag: str):
    SVD_COUNTER.record(tag, M.shape)
    return np.linalg.svd(M, full_matrices=False)


# --- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class ObservationStats:
    delta: float
    sigma_L: float
    m: int
    n: int


@dataclass(frozen=True)
class SolverConfig:
    """Solver parameters.

    ``None`` for ``lam``, ``epsilon`` or ``rank_budget`` means "derive from the data"
    (see :func:`default_params`). ``seed`` is recorded for provenance; the
    SVD-based initialization itself draws no random numbers.
    """

    lam: float | None = None
    alpha: float = 1.5
    tau: float = 1e-3
    epsilon: float | None = None
    rank_budget: int | None = None
    max_iters: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lam is not None and not self.lam > 0:
            raise SolverError(f"lambda must be positive, got {self.lam}")
        if not 1.0 < self.alpha < 2.0:
            raise SolverError(f"alpha must lie in (1, 2), got {self.alpha}")
        if not self.tau > 0:
            raise SolverError("tau must be positive")
        if self.epsilon is not None and self.epsilon < 0:
            raise SolverError("epsilon must be nonnegative")
        if self.rank_budget is not None and self.rank_budget < 1:
            raise SolverError("rank_budget must be a positive integer")
        if self.max_iters < 1:
            raise SolverError("max_iters must be >= 1")

    def resolved(self, A: np.ndarray, stats: ObservationStats | None = None) -> "SolverConfig":
        m, n = A.shape
        if stats is None:
            stats = observation_stats(A)
        lam = self.lam if self.lam is not None else 1.0 / math.sqrt(max(m, n))
        eps = self.epsilon if self.epsilon is not None else noise_radius(stats)
        r = self.rank_budget if self.rank_budget is not None else min(50, m, n)
        if r > min(m, n):
            raise SolverError(f"rank_budget {r} exceeds min(m, n) = {min(m, n)}")
        return replace(self, lam=lam, epsilon=eps, rank_budget=r)


@dataclass(frozen=True)
class IterationRecord:
    objective: float
    residual: float
    rank: int
    sparse_norm: float
    change: float
    beta: float


@dataclass(frozen=True)
class DecompositionResult:
    U: np.ndarray
    V: np.ndarray
    S: np.ndarray
    N: np.ndarray
    Y: np.ndarray
    iters: int
    converged: bool
    config: SolverConfig
    stats: ObservationStats
    history: tuple[IterationRecord, ...] = field(default=(), repr=False)

    @property
    def L(self) -> np.ndarray:
        return self.U @ self.V

    @property
    def rank(self) -> int:
        return effective_rank(self.V, self.stats.delta)

    @property
    def sparse_norm(self) -> float:
        return local_sparse_norm(self.S)

    @property
    def final_residual(self) -> float:
        return self.history[-1].residual if self.history else 0.0

    def diagnostics(self) -> dict:
        return {
            "iters": self.iters,
            "converged": self.converged,
            "lambda": self.config.lam,
            "alpha": self.config.alpha,
            "tau": self.config.tau,
            "epsilon": self.config.epsilon,
            "rank_budget": self.config.rank_budget,
            "delta": self.stats.delta,
            "sigma_L": self.stats.sigma_L,
            "beta0": 1.25 / self.stats.sigma_L if self.stats.sigma_L > 0 else None,
            "effective_rank": self.rank,
            "sparse_norm": self.sparse_norm,
            "history": [vars(h) for h in self.history],
        }

    def write_diagnostics(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.diagnostics(), fh, indent=1)


def observation_stats(A: np.ndarray) -> ObservationStats:
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        raise SolverError("observation matrix is empty")
    sigma = float(_svd(A, "init")[1][0])
    return ObservationStats(float(A.std()), sigma, A.shape[0], A.shape[1])


def noise_radius(stats: ObservationStats) -> float:
    k = min(stats.m, stats.n)
    return math.sqrt(k + math.sqrt(8.0) * k) * stats.delta


def default_params(A) -> tuple[SolverConfig, ObservationStats]:
    """Data-driven defaults: ``lam = 1/sqrt(max(m, n))``, ``epsilon`` from the entry SD.

    ``delta`` is the population standard deviation over all entries and
    ``sigma_L`` the largest singular value; the initial penalty is
    ``1.25 / sigma_L``, so an all-zero matrix is rejected.
    """
    A = np.asarray(A, dtype=float)
    stats = observation_stats(A)
    if stats.sigma_L == 0:
        raise SolverError("A is identically zero: beta0 = 1.25/sigma_L is undefined; "
                          "the decomposition is trivially L = S = N = 0")
    return SolverConfig().resolved(A, stats), stats


# --- sub-steps ---------------------------------------------------------------------

def update_noise(Yk, A, UVk, Sk, beta_k: float, epsilon: float) -> np.ndarray:
    """Project ``Y/beta + A - UV - S`` onto the Frobenius ball of radius ``epsilon``."""
    Nhat = Yk / beta_k + A - UVk - Sk
    norm = np.linalg.norm(Nhat)
    if norm == 0 or epsilon == 0:
        return np.zeros_like(Nhat)
    if norm <= epsilon:
        return Nhat
    return (epsilon / norm) * Nhat


def update_sparse(Yk, A, UVk, N_next, beta_k: float, lam: float, mesh: TriangleMesh,
                  vmap: VertexMap | None = None) -> np.ndarray:
    G = Yk / beta_k + A - UVk - N_next
    return local_shrink(G, lam / beta_k, mesh, vmap)


def _sign_fix(P: np.ndarray, Qt: np.ndarray):
    idx = np.argmax(np.abs(P), axis=0)
    signs = np.sign(P[idx, np.arange(P.shape[1])])
    signs[signs == 0] = 1.0
    return P * signs, Qt * signs[:, None]


def _complete_basis(B: np.ndarray, candidates: np.ndarray, need: int) -> np.ndarray:
    """Extend orthonormal columns ``B`` by ``need`` orthonormal columns.

    Gram-Schmidt over the candidate columns in order, skipping any whose
    residual is below ``1e-6`` of its norm, then canonical basis vectors in
    index order. Candidate selection works on the Gram matrix of the unit
    candidates, so it costs a few matrix products; only the accepted columns
    are orthonormalized by QR.
    """
    m, k0 = B.shape
    C = np.asarray(candidates, dtype=float)
    c0 = np.linalg.norm(C, axis=0)
    # unit columns keep the Gram entries clear of underflow
    live = c0 > 0
    C = C[:, live] / c0[live]
    for _ in range(2):
        C = C - B @ (B.T @ C)
    M = C.T @ C
    acc = []
    Lf = np.zeros((need, need))
    for j in range(C.shape[1]):
        if len(acc) == need:
            break
        k = len(acc)
        row = solve_triangular(Lf[:k, :k], M[acc, j], lower=True) if k else np.empty(0)
        d = M[j, j] - row @ row
        if d > 1e-12:
            Lf[k, :k] = row
            Lf[k, k] = math.sqrt(d)
            acc.append(j)
    out = np.empty((m, 0))
    if acc:
        # Householder QR, twice: accepted columns can be poorly conditioned
        out = C[:, acc]
        for _ in range(2):
            out = out - B @ (B.T @ out)
            out, R = np.linalg.qr(out)
            sg = np.sign(np.diag(R))
            sg[sg == 0] = 1.0
            out = out * sg
    if out.shape[1] == need:
        return out
    Q = np.hstack([B, out, np.empty((m, need - out.shape[1]))])
    filled = k0 + out.shape[1]
    for i in range(m):
        if filled == k0 + need:
            break
        v = -Q[:, :filled] @ Q[i, :filled]
        v[i] += 1.0
        v -= Q[:, :filled] @ (Q[:, :filled].T @ v)
        nv = np.linalg.norm(v)
        if nv > 1e-9:
            Q[:, filled] = v / nv
            filled += 1
    return Q[:, k0:filled]


def update_orthobasis(G_L, Vk) -> np.ndarray:
    """Orthonormal polar factor of ``G_L @ Vk.T``.

    When the product is rank deficient, the missing directions are filled by
    Gram-Schmidt over the columns of ``G_L`` (then canonical vectors), so the
    basis keeps covering the data once the coefficient rank recovers.
    """
    G_L = np.asarray(G_L, dtype=float)
    Z = G_L @ Vk.T
    m, r = Z.shape
    P, s, Qt = _svd(Z, "orthobasis")
    P, Qt = _sign_fix(P, Qt)
    tol = s[0] * max(m, r) * np.finfo(float).eps if s.size and s[0] > 0 else 0.0
    k = int(np.sum(s > tol)) if s.size and s[0] > 0 else 0
    if k == r:
        return P @ Qt
    W = _complete_basis(P[:, :k], G_L, r - k)
    return np.hstack([P[:, :k], W]) @ Qt


def _svt(T, mu: float):
    J, s, Kt = _svd(np.asarray(T, dtype=float), "svt")
    s = np.maximum(s - mu, 0.0)
    keep = s > 0
    return (J[:, keep] * s[keep]) @ Kt[keep], s


def svt(T, mu: float) -> np.ndarray:
    """Singular value soft-thresholding, the proximal map of ``mu * nuclear norm``."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    return _svt(T, mu)[0]


def update_coefficients(U_next, G_L, beta_next: float) -> np.ndarray:
    return svt(U_next.T @ G_L, 1.0 / beta_next)


def effective_rank(V, delta: float) -> int:
    """Number of singular values of ``V`` strictly above ``3 * delta``."""
    V = np.asarray(V, dtype=float)
    if V.size == 0:
        return 0
    s = np.linalg.svd(V, compute_uv=False)
    return int(np.sum(s > 3.0 * delta))


# --- main loop ---------------------------------------------------------------------

def _trivial(A, cfg: SolverConfig, stats: ObservationStats) -> DecompositionResult:
    m, n = A.shape
    r = cfg.rank_budget or min(50, m, n)
    U = np.eye(m, r)
    Z = np.zeros((m, n))
    rec = IterationRecord(0.0, 0.0, 0, 0.0, 0.0, math.inf)
    return DecompositionResult(U, np.zeros((r, n)), Z, Z.copy(), Z.copy(), 1, True,
                               replace(cfg, rank_budget=r, lam=cfg.lam or 1 / math.sqrt(max(m, n)),
                                       epsilon=cfg.epsilon or 0.0),
                               stats, (rec,))


def decompose(A, mesh: TriangleMesh, cfg: SolverConfig | None = None,
              vmap: VertexMap | None = None,
              stats: ObservationStats | None = None) -> DecompositionResult:
    """Split ``A`` into low-rank ``U @ V``, mesh-sparse ``S`` and bounded noise ``N``.

    Stops when the relative change of ``(UV, S)`` drops to ``tau * delta`` or after
    ``max_iters`` iterations (then ``converged`` is False).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.size == 0:
        raise SolverError(f"A must be a nonempty matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise SolverError("A contains non-finite entries")
    if A.shape[0] != mesh.vertex_count:
        raise SolverError(f"A has {A.shape[0]} rows, mesh has {mesh.vertex_count} vertices")
    cfg = cfg or SolverConfig()
    if stats is None:
        stats = observation_stats(A)
    if stats.sigma_L == 0:
        return _trivial(A, cfg, stats)
    cfg = cfg.resolved(A, stats)
    lam, eps, r, alpha = cfg.lam, cfg.epsilon, cfg.rank_budget, cfg.alpha
    tol = cfg.tau * stats.delta
    a_norm = np.linalg.norm(A)

    P, _, _ = _svd(A, "init")
    U = P[:, :r].copy()
    V = U.T @ A
    L = U @ V
    S = np.zeros_like(A)
    Y = np.zeros_like(A)
    N = np.zeros_like(A)
    beta = 1.25 / stats.sigma_L

    history = []
    converged = False
    k = 0
    while k < cfg.max_iters:
        k += 1
        N = update_noise(Y, A, L, S, beta, eps)
        S_new = update_sparse(Y, A, L, N, beta, lam, mesh, vmap)
        G_L = Y / beta + A - S_new - N
        U = update_orthobasis(G_L, V)
        beta_next = alpha * beta
        V, sv = _svt(U.T @ G_L, 1.0 / beta_next)
        L_new = U @ V
        R = L_new + S_new + N - A
        Y = Y - beta * R

        assert np.abs(U.T @ U - np.eye(r)).max() <= 1e-8
        assert np.linalg.norm(N) <= eps + 1e-8

        num = math.sqrt(np.sum((L_new - L) ** 2) + np.sum((S_new - S) ** 2))
        den = math.sqrt(np.sum(L ** 2) + np.sum(S ** 2)) + 1.0
        change = num / den
        L, S = L_new, S_new
        sparse = float(np.abs(S).sum())
        history.append(IterationRecord(
            objective=float(sv.sum() + lam * sparse),
            residual=float(np.linalg.norm(R) / (a_norm + 1.0)),
            rank=int(np.sum(sv > 3.0 * stats.delta)),
            sparse_norm=sparse,
            change=change,
            beta=beta,
        ))
        beta = beta_next
        if change <= tol:
            converged = True
            break

    return DecompositionResult(U, V, S, N, Y, k, converged, cfg, stats, tuple(history))
