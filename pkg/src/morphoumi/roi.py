"""Region-of-interest extraction from two cohorts' per-vertex samples.

Vertices are tested one at a time with a pooled two-sample t statistic. Its null
distribution comes from whole-subject label shuffles, and every vertex shares
the same shuffles. Selection is by a raw p threshold or by Benjamini-Hochberg.
:func:`stability_folds` repeats the selection on random subsamples and counts how
often each vertex is chosen.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriangleMesh, VertexMap, save_mesh
from .solver import SolverConfig, SolverError, decompose

_TIE_RTOL = 1e-10


@dataclass(frozen=True)
class GroupSample:
    matrix: np.ndarray
    label: str = ""
    subject_ids: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.matrix, dtype=float)
        if X.ndim != 2:
            raise ValueError("group matrix must be vertices x subjects")
        object.__setattr__(self, "matrix", X)
        ids = tuple(self.subject_ids) or tuple(range(X.shape[1]))
        if len(ids) != X.shape[1]:
            raise ValueError(f"{len(ids)} subject ids for {X.shape[1]} columns")
        if X.shape[1] < 2:
            raise ValueError(f"group {self.label!r} needs at least 2 subjects")
        object.__setattr__(self, "subject_ids", ids)

    def subset(self, cols) -> "GroupSample":
        cols = np.asarray(cols)
        return GroupSample(self.matrix[:, cols], self.label,
                           tuple(self.subject_ids[c] for c in cols))


@dataclass(frozen=True)
class RoiMask:
    selected: np.ndarray
    p_values: np.ndarray
    threshold: float
    method: str = "permutation"

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.selected)

    @property
    def size(self) -> int:
        return int(self.selected.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", "p", "selected"])
            for q, (p, s) in enumerate(zip(self.p_values, self.selected)):
                w.writerow([q, repr(float(p)), int(s)])

    @classmethod
    def from_csv(cls, path, threshold=float("nan"), method="permutation") -> "RoiMask":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["vertex"]))
        return cls(np.array([bool(int(r["selected"])) for r in rows]),
                   np.array([float(r["p"]) for r in rows]), threshold, method)


@dataclass(frozen=True)
class StabilityMap:
    counts: np.ndarray
    n_folds: int
    masks: tuple = field(default=(), repr=False)

    def full_count_fraction(self) -> float:
        """Share of ever-selected vertices that were selected in every fold."""
        ever = self.counts > 0
        if not ever.any():
            return 0.0
        return float(np.sum(self.counts == self.n_folds) / ever.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", "count"])
            for q, c in enumerate(self.counts):
                w.writerow([q, int(c)])


def write_overlay(path, mesh: TriangleMesh, values) -> None:
    """Mesh text file with one scalar per vertex for external viewers."""
    save_mesh(path, mesh, scalars=np.asarray(values, dtype=float))


# --- statistics --------------------------------------------------------------------

def _t_from_sums(sa, sqa, na, sb, sqb, nb):
    ma = sa / na
    mb = sb / nb
    ssa = np.maximum(sqa - sa * ma, 0.0)
    ssb = np.maximum(sqb - sb * mb, 0.0)
    pooled = (ssa + ssb) / (na + nb - 2)
    diff = ma - mb
    se = np.sqrt(pooled * (1.0 / na + 1.0 / nb))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / se
        return np.where(se > 0, t, np.where(diff == 0, 0.0, np.sign(diff) * np.inf))


def two_sample_t(a, b) -> np.ndarray:
    """Pooled-variance two-sample t per row of ``a`` (vertices x nA) against ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    na, nb = a.shape[1], b.shape[1]
    if na < 2 or nb < 2:
        raise ValueError(f"each group needs >= 2 subjects, got {na} and {nb}")
    ma, mb = a.mean(axis=1), b.mean(axis=1)
    ssa = ((a - ma[:, None]) ** 2).sum(axis=1)
    ssb = ((b - mb[:, None]) ** 2).sum(axis=1)
    se = np.sqrt((ssa + ssb) / (na + nb - 2) * (1.0 / na + 1.0 / nb))
    diff = ma - mb
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / se
        return np.where(se > 0, t, np.where(diff == 0, 0.0, np.sign(diff) * np.inf))


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent stream for one Monte Carlo replicate, keyed by (seed, replicate)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def _as_matrix(g):
    return g.matrix if isinstance(g, GroupSample) else np.asarray(g, dtype=float)


def permutation_t_test(groupA, groupB, n_perm: int = 5000, seed: int = 0,
                       batch: int = 256, return_t: bool = False):
    """Monte Carlo permutation p-values for the per-vertex two-sample t.

    ``p = (1 + #{|t_perm| >= |t_obs|}) / (n_perm + 1)``. Replicate ``i`` shuffles
    the pooled subject labels with its own stream, so results do not depend
    on batching.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    A, B = _as_matrix(groupA), _as_matrix(groupB)
    if A.shape[0] != B.shape[0]:
        raise ValueError("groups must share the vertex dimension")
    na, nb = A.shape[1], B.shape[1]
    if na < 2 or nb < 2:
        raise ValueError(f"each group needs >= 2 subjects, got {na} and {nb}")
    X = np.hstack([A, B])
    X = X - X.mean(axis=1, keepdims=True)
    X2 = X * X
    tot, tot2 = X.sum(axis=1), X2.sum(axis=1)
    N = na + nb

    def t_for(ind):
        sa = X @ ind
        sqa = X2 @ ind
        return _t_from_sums(sa, sqa, na, tot[:, None] - sa, tot2[:, None] - sqa, nb)

    obs_ind = np.zeros((N, 1))
    obs_ind[:na, 0] = 1.0
    t_obs = t_for(obs_ind)[:, 0]
    bound = np.abs(t_obs) * (1.0 - _TIE_RTOL)
    exceed = np.zeros(X.shape[0], dtype=np.int64)
    for start in range(0, n_perm, batch):
        stop = min(start + batch, n_perm)
        ind = np.zeros((N, stop - start))
        for j, i in enumerate(range(start, stop)):
            ind[replicate_rng(seed, i).permutation(N)[:na], j] = 1.0
        exceed += np.sum(np.abs(t_for(ind)) >= bound[:, None], axis=1)
    p = (1.0 + exceed) / (n_perm + 1.0)
    return (p, t_obs) if return_t else p


def select_roi(p_values, threshold: float) -> RoiMask:
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    p = np.asarray(p_values, dtype=float)
    return RoiMask(p < threshold, p, float(threshold), "permutation")


def fdr_select(p_values, q: float) -> RoiMask:
    """Benjamini-Hochberg step-up at level ``q``.

    ``threshold`` on the returned mask is the largest passing ordered p-value
    (0 when nothing passes).
    """
    if not 0 < q < 1:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    p = np.asarray(p_values, dtype=float)
    V = p.size
    order = np.sort(p)
    passing = np.flatnonzero(order <= q * np.arange(1, V + 1) / V)
    if passing.size == 0:
        return RoiMask(np.zeros(V, dtype=bool), p, 0.0, "fdr")
    cut = order[passing[-1]]
    return RoiMask(p <= cut, p, float(cut), "fdr")


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values (monotone, capped at 1)."""
    p = np.asarray(p_values, dtype=float)
    V = p.size
    order = np.argsort(p, kind="stable")
    adj = p[order] * V / np.arange(1, V + 1)
    adj = np.minimum.accumulate(adj[::-1])[::-1]
    out = np.empty(V)
    out[order] = np.minimum(adj, 1.0)
    return out


# --- pipeline pieces ---------------------------------------------------------------

@dataclass(frozen=True)
class RoiConfig:
    """How one ROI is produced from two groups.

    ``features='lowrank'`` tests the low-rank components of per-group
    decompositions; ``'raw'`` tests the input matrices directly.
    """

    n_perm: int = 5000
    p_thresh: float = 1e-3
    method: str = "permutation"
    q: float = 1e-4
    features: str = "lowrank"
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.method not in ("permutation", "fdr"):
            raise ValueError(f"unknown ROI method {self.method!r}")
        if self.features not in ("lowrank", "raw"):
            raise ValueError(f"unknown feature source {self.features!r}")


def extract_roi(groupA, groupB, mesh: TriangleMesh, cfg: RoiConfig, seed: int = 0,
                vmap: VertexMap | None = None) -> RoiMask:
    A, B = _as_matrix(groupA), _as_matrix(groupB)
    if cfg.features == "lowrank":
        A = decompose(A, mesh, cfg.solver, vmap).L
        B = decompose(B, mesh, cfg.solver, vmap).L
    p = permutation_t_test(A, B, cfg.n_perm, seed)
    if cfg.method == "fdr":
        return fdr_select(p, cfg.q)
    return select_roi(p, cfg.p_thresh)


def stability_folds(groupA, groupB, mesh: TriangleMesh, n_folds: int = 10,
                    fraction: float = 0.9, cfg: RoiConfig | None = None, seed: int = 0,
                    vmap: VertexMap | None = None) -> StabilityMap:
    """Count, per vertex, how many of ``n_folds`` subsampled runs select it.

    Each run keeps ``round(fraction * n)`` subjects of each group, drawn
    without replacement.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    cfg = cfg or RoiConfig()
    A, B = _as_matrix(groupA), _as_matrix(groupB)
    counts = np.zeros(A.shape[0], dtype=np.int64)
    masks = []
    for fold in range(n_folds):
        rng = replicate_rng(seed, fold)
        ka = max(2, int(round(fraction * A.shape[1])))
        kb = max(2, int(round(fraction * B.shape[1])))
        ca = np.sort(rng.choice(A.shape[1], ka, replace=False))
        cb = np.sort(rng.choice(B.shape[1], kb, replace=False))
        try:
            mask = extract_roi(A[:, ca], B[:, cb], mesh, cfg,
                               seed=int(rng.integers(2**31)), vmap=vmap)
        except SolverError as exc:
            raise SolverError(f"fold {fold}: {exc}") from exc
        counts += mask.selected
        masks.append(mask)
    return StabilityMap(counts, n_folds, tuple(masks))
