"""Synthetic cohorts with known ground truth.

Features are positive per-vertex lengths on a sphere mesh:

* a smooth group-common template plus shared low-rank variation,
* tapered atrophy patches scaled by a per-subject severity (AD, some MCI),
* small per-subject sparse deviations on one-ring neighbourhoods,
* Gaussian noise, and a 24-month follow-up with severity-dependent loss.

Survival times for MCI subjects are exponential with hazard ratio
``exp(marker_effect)`` between marker-positive and -negative subjects.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import CohortRow, CohortTable, FeatureMatrix
from .mesh import TriangleMesh, hop_distance, sphere_mesh
from .roi import replicate_rng
from .stats import SurvivalRecord


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    m: int = 1000
    n_ad: int = 60
    n_mci: int = 60
    n_cu: int = 60
    rank: int = 4
    base_radius: float = 3.0
    template_relief: float = 0.4
    lowrank_scale: float = 0.06
    patch_count: int = 2
    patch_radius: int = 3
    atrophy_depth: float = 16.0
    severity_range: tuple = (0.5, 1.5)
    sparse_fraction: float = 1.0
    sparse_patches: int = 3
    sparse_amplitude: float = 0.3
    sparse_radius: int = 2
    noise_sigma: float = 0.02
    drift: dict = field(default_factory=lambda: {"AD": 4.0, "MCI": 2.0, "CU": 0.5})
    baseline_hazard: float = 0.01
    marker_effect: float = float(np.log(4.0))
    followup_months: float = 72.0
    seed: int = 0

    def __post_init__(self):
        for name in ("m", "n_ad", "n_cu", "rank", "patch_radius"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_mci < 0 or self.patch_count < 0:
            raise ValueError("counts must be nonnegative")
        if min(self.n_ad, self.n_cu) < 2:
            raise ValueError("AD and CU groups need at least 2 subjects")
        if self.noise_sigma < 0 or self.atrophy_depth < 0 or self.lowrank_scale < 0:
            raise ValueError("scales must be nonnegative")
        if not 0 <= self.sparse_fraction <= 1:
            raise ValueError("sparse_fraction must lie in [0, 1]")
        if self.rank > self.m:
            raise ValueError("rank cannot exceed m")
        if self.rank < 2 and self.atrophy_depth > 0 and self.patch_count > 0:
            raise ValueError("rank must be at least 2 when atrophy varies with severity")


@dataclass
class GroundTruth:
    roi: np.ndarray
    profile: np.ndarray
    patch_centers: list
    severity: dict
    marker_positive: np.ndarray
    L0: dict
    S0: dict
    rank: dict

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({
                "roi": np.flatnonzero(self.roi).tolist(),
                "profile": [float(x) for x in self.profile],
                "patch_centers": [int(c) for c in self.patch_centers],
                "severity": {g: [float(x) for x in v] for g, v in self.severity.items()},
                "mci_marker_positive": [bool(x) for x in self.marker_positive],
                "rank": self.rank,
            }, fh, indent=1)


@dataclass
class SyntheticCohort:
    features: dict
    cohort: CohortTable
    mesh: TriangleMesh
    truth: GroundTruth
    survival: list
    spec: SyntheticSpec
    population: "Population" = None

    def group(self, g: str, timepoint: str = "baseline") -> FeatureMatrix:
        return self.features[(g, timepoint)]

    def stacked(self, timepoint: str = "baseline") -> FeatureMatrix:
        parts = [self.features[(g, timepoint)] for g in ("AD", "MCI", "CU")
                 if (g, timepoint) in self.features]
        return FeatureMatrix(np.hstack([p.values for p in parts]),
                             sum((p.subject_ids for p in parts), ()))


def _raw_fields(mesh: TriangleMesh) -> np.ndarray:
    x, y, z = mesh.positions.T
    return np.column_stack([x, y, z, x * y * np.sqrt(15 / 4), y * z, x * z, x * x - y * y,
                            3 * z * z - 1, x * (x * x - 3 * y * y), z * (x * x - y * y),
                            x * y * z, y * (3 * x * x - y * y)])


def smooth_fields(mesh: TriangleMesh, k: int) -> np.ndarray:
    """``k`` orthogonal smooth vertex fields with unit RMS (low-order polynomials)."""
    F = _raw_fields(mesh)
    if k > F.shape[1]:
        raise ValueError(f"at most {F.shape[1]} smooth fields available")
    F = F[:, :k]
    Q, _ = np.linalg.qr(F)
    return Q * np.sqrt(mesh.vertex_count)


def _place_patches(mesh, count, radius, rng):
    m = mesh.vertex_count
    profile = np.zeros(m)
    centers = []
    taken = np.zeros(m, bool)
    for _ in range(count):
        for _attempt in range(200):
            c = int(rng.integers(m))
            d = hop_distance(mesh, c, 2 * radius + 1)
            inside = (d >= 0) & (d <= radius)
            guard = (d >= 0) & (d <= 2 * radius + 1)
            if not np.any(taken & guard):
                break
        else:
            raise InfeasibleSpecError(f"cannot place {count} disjoint patches of radius {radius} "
                                      f"on a {m}-vertex mesh")
        centers.append(c)
        taken |= inside
        profile[inside] = np.maximum(profile[inside], 1.0 - d[inside] / (radius + 1.0))
    return profile, centers


def _sparse_deviations(mesh, n, frac, count, amp, radius, rng):
    S = np.zeros((mesh.vertex_count, n))
    for j in range(n):
        if rng.random() < frac:
            for _ in range(count):
                d = hop_distance(mesh, int(rng.integers(mesh.vertex_count)), radius)
                S[(d >= 0) & (d <= radius), j] += amp * rng.choice([-1.0, 1.0])
    return S


def simulate_survival(marker, baseline_hazard, effect, followup, rng) -> list:
    """Exponential event times with administrative censoring at ``followup``."""
    marker = np.asarray(marker, dtype=bool)
    rate = baseline_hazard * np.exp(effect * marker)
    t = rng.exponential(1.0 / rate)
    event = t <= followup
    t = np.minimum(t, followup)
    return [SurvivalRecord(float(a), bool(e), bool(x)) for a, e, x in zip(t, event, marker)]


@dataclass(frozen=True)
class Population:
    """Group-independent anatomy shared by every subject of a cohort."""

    template: np.ndarray
    basis: np.ndarray
    profile: np.ndarray
    loss: np.ndarray


def _severity(spec, g, n, rng):
    lo, hi = spec.severity_range
    if g == "AD":
        return rng.uniform(lo, hi, n), np.ones(n, bool)
    if g == "CU":
        return np.zeros(n), np.zeros(n, bool)
    pos = rng.random(n) < 0.5
    return np.where(pos, 0.7 * rng.uniform(lo, hi, n), rng.uniform(0, 0.1, n)), pos


def _draw(pop, spec, mesh, g, sev, rng):
    n = sev.size
    c = spec.base_radius
    k = pop.basis.shape[1]
    # varying severity spans one direction of the rank budget
    varies = np.ptp(sev) > 0 and np.any(pop.loss)
    active = k - 1 if varies else k
    need = 1 + active + varies
    if n < need:
        raise InfeasibleSpecError(f"group {g} has {n} subjects, exact rank {spec.rank} needs {need}")
    # balanced signs: each field has zero mean over the group; redraw until the
    # subject coefficients (with the intercept and severity) are independent
    for _attempt in range(100):
        W = np.zeros((k, n))
        for i in range(active):
            W[i] = rng.permutation(np.arange(n) % 2 * 2.0 - 1.0)
        C = np.vstack([np.ones(n), W[:active], sev[None, :] if varies else np.empty((0, n))])
        if np.linalg.matrix_rank(C) == C.shape[0]:
            break
    else:
        raise InfeasibleSpecError(f"group {g}: could not draw independent coefficients")
    W *= spec.lowrank_scale
    L = pop.template[:, None] + pop.basis @ W - pop.loss[:, None] * sev[None, :]
    S = _sparse_deviations(mesh, n, spec.sparse_fraction, spec.sparse_patches, spec.sparse_amplitude,
                           spec.sparse_radius, rng)
    drift = spec.drift.get(g, 0.0) / 100.0 * c
    # follow-up loss concentrates where atrophy is and grows with severity
    L24 = L - drift * (0.25 + pop.profile[:, None] * (1.0 + 2.0 * sev[None, :]))
    A0 = L + S + rng.normal(0, spec.noise_sigma, L.shape)
    A24 = L24 + S + rng.normal(0, spec.noise_sigma, L.shape)
    return L, S, A0, A24


def generate_synthetic(spec: SyntheticSpec | None = None, mesh: TriangleMesh | None = None,
                       ) -> SyntheticCohort:
    spec = spec or SyntheticSpec()
    mesh = mesh or sphere_mesh(spec.m)
    if mesh.vertex_count != spec.m:
        raise ValueError("mesh size disagrees with spec.m")
    c = spec.base_radius
    streams = [replicate_rng(spec.seed, k) for k in range(8)]

    fields = smooth_fields(mesh, spec.rank - 1 + 3)
    template = c + spec.template_relief * fields[:, -3:] @ streams[0].normal(size=3) / np.sqrt(3)
    if np.any(template <= 0):
        raise InfeasibleSpecError("template relief too large: nonpositive template")
    profile, centers = _place_patches(mesh, spec.patch_count, spec.patch_radius, streams[1])
    pop = Population(template, fields[:, :spec.rank - 1], profile,
                     spec.atrophy_depth / 100.0 * c * profile)

    sizes = {"AD": spec.n_ad, "MCI": spec.n_mci, "CU": spec.n_cu}
    severity, positive = {}, {}
    for g in ("AD", "MCI", "CU"):
        severity[g], positive[g] = _severity(spec, g, sizes[g], streams[2])

    features, L0, S0, rank = {}, {}, {}, {}
    rows = []
    col = {"baseline": 0, "m24": 0}
    for gi, g in enumerate(("AD", "MCI", "CU")):
        n = sizes[g]
        if n == 0:
            continue
        rng = streams[3 + gi]
        sev = severity[g]
        L, S, A0, A24 = _draw(pop, spec, mesh, g, sev, rng)
        ids = tuple(f"{g}{j + 1:03d}" for j in range(n))
        features[(g, "baseline")] = FeatureMatrix(A0, ids)
        features[(g, "m24")] = FeatureMatrix(A24, ids)
        L0[g], S0[g] = L, S
        rank[g] = int(np.linalg.matrix_rank(L))
        for j, sid in enumerate(ids):
            amy = "positive" if positive[g][j] else "negative"
            s = float(sev[j])
            scores = {"MMSE": 29.0 - 4.0 * s + rng.normal(0, 1.0),
                      "CDR-SB": 0.5 + 3.0 * s + abs(rng.normal(0, 0.5)),
                      "ADAS-Cog11": 6.0 + 12.0 * s + rng.normal(0, 2.0),
                      "AVLT-Total": 45.0 - 15.0 * s + rng.normal(0, 4.0)}
            for tp in ("baseline", "m24"):
                rows.append(CohortRow(sid, g, amy, tp, col[tp], scores))
                col[tp] += 1

    survival = simulate_survival(positive["MCI"], spec.baseline_hazard, spec.marker_effect,
                                 spec.followup_months, streams[6])
    truth = GroundTruth(profile > 0, profile, centers, severity, positive["MCI"], L0, S0, rank)
    return SyntheticCohort(features, CohortTable(tuple(rows)), mesh, truth, survival, spec, pop)


def draw_subjects(cohort: SyntheticCohort, group: str, n: int, seed: int) -> FeatureMatrix:
    """Fresh baseline subjects from the same population, e.g. for holdout scoring."""
    rng = replicate_rng(cohort.spec.seed, 1000 + seed)
    sev, _ = _severity(cohort.spec, group, n, rng)
    _, _, A0, _ = _draw(cohort.population, cohort.spec, cohort.mesh, group, sev, rng)
    return FeatureMatrix(A0, tuple(f"{group}H{j + 1:04d}" for j in range(n)))


def spec_to_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["severity_range"] = list(spec.severity_range)
    return d


# --- planted decomposition model -------------------------------------------------------

@dataclass
class PlantedInstance:
    A: np.ndarray
    L0: np.ndarray
    S0: np.ndarray
    sigma: float
    mesh: TriangleMesh


def planted_instance(seed: int, m: int = 500, n: int = 60, rank: int = 5,
                     sparse_columns: float = 0.05, patch_radius: int = 2,
                     mesh: TriangleMesh | None = None, scale: float = 0.03) -> PlantedInstance:
    """Rank-``rank`` matrix plus one-ring patches in a few columns plus noise.

    ``L0`` is a positive offset plus ``rank - 1`` smooth fields with +-1 subject
    coefficients. Patches have depth equal to the offset's spatial relief.
    Noise SD is ``0.01 * max|L0|``.
    """
    mesh = mesh or sphere_mesh(m)
    rng = replicate_rng(seed, 0)
    k = rank - 1
    F = _raw_fields(mesh)
    if k > F.shape[1]:
        raise ValueError(f"rank at most {F.shape[1] + 1} supported")
    P = mesh.positions
    offset, relief = 3.0, 1.0
    base = offset + relief * (P @ rng.normal(size=3)) / np.sqrt(3)
    W = rng.choice([-1.0, 1.0], (k, n)) * (0.6 * (1.0 - 0.1 * np.arange(k)))[:, None]
    L0 = base[:, None] + F[:, :k] @ W
    S0 = np.zeros((m, n))
    for col in rng.choice(n, max(1, int(round(sparse_columns * n))), replace=False):
        d = hop_distance(mesh, int(rng.integers(m)), patch_radius)
        S0[(d >= 0) & (d <= patch_radius), col] = -relief
    sigma = 0.01 * np.abs(L0).max()
    A = L0 + S0 + rng.normal(0, sigma, (m, n))
    return PlantedInstance(A * scale, L0 * scale, S0 * scale, sigma * scale, mesh)


def support_f1(S, S0, N, kappa: float = 5.0) -> float:
    """F1 of ``|S| > kappa * rms(N)`` against the true support ``S0 != 0``."""
    thr = kappa * np.linalg.norm(N) / np.sqrt(N.size)
    est = np.abs(S) > thr
    tru = S0 != 0
    denom = est.sum() + tru.sum()
    return 1.0 if denom == 0 else float(2 * np.sum(est & tru) / denom)
