"""Statistical assessment of a scalar biomarker.

Group tests, effect sizes, the longitudinal minimum sample size, ROC analysis
with nearest-point cutoffs and DeLong intervals, a univariate Cox model, the
Kaplan-Meier estimator, the log-rank test, Pearson correlation and enrichment
projections. Distribution functions come from :mod:`scipy.stats`; the
estimators themselves are written out here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .roi import replicate_rng

Z95 = sps.norm.ppf(0.975)


class DegenerateDataError(ValueError):
    """The statistic is undefined for this input (zero variance, one class...)."""


class CoxDivergenceError(DegenerateDataError):
    """The partial likelihood has no finite maximizer."""


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p: float
    df: float | tuple = float("nan")
    note: str = ""


@dataclass(frozen=True)
class PairedSeries:
    baseline: np.ndarray
    followup: np.ndarray
    subject_ids: tuple = ()

    def __post_init__(self):
        b = np.asarray(self.baseline, dtype=float).ravel()
        f = np.asarray(self.followup, dtype=float).ravel()
        if b.shape != f.shape:
            raise ValueError("baseline and followup must have equal lengths")
        if b.size < 2:
            raise ValueError("need at least 2 subjects")
        object.__setattr__(self, "baseline", b)
        object.__setattr__(self, "followup", f)

    @property
    def change(self) -> np.ndarray:
        return self.followup - self.baseline


# --- group comparisons --------------------------------------------------------------

def paired_t(series: PairedSeries) -> TestResult:
    d = series.change
    n = d.size
    sd = d.std(ddof=1)
    mean = d.mean()
    if sd == 0:
        if mean == 0:
            return TestResult(0.0, 1.0, n - 1)
        return TestResult(math.copysign(math.inf, mean), 0.0, n - 1,
                          "degenerate: constant nonzero shift")
    t = mean / (sd / math.sqrt(n))
    return TestResult(t, float(2 * sps.t.sf(abs(t), n - 1)), n - 1)


def cohens_d_independent(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least 2 values")
    pooled = math.sqrt(((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1))
                       / (a.size + b.size - 2))
    if pooled == 0:
        raise DegenerateDataError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / pooled)


def cohens_d_paired(series: PairedSeries) -> float:
    d = series.change
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateDataError("standard deviation of the differences is zero")
    return float(d.mean() / sd)


def anova_oneway(*groups) -> TestResult:
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2 or any(g.size < 2 for g in groups):
        raise ValueError("need >= 2 groups of >= 2 observations")
    k = len(groups)
    N = sum(g.size for g in groups)
    grand = np.concatenate(groups).mean()
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    dfb, dfw = k - 1, N - k
    if ssw == 0:
        if ssb == 0:
            return TestResult(0.0, 1.0, (dfb, dfw))
        return TestResult(math.inf, 0.0, (dfb, dfw), "zero within-group variance")
    F = (ssb / dfb) / (ssw / dfw)
    return TestResult(float(F), float(sps.f.sf(F, dfb, dfw)), (dfb, dfw))


def chi_square_2x2(table, correction: bool = False) -> TestResult:
    """Pearson chi-square on a 2x2 table of counts (1 df)."""
    t = np.asarray(table, dtype=float)
    if t.shape != (2, 2) or np.any(t < 0):
        raise ValueError("table must be a 2x2 array of nonnegative counts")
    n = t.sum()
    rows, cols = t.sum(axis=1), t.sum(axis=0)
    if n == 0 or np.any(rows == 0) or np.any(cols == 0):
        return TestResult(0.0, 1.0, 1, "empty margin")
    expected = np.outer(rows, cols) / n
    dev = np.abs(t - expected)
    if correction:
        dev = np.maximum(dev - 0.5, 0.0)
    chi2 = float((dev ** 2 / expected).sum())
    return TestResult(chi2, float(sps.chi2.sf(chi2, 1)), 1)


# --- sample size ------------------------------------------------------------------

def sample_size_constant(power: float = 0.8, alpha: float = 0.05) -> float:
    """Per-arm constant ``2 (z_{1-alpha/2} + z_power)^2`` for a two-arm trial."""
    if not (0 < power < 1 and 0 < alpha < 1):
        raise ValueError("power and alpha must lie in (0, 1)")
    return 2.0 * (sps.norm.ppf(1 - alpha / 2) + sps.norm.ppf(power)) ** 2


def min_sample_size(series: PairedSeries, reduction: float = 0.25, power: float = 0.8,
                    alpha: float = 0.05, interval_months: float = 24.0) -> int:
    """Subjects per arm to detect a ``reduction`` of the mean annual change.

    The mean change over ``interval_months`` is annualized; ``sigma`` is the SD of
    the per-subject changes as observed. Pass ``interval_months=12`` to use the
    raw change.
    """
    if not 0 < reduction <= 1:
        raise ValueError("reduction must lie in (0, 1]")
    d = series.change
    annual = abs(d.mean()) * 12.0 / interval_months
    if annual == 0:
        raise DegenerateDataError("mean change is zero: sample size is unbounded")
    C = sample_size_constant(power, alpha)
    return int(math.ceil(C * d.var(ddof=1) / (reduction * annual) ** 2))


def enriched_sample_size(n_base: float, es: float, es_enriched: float) -> float:
    """``N' = (ES / ES')^2 N``."""
    if es_enriched == 0:
        return math.inf
    return (es / es_enriched) ** 2 * n_base


def percentile(reference, pct: float) -> float:
    """Linear-interpolation percentile with inclusive endpoints (0 -> min, 100 -> max)."""
    ref = np.asarray(reference, dtype=float)
    if ref.size == 0:
        raise ValueError("reference is empty")
    if not 0 <= pct <= 100:
        raise ValueError("pct must lie in [0, 100]")
    return float(np.percentile(ref, pct, method="linear"))


def _boot_quantile(boot, pct):
    # degenerate resamples give N' = inf; interpolating between two infs is inf, not nan
    with np.errstate(invalid="ignore"):
        q = float(np.percentile(boot, pct))
    return math.inf if math.isnan(q) else q


@dataclass(frozen=True)
class EnrichmentRow:
    percentile: float
    cutoff: float
    n_selected: int
    es_enriched: float
    n_prime: float
    n_prime_ci: tuple
    available: bool = True


def enrichment(series: PairedSeries, scores, reference_scores, percentiles=(60, 75, 90),
               n_boot: int = 1000, seed: int = 0, **size_kwargs):
    """Projected sample sizes when enrolling only subjects scoring above a cutoff.

    Cutoffs are percentiles of ``reference_scores``. Effect sizes are paired
    Cohen's d of the change. Returns ``(N, ES, rows)``; ``N`` is the unenriched
    minimum sample size.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size != series.change.size:
        raise ValueError("one score per subject required")
    N = min_sample_size(series, **size_kwargs)
    es = cohens_d_paired(series)
    change = series.change
    rows = []
    for pct in percentiles:
        cut = percentile(reference_scores, pct)
        sel = change[scores > cut]
        if sel.size < 2 or sel.std(ddof=1) == 0:
            rows.append(EnrichmentRow(pct, cut, int(sel.size), math.nan, math.nan,
                                      (math.nan, math.nan), False))
            continue
        es_e = sel.mean() / sel.std(ddof=1)
        boot = np.empty(n_boot)
        for b in range(n_boot):
            s = sel[replicate_rng(seed, b).integers(0, sel.size, sel.size)]
            sd = s.std(ddof=1)
            boot[b] = enriched_sample_size(N, es, s.mean() / sd) if sd > 0 else math.inf
        ci = (_boot_quantile(boot, 2.5), _boot_quantile(boot, 97.5))
        rows.append(EnrichmentRow(pct, cut, int(sel.size), float(es_e),
                                  enriched_sample_size(N, es, es_e), ci))
    return N, es, rows


# --- ROC ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RocResult:
    thresholds: np.ndarray
    sensitivities: np.ndarray
    specificities: np.ndarray
    auc: float
    auc_ci: tuple
    optimal_cutoff: float
    orientation: str
    auc_se: float = 0.0

    @property
    def optimal_index(self) -> int:
        return int(np.flatnonzero(self.thresholds == self.optimal_cutoff)[0])


def _delong_se(pos, neg) -> tuple[float, float]:
    # structural components: V10_i = P(neg < pos_i) + 0.5 P(tie)
    diff = pos[:, None] - neg[None, :]
    psi = (diff > 0) + 0.5 * (diff == 0)
    auc = psi.mean()
    v10 = psi.mean(axis=1)
    v01 = psi.mean(axis=0)
    m, n = pos.size, neg.size
    s10 = v10.var(ddof=1) if m > 1 else 0.0
    s01 = v01.var(ddof=1) if n > 1 else 0.0
    return float(auc), math.sqrt(s10 / m + s01 / n)


def roc(scores, labels, orientation: str = "higher_is_positive") -> RocResult:
    """Empirical ROC over every distinct score.

    A subject is called positive when its (oriented) score is at or beyond the
    threshold. The cutoff is the threshold nearest to perfect classification,
    ties broken toward higher sensitivity.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must align")
    if y.all() or not y.any():
        raise DegenerateDataError("ROC needs both classes")
    if orientation not in ("higher_is_positive", "lower_is_positive"):
        raise ValueError(f"unknown orientation {orientation!r}")
    sign = 1.0 if orientation == "higher_is_positive" else -1.0
    o = sign * s
    pos, neg = o[y], o[~y]

    levels = np.unique(o)[::-1]
    thr = np.concatenate([[np.inf], levels])
    sens = np.array([(pos >= t).mean() for t in thr])
    spec = np.array([(neg < t).mean() for t in thr])

    fpr = 1 - spec
    auc_trap = float(np.sum(np.diff(fpr) * (sens[1:] + sens[:-1]) / 2))
    auc, se = _delong_se(pos, neg)
    if abs(auc - auc_trap) > 1e-9:
        raise AssertionError("trapezoid and U-statistic AUC disagree")

    dist = (1 - sens) ** 2 + (1 - spec) ** 2
    cand = np.flatnonzero(np.isclose(dist, dist.min(), rtol=0, atol=1e-15))
    best = cand[np.argmax(sens[cand])]
    ci = (max(0.0, auc - Z95 * se), min(1.0, auc + Z95 * se))
    return RocResult(sign * thr, sens, spec, auc, ci, float(sign * thr[best]), orientation, se)


def classification_error(scores, labels, cutoff: float,
                         orientation: str = "higher_is_positive") -> float:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    pred = s >= cutoff if orientation == "higher_is_positive" else s <= cutoff
    return float(np.mean(pred != y))


# --- survival ----------------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: bool
    marker_positive: bool

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError(f"survival time must be nonnegative, got {self.time}")


def _arrays(records):
    t = np.array([r.time for r in records], dtype=float)
    e = np.array([r.event for r in records], dtype=bool)
    x = np.array([r.marker_positive for r in records], dtype=float)
    return t, e, x


@dataclass(frozen=True)
class CoxResult:
    beta: float
    hr: float
    hr_ci95: tuple
    p: float
    se: float
    iterations: int
    ties: str = "breslow"


def _cox_terms(beta, t, e, x, event_times):
    ll = grad = hess = 0.0
    w = np.exp(beta * x)
    for et in event_times:
        at_risk = t >= et
        dead = (t == et) & e
        d = dead.sum()
        s0 = w[at_risk].sum()
        s1 = (w * x)[at_risk].sum()
        s2 = (w * x * x)[at_risk].sum()
        xbar = s1 / s0
        ll += beta * x[dead].sum() - d * math.log(s0)
        grad += x[dead].sum() - d * xbar
        hess -= d * (s2 / s0 - xbar * xbar)
    return ll, grad, hess


def _monotone_direction(t, e, x, event_times):
    """+1 / -1 if the partial likelihood increases without bound in beta, else 0."""
    up = down = True
    for et in event_times:
        at_risk = t >= et
        dead = (t == et) & e
        xr = x[at_risk]
        if np.any(x[dead] != xr.max()):
            up = False
        if np.any(x[dead] != xr.min()):
            down = False
    if up and down:
        return 2
    return 1 if up else (-1 if down else 0)


def cox_univariate(records, max_iter: int = 50, tol: float = 1e-10) -> CoxResult:
    """Cox model with one binary covariate, Breslow ties, step-halving Newton."""
    t, e, x = _arrays(records)
    if not e.any():
        raise DegenerateDataError("no events: hazard ratio is not estimable")
    event_times = np.unique(t[e])
    direction = _monotone_direction(t, e, x, event_times)
    if direction == 2:
        raise DegenerateDataError("covariate is constant within every risk set")
    if direction:
        n1 = int(e[x == 1].sum())
        n0 = int(e[x == 0].sum())
        raise CoxDivergenceError(
            f"monotone partial likelihood: beta -> {'+' if direction > 0 else '-'}inf "
            f"(events marker+={n1}, marker-={n0}; every event occurs in the "
            f"{'highest' if direction > 0 else 'lowest'} covariate level of its risk set)")

    beta = 0.0
    ll, g, h = _cox_terms(beta, t, e, x, event_times)
    for it in range(1, max_iter + 1):
        if h >= 0:
            raise CoxDivergenceError("information is not positive; check the covariate")
        step = -g / h
        while True:
            nb = beta + step
            nll, ng, nh = _cox_terms(nb, t, e, x, event_times)
            if nll >= ll - 1e-12 or abs(step) < 1e-12:
                break
            step /= 2
        beta, ll, g, h = nb, nll, ng, nh
        if abs(step) < tol or abs(g) < tol:
            break
    else:
        raise CoxDivergenceError(f"Newton did not converge in {max_iter} iterations")
    se = math.sqrt(-1.0 / h)
    z = beta / se
    return CoxResult(beta, math.exp(beta), (math.exp(beta - Z95 * se), math.exp(beta + Z95 * se)),
                     float(2 * sps.norm.sf(abs(z))), se, it)


@dataclass(frozen=True)
class KaplanMeier:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def at(self, time: float) -> float:
        """S(time), right-continuous step function."""
        k = np.searchsorted(self.times, time, side="right")
        return 1.0 if k == 0 else float(self.survival[k - 1])


def kaplan_meier(records) -> KaplanMeier:
    """Product-limit estimate with Greenwood variance and log-minus-log 95% bands.

    Steps are reported at event times only.
    """
    t, e, _ = _arrays(records)
    if t.size == 0:
        raise ValueError("no records")
    times = np.unique(t[e])
    surv, nrisk, nev, lo, hi = [], [], [], [], []
    s = 1.0
    green = 0.0
    for et in times:
        n = int(np.sum(t >= et))
        d = int(np.sum((t == et) & e))
        s *= 1.0 - d / n
        if n > d:
            green += d / (n * (n - d))
        surv.append(s)
        nrisk.append(n)
        nev.append(d)
        if 0 < s < 1:
            se = math.sqrt(green) / abs(math.log(s))
            lo.append(s ** math.exp(Z95 * se))
            hi.append(s ** math.exp(-Z95 * se))
        else:
            lo.append(s)
            hi.append(s)
    return KaplanMeier(times, np.array(surv), np.array(nrisk), np.array(nev),
                       np.array(lo), np.array(hi))


def log_rank(group_pos, group_neg) -> TestResult:
    """Two-group log-rank chi-square (1 df) over the pooled event times."""
    tp, ep, _ = _arrays(group_pos)
    tn, en, _ = _arrays(group_neg)
    if tp.size == 0 or tn.size == 0:
        raise ValueError("both groups must be nonempty")
    t = np.concatenate([tp, tn])
    e = np.concatenate([ep, en])
    g = np.concatenate([np.ones(tp.size, bool), np.zeros(tn.size, bool)])
    o_minus_e = var = 0.0
    for et in np.unique(t[e]):
        risk = t >= et
        n = risk.sum()
        n1 = (risk & g).sum()
        d = ((t == et) & e).sum()
        d1 = ((t == et) & e & g).sum()
        o_minus_e += d1 - d * n1 / n
        if n > 1:
            var += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
    if var == 0:
        return TestResult(0.0, 1.0, 1, "no informative event times")
    chi2 = o_minus_e ** 2 / var
    return TestResult(float(chi2), float(sps.chi2.sf(chi2, 1)), 1)


# --- correlation -------------------------------------------------------------------

@dataclass(frozen=True)
class PearsonResult:
    r: float
    r_ci95: tuple
    p: float
    n: int


def pearson(x, y) -> PearsonResult:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need two aligned samples of size >= 3")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise DegenerateDataError("zero variance")
    r = float(np.clip(xc @ yc / (sx * sy), -1.0, 1.0))
    n = x.size
    if abs(r) == 1.0:
        return PearsonResult(r, (r, r), 0.0, n)
    t = r * math.sqrt((n - 2) / (1 - r * r))
    p = float(2 * sps.t.sf(abs(t), n - 2))
    if n > 3:
        z, half = math.atanh(r), Z95 / math.sqrt(n - 3)
        ci = (math.tanh(z - half), math.tanh(z + half))
    else:
        ci = (-1.0, 1.0)
    return PearsonResult(r, ci, p, n)


@dataclass
class AssessmentTable:
    """Loose container used by the CLI to serialize a batch of results."""

    rows: dict = field(default_factory=dict)
