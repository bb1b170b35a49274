"""End-to-end orchestration: decompose -> ROI -> template -> scores -> statistics.

A run is described by a sectioned INI file. Every stage writes its outputs to
the run directory, and a manifest records parameters, seeds, library versions
and SHA-256 hashes of every input and output. It contains no timestamps, so
identical inputs give a byte-identical manifest.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .io import FeatureMatrix, InputError, _flag, load_cohort, save_features
from .mesh import TriangleMesh
from .roi import RoiConfig, extract_roi, write_overlay
from .solver import SolverConfig, SolverError, decompose
from .stats import (DegenerateDataError, PairedSeries, SurvivalRecord, anova_oneway,
                    classification_error, cohens_d_independent, cohens_d_paired, cox_univariate,
                    enrichment, kaplan_meier, log_rank, min_sample_size, paired_t, pearson, roc)
from .umi import build_template, umi_batch

VERSION = "0.1.0"
LAMBDA_GRID = tuple(round(0.003 + 0.001 * k, 3) for k in range(12))


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class ConfigError(InputError):
    pass


@dataclass(frozen=True)
class StatsConfig:
    percentiles: tuple = (60.0, 75.0, 90.0)
    n_boot: int = 1000
    reduction: float = 0.25
    power: float = 0.8
    alpha: float = 0.05
    interval_months: float = 24.0
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    features_baseline: Path
    cohort: Path
    mesh: Path
    output: Path
    features_m24: Path | None = None
    survival: Path | None = None
    fmt: str | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    roi_seed: int = 0
    stats: StatsConfig = field(default_factory=StatsConfig)


def _opt(sec, key, conv, default=None):
    if sec is None or key not in sec or sec[key].strip() == "":
        return default
    try:
        return conv(sec[key])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: {exc}") from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    cp = configparser.ConfigParser()
    cp.read(path)
    base = path.parent

    def p(sec, key, required=True):
        v = _opt(cp[sec] if sec in cp else None, key, str)
        if v is None:
            if required:
                raise ConfigError(f"{path}: [{sec}] {key} is required")
            return None
        q = Path(v)
        return q if q.is_absolute() else base / q

    feats = p("input", "features_baseline")
    cohort = p("input", "cohort")
    mesh = p("input", "mesh")
    m24 = p("input", "features_m24", False)
    surv = p("input", "survival", False)
    for q in (feats, cohort, mesh, m24, surv):
        if q is not None and not q.exists():
            raise ConfigError(f"{path}: input file {q} does not exist")
    out = p("output", "dir", False) or base / "run"
    fmt = _opt(cp["input"], "format", str)

    s = cp["solver"] if "solver" in cp else None
    solver = SolverConfig(lam=_opt(s, "lam", float), alpha=_opt(s, "alpha", float, 1.5),
                          tau=_opt(s, "tau", float, 1e-3), epsilon=_opt(s, "epsilon", float),
                          rank_budget=_opt(s, "rank_budget", int),
                          max_iters=_opt(s, "max_iters", int, 500), seed=_opt(s, "seed", int, 0))
    r = cp["roi"] if "roi" in cp else None
    roi = RoiConfig(n_perm=_opt(r, "n_perm", int, 5000), p_thresh=_opt(r, "p_thresh", float, 1e-3),
                    method=_opt(r, "method", str, "permutation"), q=_opt(r, "q", float, 1e-4),
                    features=_opt(r, "features", str, "lowrank"), solver=solver)
    t = cp["stats"] if "stats" in cp else None
    pct = _opt(t, "percentiles", lambda v: tuple(float(x) for x in v.split(",")), (60.0, 75.0, 90.0))
    stats = StatsConfig(pct, _opt(t, "n_boot", int, 1000), _opt(t, "reduction", float, 0.25),
                        _opt(t, "power", float, 0.8), _opt(t, "alpha", float, 0.05),
                        _opt(t, "interval_months", float, 24.0), _opt(t, "seed", int, 0))
    return PipelineConfig(feats, cohort, mesh, out, m24, surv, fmt, solver, roi,
                          _opt(r, "seed", int, 0), stats)


def write_config(path, cfg: PipelineConfig) -> None:
    cp = configparser.ConfigParser()
    rel = lambda q: "" if q is None else str(q)  # noqa: E731
    cp["input"] = {"features_baseline": rel(cfg.features_baseline), "cohort": rel(cfg.cohort),
                   "mesh": rel(cfg.mesh), "features_m24": rel(cfg.features_m24),
                   "survival": rel(cfg.survival), "format": cfg.fmt or ""}
    cp["output"] = {"dir": rel(cfg.output)}
    s = cfg.solver
    cp["solver"] = {"lam": "" if s.lam is None else repr(s.lam), "alpha": repr(s.alpha),
                    "tau": repr(s.tau), "epsilon": "" if s.epsilon is None else repr(s.epsilon),
                    "rank_budget": "" if s.rank_budget is None else str(s.rank_budget),
                    "max_iters": str(s.max_iters), "seed": str(s.seed)}
    r = cfg.roi
    cp["roi"] = {"n_perm": str(r.n_perm), "p_thresh": repr(r.p_thresh), "method": r.method,
                 "q": repr(r.q), "features": r.features, "seed": str(cfg.roi_seed)}
    t = cfg.stats
    cp["stats"] = {"percentiles": ",".join(repr(x) for x in t.percentiles), "n_boot": str(t.n_boot),
                   "reduction": repr(t.reduction), "power": repr(t.power), "alpha": repr(t.alpha),
                   "interval_months": repr(t.interval_months), "seed": str(t.seed)}
    with open(path, "w") as fh:
        cp.write(fh)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if hasattr(x, "__dataclass_fields__"):
        x = asdict(x)
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=1, sort_keys=True)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# --- statistics stage ---------------------------------------------------------------

def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (DegenerateDataError, ValueError) as exc:
        return {"unavailable": str(exc)}


def _as_dict(res):
    if isinstance(res, dict):
        return res
    return asdict(res) if hasattr(res, "__dataclass_fields__") else res


def run_statistics(scores: dict, cohort, survival_rows, cfg: StatsConfig, out: Path) -> dict:
    """All downstream analyses of the per-subject scores.

    ``scores`` maps ``(subject_id, timepoint)`` to a UMI value.
    """
    res = {}
    base = {g: [(r, scores[(r.subject_id, "baseline")]) for r in cohort.select(group=g, timepoint="baseline")]
            for g in ("AD", "MCI", "CU")}
    vals = {g: np.array([v for _, v in rows]) for g, rows in base.items()}

    groups = [vals[g] for g in ("AD", "MCI", "CU") if vals[g].size >= 2]
    if len(groups) >= 2:
        res["anova_baseline"] = _as_dict(_safe(anova_oneway, *groups))
    if vals["AD"].size >= 2 and vals["CU"].size >= 2:
        res["cohens_d_ad_vs_cu"] = _safe(cohens_d_independent, vals["AD"], vals["CU"])
        labels = np.r_[np.ones(vals["AD"].size), np.zeros(vals["CU"].size)]
        r = roc(np.r_[vals["AD"], vals["CU"]], labels)
        res["roc_ad_vs_cu"] = {"auc": r.auc, "auc_ci95": r.auc_ci, "cutoff": r.optimal_cutoff,
                               "error": classification_error(np.r_[vals["AD"], vals["CU"]], labels,
                                                             r.optimal_cutoff)}
        _write_rows(out / "roc_ad_vs_cu.csv", ["threshold", "sensitivity", "specificity"],
                    zip(r.thresholds, r.sensitivities, r.specificities))

    # longitudinal change per group
    longitudinal = {}
    pairs = {}
    for g in ("AD", "MCI", "CU"):
        ids = [r.subject_id for r in cohort.select(group=g, timepoint="m24")]
        ids = [s for s in ids if (s, "baseline") in scores]
        if len(ids) < 2:
            continue
        ps = PairedSeries(np.array([scores[(s, "baseline")] for s in ids]),
                          np.array([scores[(s, "m24")] for s in ids]), tuple(ids))
        pairs[g] = ps
        longitudinal[g] = {
            "paired_t": _as_dict(_safe(paired_t, ps)),
            "cohens_d": _safe(cohens_d_paired, ps),
            "min_sample_size": _safe(min_sample_size, ps, cfg.reduction, cfg.power, cfg.alpha,
                                     cfg.interval_months),
        }
    if longitudinal:
        res["longitudinal"] = longitudinal

    # clinical correlations at baseline
    corr = {}
    rows = [(r, scores[(r.subject_id, "baseline")]) for r in cohort.select(timepoint="baseline")]
    for score_name in ("MMSE", "CDR-SB", "ADAS-Cog11", "AVLT-Total"):
        xs = [(v, r.scores[score_name]) for r, v in rows if score_name in r.scores]
        if len(xs) >= 3:
            x, y = np.array(xs).T
            corr[score_name] = _as_dict(_safe(pearson, x, y))
    if corr:
        res["pearson"] = corr

    # enrichment of the MCI trial population, reference = amyloid-negative CU
    ref = [scores[(r.subject_id, "baseline")] for r in cohort.select("CU", "baseline", "negative")]
    if "MCI" in pairs and len(ref) > 0:
        ps = pairs["MCI"]
        try:
            N, es, table = enrichment(ps, ps.baseline, ref, cfg.percentiles, cfg.n_boot, cfg.seed,
                                      reduction=cfg.reduction, power=cfg.power, alpha=cfg.alpha,
                                      interval_months=cfg.interval_months)
            res["enrichment_mci"] = {"N": N, "ES": es, "rows": [asdict(t) for t in table]}
        except (DegenerateDataError, ValueError) as exc:
            res["enrichment_mci"] = {"unavailable": str(exc)}

    # conversion analysis
    if survival_rows:
        ids = [s for s, _, _ in survival_rows if (s, "baseline") in scores]
        if len(ids) != len(survival_rows):
            raise InputError("survival rows reference subjects without baseline features")
        u = np.array([scores[(s, "baseline")] for s, _, _ in survival_rows])
        event = np.array([e for _, _, e in survival_rows], bool)
        conv = {}
        if event.any() and not event.all():
            r = roc(u, event)
            conv["roc"] = {"auc": r.auc, "auc_ci95": r.auc_ci, "cutoff": r.optimal_cutoff}
            marker = u >= r.optimal_cutoff
            recs = [SurvivalRecord(t, e, bool(mk)) for (_, t, e), mk in zip(survival_rows, marker)]
            conv["cox"] = _as_dict(_safe(cox_univariate, recs))
            pos = [x for x in recs if x.marker_positive]
            neg = [x for x in recs if not x.marker_positive]
            if pos and neg:
                conv["log_rank"] = _as_dict(log_rank(pos, neg))
                km_rows = []
                for label, grp in (("positive", pos), ("negative", neg)):
                    km = kaplan_meier(grp)
                    km_rows += [(label, t, s, lo, hi, n, d) for t, s, lo, hi, n, d in
                                zip(km.times, km.survival, km.lower, km.upper, km.at_risk, km.events)]
                _write_rows(out / "km.csv", ["marker", "time", "survival", "lower", "upper",
                                             "at_risk", "events"], km_rows)
        else:
            conv["unavailable"] = "need both converters and non-converters"
        res["conversion"] = conv
    return res


# --- orchestration -------------------------------------------------------------------

def _read_survival_table(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"subject_id", "time", "event"} <= set(reader.fieldnames or []):
            raise InputError(f"{path}: pipeline survival file needs subject_id,time,event")
        out = []
        for k, d in enumerate(reader, start=2):
            try:
                out.append((d["subject_id"], float(d["time"]), _flag(d["event"])))
            except ValueError as exc:
                raise InputError(f"{path} line {k}: {exc}") from exc
        return out


def _group_matrix(fm: FeatureMatrix, rows):
    return fm.values[:, [r.feature_column for r in rows]]


def run_pipeline(config) -> Path:
    """Execute the full pipeline described by ``config`` (path or PipelineConfig).

    Returns the output directory. On failure a ``FAILED`` marker naming the
    stage is written next to the partial outputs and :class:`PipelineError`
    is raised.
    """
    cfg = config if isinstance(config, PipelineConfig) else load_config(config)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    produced = []
    stage = "load"
    try:
        paths = {"baseline": cfg.features_baseline}
        if cfg.features_m24 is not None:
            paths["m24"] = cfg.features_m24
        feats, cohort, mesh = load_cohort(paths, cfg.cohort, cfg.mesh, cfg.fmt)
        ad_rows = cohort.select("AD", "baseline", "positive")
        cu_rows = cohort.select("CU", "baseline", "negative")
        if len(ad_rows) < 2 or len(cu_rows) < 2:
            raise InputError(f"need >= 2 amyloid-positive AD and amyloid-negative CU subjects at "
                             f"baseline, found {len(ad_rows)} and {len(cu_rows)}")
        A_ad = _group_matrix(feats["baseline"], ad_rows)
        A_cu = _group_matrix(feats["baseline"], cu_rows)

        stage = "decompose"
        res_ad = decompose(A_ad, mesh, cfg.solver)
        res_cu = decompose(A_cu, mesh, cfg.solver)
        for tag, res in (("ad", res_ad), ("cu", res_cu)):
            res.write_diagnostics(out / f"decompose_{tag}.json")
            save_features(out / f"L_{tag}.bin", FeatureMatrix(res.L), "bin")
            produced += [f"decompose_{tag}.json", f"L_{tag}.bin"]

        stage = "roi"
        src_ad, src_cu = (res_ad.L, res_cu.L) if cfg.roi.features == "lowrank" else (A_ad, A_cu)
        mask = extract_roi(src_ad, src_cu, mesh, RoiConfig(cfg.roi.n_perm, cfg.roi.p_thresh,
                           cfg.roi.method, cfg.roi.q, "raw"), cfg.roi_seed)
        mask.to_csv(out / "roi.csv")
        write_overlay(out / "roi_overlay.txt", mesh, mask.selected.astype(float))
        produced += ["roi.csv", "roi_overlay.txt"]

        stage = "template"
        template = build_template(src_ad, src_cu, mask)
        template.to_json(out / "template.json")
        produced.append("template.json")

        stage = "umi"
        scores = {}
        table = []
        for tp, fm in feats.items():
            rows = cohort.select(timepoint=tp)
            u = umi_batch(_group_matrix(fm, rows), template)
            for r, v in zip(rows, u):
                scores[(r.subject_id, tp)] = float(v)
                table.append((r.subject_id, r.group, r.amyloid, tp, float(v)))
        _write_rows(out / "umi.csv", ["subject_id", "group", "amyloid", "timepoint", "umi"], table)
        produced.append("umi.csv")

        stage = "stats"
        surv = _read_survival_table(cfg.survival) if cfg.survival else None
        stats = run_statistics(scores, cohort, surv, cfg.stats, out)
        stats["roi_size"] = mask.size
        stats["rank"] = {"ad": res_ad.rank, "cu": res_cu.rank}
        stats["converged"] = {"ad": res_ad.converged, "cu": res_cu.converged}
        write_json(out / "stats.json", stats)
        produced.append("stats.json")
        for extra in ("roc_ad_vs_cu.csv", "km.csv"):
            if (out / extra).exists():
                produced.append(extra)

        stage = "manifest"
        inputs = {k: v for k, v in (("features_baseline", cfg.features_baseline),
                                    ("features_m24", cfg.features_m24), ("cohort", cfg.cohort),
                                    ("mesh", cfg.mesh), ("survival", cfg.survival)) if v is not None}
        manifest = {
            "package": {"name": "morphoumi", "version": VERSION},
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "parameters": {"solver": asdict(cfg.solver), "resolved_solver": {
                               "ad": asdict(res_ad.config), "cu": asdict(res_cu.config)},
                           "roi": {k: v for k, v in asdict(cfg.roi).items() if k != "solver"},
                           "stats": asdict(cfg.stats)},
            "seeds": {"solver": cfg.solver.seed, "roi": cfg.roi_seed, "stats": cfg.stats.seed},
            "inputs": {k: {"file": Path(v).name, "sha256": sha256(v)} for k, v in inputs.items()},
            "outputs": {name: sha256(out / name) for name in sorted(set(produced))},
        }
        write_json(out / "manifest.json", manifest)
    except (InputError, SolverError, DegenerateDataError, ValueError, OSError) as exc:
        marker.write_text(f"stage: {stage}\ncause: {type(exc).__name__}: {exc}\n")
        raise PipelineError(stage, exc) from exc
    return out


# --- lambda sensitivity -------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    lam: float
    sparse_norm_ad: float
    sparse_norm_cu: float
    rank_ad: int
    rank_cu: int
    roi_size: int
    holdout_error: float


def sweep_lambda(A_ad, A_cu, holdout_ad, holdout_cu, mesh: TriangleMesh, grid=LAMBDA_GRID,
                 solver: SolverConfig | None = None, n_perm: int = 1000, p_thresh: float = 1e-3,
                 seed: int = 0) -> list:
    """Decompose, select an ROI and score a holdout set for each ``lam``.

    The cutoff is the nearest-point ROC cutoff on the training subjects; the
    holdout error uses that cutoff unchanged.
    """
    solver = solver or SolverConfig()
    A_ad, A_cu = np.asarray(A_ad, float), np.asarray(A_cu, float)
    train_lab = np.r_[np.ones(A_ad.shape[1]), np.zeros(A_cu.shape[1])]
    hold = np.hstack([holdout_ad, holdout_cu])
    hold_lab = np.r_[np.ones(np.shape(holdout_ad)[1]), np.zeros(np.shape(holdout_cu)[1])]
    rows = []
    for lam in grid:
        cfg = SolverConfig(lam=float(lam), alpha=solver.alpha, tau=solver.tau,
                           epsilon=solver.epsilon, rank_budget=solver.rank_budget,
                           max_iters=solver.max_iters, seed=solver.seed)
        ra, rc = decompose(A_ad, mesh, cfg), decompose(A_cu, mesh, cfg)
        mask = extract_roi(ra.L, rc.L, mesh, RoiConfig(n_perm, p_thresh, features="raw"), seed)
        err = math.nan
        if mask.size:
            try:
                t = build_template(ra.L, rc.L, mask)
                train = np.r_[umi_batch(A_ad, t), umi_batch(A_cu, t)]
                cut = roc(train, train_lab).optimal_cutoff
                err = classification_error(umi_batch(hold, t), hold_lab, cut)
            except (ValueError, DegenerateDataError):
                err = math.nan
        rows.append(SweepRow(float(lam), ra.sparse_norm, rc.sparse_norm, ra.rank, rc.rank,
                             mask.size, err))
    return rows


# --- synthetic run directories ------------------------------------------------------------

SYNTHETIC_SOLVER = SolverConfig(tau=1e-5)


def write_synthetic(cohort, directory, fmt: str = "csv", solver: SolverConfig | None = None,
                    roi: RoiConfig | None = None, roi_seed: int = 0) -> Path:
    """Write a generated cohort as pipeline inputs plus a ready-to-run ``config.ini``.

    Files: ``features_baseline``, ``features_m24``, ``cohort.csv``, ``mesh.txt``,
    ``survival.csv`` (MCI subjects), ``truth.json`` and ``spec.json``.
    """
    from .mesh import save_mesh
    from .synthetic import spec_to_dict

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = "bin" if fmt == "bin" else "csv"
    for tp in ("baseline", "m24"):
        save_features(d / f"features_{tp}.{ext}", cohort.stacked(tp), fmt)
    cohort.cohort.to_csv(d / "cohort.csv")
    save_mesh(d / "mesh.txt", cohort.mesh)
    mci = [r.subject_id for r in cohort.cohort.select("MCI", "baseline")]
    _write_rows(d / "survival.csv", ["subject_id", "time", "event", "marker_positive"],
                [(s, float(r.time), int(r.event), int(r.marker_positive))
                 for s, r in zip(mci, cohort.survival)])
    cohort.truth.to_json(d / "truth.json")
    write_json(d / "spec.json", spec_to_dict(cohort.spec))
    solver = solver or SYNTHETIC_SOLVER
    roi = roi or RoiConfig(solver=solver)
    cfg = PipelineConfig(Path(f"features_baseline.{ext}"), Path("cohort.csv"), Path("mesh.txt"),
                         Path("run"), Path(f"features_m24.{ext}"), Path("survival.csv"), fmt,
                         solver, roi, roi_seed, StatsConfig(seed=cohort.spec.seed))
    write_config(d / "config.ini", cfg)
    return d / "config.ini"
