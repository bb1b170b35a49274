"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 non-convergence
(outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .io import FeatureMatrix, InputError, load_features, read_survival, save_features
from .mesh import MeshError, load_mesh
from .pipeline import (LAMBDA_GRID, SYNTHETIC_SOLVER, ConfigError, PipelineError, run_pipeline,
                       sweep_lambda, write_json, write_synthetic, _write_rows)
from .roi import RoiConfig, RoiMask, extract_roi, stability_folds, write_overlay
from .solver import SolverConfig, SolverError, decompose
from .stats import (DegenerateDataError, PairedSeries, anova_oneway, chi_square_2x2,
                    cohens_d_independent, cohens_d_paired, cox_univariate, enrichment,
                    kaplan_meier, log_rank, min_sample_size, paired_t, pearson, roc)
from .synthetic import InfeasibleSpecError, SyntheticSpec, draw_subjects, generate_synthetic
from .umi import AtrophyTemplate, build_template, umi_batch

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 2, 3, 4


class NotConverged(Exception):
    pass


def _read_columns(path, names):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in names if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: missing columns {missing}")
        rows = list(reader)
    return {c: [r[c] for r in rows] for c in names}


def _floats(path, col, values):
    try:
        return np.array([float(v) for v in values])
    except ValueError as exc:
        raise InputError(f"{path}: column {col}: {exc}") from exc


def _emit(result, out):
    if out:
        write_json(out, result)
    else:
        from .pipeline import _jsonable
        json.dump(_jsonable(result), sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")


def _solver_cfg(a) -> SolverConfig:
    return SolverConfig(lam=a.lam, alpha=a.alpha, tau=a.tau, epsilon=a.epsilon,
                        rank_budget=a.rank_budget, max_iters=a.max_iters, seed=a.seed)


def _check_p_thresh(p_thresh, n_perm):
    if p_thresh <= 1.0 / (n_perm + 1):
        warnings.warn(f"p-thresh {p_thresh:g} is not above the smallest attainable permutation "
                      f"p-value 1/(n_perm+1) = {1 / (n_perm + 1):.3g}; the ROI will be empty",
                      stacklevel=2)


# --- commands ---------------------------------------------------------------------

def cmd_decompose(a):
    mesh = load_mesh(a.mesh)
    fm = load_features(a.features, a.format)
    res = decompose(fm.values, mesh, _solver_cfg(a))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = a.format or "csv"
    for name, M in (("L", res.L), ("S", res.S), ("N", res.N)):
        save_features(out / f"{name}.{ext}", FeatureMatrix(M, fm.subject_ids), ext)
    res.write_diagnostics(out / "diagnostics.json")
    if not res.converged:
        raise NotConverged(f"no convergence after {res.iters} iterations")


def cmd_roi(a):
    _check_p_thresh(a.p_thresh, a.n_perm)
    mesh = load_mesh(a.mesh)
    A = load_features(a.group_a, a.format).values
    B = load_features(a.group_b, a.format).values
    cfg = RoiConfig(a.n_perm, a.p_thresh, a.method, a.q, a.source, _solver_cfg(a))
    if a.folds:
        stab = stability_folds(A, B, mesh, a.folds, a.fraction, cfg, a.seed)
        stab.to_csv(a.out)
        if a.overlay:
            write_overlay(a.overlay, mesh, stab.counts.astype(float))
        print(f"full-count fraction {stab.full_count_fraction():.3f} over {a.folds} folds")
        return
    mask = extract_roi(A, B, mesh, cfg, a.seed)
    mask.to_csv(a.out)
    if a.overlay:
        write_overlay(a.overlay, mesh, mask.selected.astype(float))
    print(f"{mask.size} of {mask.selected.size} vertices selected")


def cmd_template(a):
    L_ad = load_features(a.l_ad, a.format).values
    L_cu = load_features(a.l_cu, a.format).values
    build_template(L_ad, L_cu, RoiMask.from_csv(a.roi)).to_json(a.out)


def cmd_umi(a):
    t = AtrophyTemplate.from_json(a.template)
    fm = load_features(a.features, a.format)
    u = umi_batch(fm.values, t)
    _write_rows(a.out, ["subject_id", "umi"], zip(fm.subject_ids, u.tolist()))


def cmd_simulate(a):
    spec = SyntheticSpec(m=a.m, n_ad=a.n, n_mci=a.n, n_cu=a.n, rank=a.rank,
                         atrophy_depth=a.depth, noise_sigma=a.sigma, seed=a.seed)
    cfg = write_synthetic(generate_synthetic(spec), a.out, a.format or "csv")
    print(cfg)


def cmd_sweep(a):
    spec = SyntheticSpec(m=a.m, n_ad=a.n, n_mci=0, n_cu=a.n, atrophy_depth=a.depth,
                         patch_radius=a.patch_radius, sparse_radius=a.sparse_radius, seed=a.seed)
    coh = generate_synthetic(spec)
    ha = draw_subjects(coh, "AD", a.holdout, 0).values
    hc = draw_subjects(coh, "CU", a.holdout, 1).values
    solver = SolverConfig(tau=a.tau, alpha=a.alpha)
    grid = LAMBDA_GRID if a.grid is None else tuple(float(x) for x in a.grid.split(","))
    rows = sweep_lambda(coh.group("AD").values, coh.group("CU").values, ha, hc, coh.mesh, grid,
                        solver, a.n_perm, a.p_thresh, a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = list(asdict(rows[0]))
    _write_rows(out / "sweep.csv", fields, [[getattr(r, f) for f in fields] for r in rows])
    write_json(out / "sweep.json", {"spec": asdict(spec), "rows": [asdict(r) for r in rows]})
    for r in rows:
        print(f"lam={r.lam:.3f} rank={r.rank_ad}/{r.rank_cu} sparse={r.sparse_norm_ad:.4g} "
              f"roi={r.roi_size} error={r.holdout_error:.4f}")


def cmd_run(a):
    out = run_pipeline(a.config)
    stats = json.loads((out / "stats.json").read_text())
    print(out)
    if not all(stats.get("converged", {}).values()):
        raise NotConverged("a group decomposition did not converge")


# --- stats subcommands ---------------------------------------------------------------

def _paired(path):
    d = _read_columns(path, ["baseline", "followup"])
    return PairedSeries(_floats(path, "baseline", d["baseline"]),
                        _floats(path, "followup", d["followup"]))


def _grouped(path):
    d = _read_columns(path, ["value", "group"])
    v = _floats(path, "value", d["value"])
    labels = list(dict.fromkeys(d["group"]))
    return labels, [v[[g == lab for g in d["group"]]] for lab in labels]


def stats_paired_t(a):
    _emit(paired_t(_paired(a.input)), a.out)


def stats_power(a):
    s = _paired(a.input)
    _emit({"n_per_arm": min_sample_size(s, a.reduction, a.power, a.alpha, a.interval_months)},
          a.out)


def stats_cohens_d(a):
    if a.paired:
        _emit({"d": cohens_d_paired(_paired(a.input))}, a.out)
        return
    labels, groups = _grouped(a.input)
    if len(groups) != 2:
        raise InputError(f"{a.input}: expected exactly 2 groups, found {labels}")
    _emit({"groups": labels, "d": cohens_d_independent(*groups)}, a.out)


def stats_anova(a):
    labels, groups = _grouped(a.input)
    _emit({"groups": labels, **asdict(anova_oneway(*groups))}, a.out)


def stats_chi2(a):
    try:
        t = np.array([float(x) for x in a.table.split(",")]).reshape(2, 2)
    except ValueError as exc:
        raise InputError(f"--table must be four comma-separated counts: {exc}") from exc
    _emit(chi_square_2x2(t, a.correction), a.out)


def stats_pearson(a):
    d = _read_columns(a.input, ["x", "y"])
    _emit(pearson(_floats(a.input, "x", d["x"]), _floats(a.input, "y", d["y"])), a.out)


def stats_roc(a):
    d = _read_columns(a.input, ["score", "label"])
    r = roc(_floats(a.input, "score", d["score"]), _floats(a.input, "label", d["label"]),
            a.orientation)
    if a.curve:
        _write_rows(a.curve, ["threshold", "sensitivity", "specificity"],
                    zip(r.thresholds, r.sensitivities, r.specificities))
    _emit({"auc": r.auc, "auc_ci95": r.auc_ci, "auc_se": r.auc_se, "cutoff": r.optimal_cutoff,
           "orientation": r.orientation}, a.out)


def stats_cox(a):
    _emit(cox_univariate(read_survival(a.input)), a.out)


def stats_km(a):
    recs = read_survival(a.input)
    pos = [r for r in recs if r.marker_positive]
    neg = [r for r in recs if not r.marker_positive]
    res = {}
    rows = []
    for label, grp in (("positive", pos), ("negative", neg)):
        if grp:
            km = kaplan_meier(grp)
            rows += [(label, *v) for v in zip(km.times, km.survival, km.lower, km.upper,
                                              km.at_risk, km.events)]
    if pos and neg:
        res["log_rank"] = log_rank(pos, neg)
    if a.curve:
        _write_rows(a.curve, ["marker", "time", "survival", "lower", "upper", "at_risk", "events"],
                    rows)
    res["steps"] = len(rows)
    _emit(res, a.out)


def stats_enrich(a):
    d = _read_columns(a.input, ["baseline", "followup", "score"])
    s = PairedSeries(_floats(a.input, "baseline", d["baseline"]),
                     _floats(a.input, "followup", d["followup"]))
    ref = _read_columns(a.reference, ["score"])["score"]
    pct = tuple(float(x) for x in a.percentiles.split(","))
    N, es, rows = enrichment(s, _floats(a.input, "score", d["score"]),
                             _floats(a.reference, "score", ref), pct, a.n_boot, a.seed,
                             reduction=a.reduction, power=a.power, alpha=a.alpha,
                             interval_months=a.interval_months)
    _emit({"N": N, "ES": es, "rows": [asdict(r) for r in rows]}, a.out)


# --- parser ---------------------------------------------------------------------------

def _solver_args(p):
    g = p.add_argument_group("solver")
    g.add_argument("--lam", type=float, default=None, help="sparsity weight (default 1/sqrt(max(m,n)))")
    g.add_argument("--alpha", type=float, default=1.5)
    g.add_argument("--tau", type=float, default=1e-3)
    g.add_argument("--epsilon", type=float, default=None)
    g.add_argument("--rank-budget", type=int, default=None)
    g.add_argument("--max-iters", type=int, default=500)


def _size_args(p):
    p.add_argument("--reduction", type=float, default=0.25)
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--interval-months", type=float, default=24.0)


def build_parser() -> argparse.ArgumentParser:
    def flags(top):
        # subcommand copies must not overwrite values given before the subcommand
        dflt = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--seed", type=int, default=dflt(0))
        p.add_argument("--threads", type=int, default=dflt(None), help="BLAS thread limit")
        p.add_argument("--format", choices=("csv", "bin"), default=dflt(None),
                       help="feature matrix format (default: by extension)")
        return p

    common = flags(False)
    ap = argparse.ArgumentParser(prog="morphoumi", parents=[flags(True)],
                                 description="Low-rank morphometry index toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", parents=[common], help="low-rank + sparse + noise split")
    p.add_argument("--features", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _solver_args(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("roi", parents=[common], help="permutation-test ROI")
    p.add_argument("--group-a", required=True)
    p.add_argument("--group-b", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", default=None)
    p.add_argument("--n-perm", type=int, default=5000)
    p.add_argument("--p-thresh", type=float, default=1e-3)
    p.add_argument("--method", choices=("permutation", "fdr"), default="permutation")
    p.add_argument("--q", type=float, default=1e-4)
    p.add_argument("--source", choices=("lowrank", "raw"), default="lowrank")
    p.add_argument("--folds", type=int, default=None, help="stability counting over subsampled folds")
    p.add_argument("--fraction", type=float, default=0.9)
    _solver_args(p)
    p.set_defaults(func=cmd_roi)

    p = sub.add_parser("template", parents=[common], help="atrophy template from L and ROI")
    p.add_argument("--l-ad", required=True)
    p.add_argument("--l-cu", required=True)
    p.add_argument("--roi", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_template)

    p = sub.add_parser("umi", parents=[common], help="score subjects against a template")
    p.add_argument("--features", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_umi)

    p = sub.add_parser("stats", parents=[common], help="statistical analyses")
    ss = p.add_subparsers(dest="stat", required=True)
    for name, func, doc in (("paired-t", stats_paired_t, "CSV columns baseline,followup"),
                            ("power", stats_power, "CSV columns baseline,followup"),
                            ("cohens-d", stats_cohens_d, "CSV value,group or baseline,followup"),
                            ("anova", stats_anova, "CSV columns value,group"),
                            ("chi2", stats_chi2, "2x2 table"),
                            ("pearson", stats_pearson, "CSV columns x,y"),
                            ("roc", stats_roc, "CSV columns score,label"),
                            ("cox", stats_cox, "CSV time,event,marker_positive"),
                            ("km", stats_km, "CSV time,event,marker_positive"),
                            ("enrich", stats_enrich, "CSV baseline,followup,score")):
        q = ss.add_parser(name, parents=[common], help=doc)
        if name != "chi2":
            q.add_argument("input")
        q.add_argument("--out", default=None, help="JSON output (default stdout)")
        q.set_defaults(func=func)
        if name == "power":
            _size_args(q)
        elif name == "cohens-d":
            q.add_argument("--paired", action="store_true")
        elif name == "chi2":
            q.add_argument("--table", required=True, help="a,b,c,d row-major counts")
            q.add_argument("--correction", action="store_true")
        elif name == "roc":
            q.add_argument("--orientation", default="higher_is_positive",
                           choices=("higher_is_positive", "lower_is_positive"))
            q.add_argument("--curve", default=None, help="CSV for the ROC curve")
        elif name == "km":
            q.add_argument("--curve", default=None, help="CSV for the step functions")
        elif name == "enrich":
            q.add_argument("--reference", required=True, help="CSV column score")
            q.add_argument("--percentiles", default="60,75,90")
            q.add_argument("--n-boot", type=int, default=1000)
            _size_args(q)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--n", type=int, default=60, help="subjects per group")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--depth", type=float, default=16.0, help="atrophy depth in percent")
    p.add_argument("--sigma", type=float, default=0.02)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-lambda", parents=[common], help="lambda sensitivity study")
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=20000)
    p.add_argument("--n", type=int, default=125, help="training subjects per group")
    p.add_argument("--holdout", type=int, default=500, help="holdout subjects per group")
    p.add_argument("--depth", type=float, default=16.0)
    p.add_argument("--patch-radius", type=int, default=8)
    p.add_argument("--sparse-radius", type=int, default=4)
    p.add_argument("--n-perm", type=int, default=200)
    p.add_argument("--p-thresh", type=float, default=1e-2)
    p.add_argument("--grid", default=None, help="comma-separated lambdas")
    p.add_argument("--tau", type=float, default=SYNTHETIC_SOLVER.tau)
    p.add_argument("--alpha", type=float, default=1.5)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("run", parents=[common], help="full pipeline from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    return ap


def _dispatch(a):
    if a.threads:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=a.threads):
            a.func(a)
    else:
        a.func(a)


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    try:
        _dispatch(a)
    except NotConverged as exc:
        print(f"warning: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, (SolverError, DegenerateDataError, FloatingPointError)):
            return EXIT_NUMERIC
        return EXIT_INPUT
    except (InputError, ConfigError, MeshError, InfeasibleSpecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, DegenerateDataError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
