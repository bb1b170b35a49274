import json
import subprocess
import sys

import numpy as np
import pytest

from morphoumi.cli import main
from morphoumi.io import FeatureMatrix, load_features, save_features
from morphoumi.mesh import save_mesh, sphere_mesh
from morphoumi.roi import RoiMask
from morphoumi.stats import chi_square_2x2


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(d), "--m", "400", "--n", "20", "--seed", "3"]) == 0
    return d


@pytest.fixture
def groups(tmp_path):
    mesh = sphere_mesh(150)
    rng = np.random.default_rng(0)
    a = 3.0 + 0.05 * rng.normal(size=(150, 12))
    b = 3.0 + 0.05 * rng.normal(size=(150, 12))
    a[:10] -= 0.3
    save_mesh(tmp_path / "mesh.txt", mesh)
    save_features(tmp_path / "a.csv", FeatureMatrix(a))
    save_features(tmp_path / "b.csv", FeatureMatrix(b))
    return tmp_path


def test_simulate_then_run(sim):
    assert {"config.ini", "mesh.txt", "cohort.csv", "truth.json"} <= {p.name for p in sim.iterdir()}
    assert main(["run", str(sim / "config.ini")]) == 0
    assert (sim / "run" / "manifest.json").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "morphoumi", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("decompose", "roi", "template", "umi", "stats", "simulate", "sweep-lambda", "run"):
        assert cmd in r.stdout


def test_missing_input_exit_2(tmp_path):
    assert main(["decompose", "--features", str(tmp_path / "x.csv"), "--mesh",
                 str(tmp_path / "m.txt"), "--out", str(tmp_path / "o")]) == 2


def test_run_missing_mesh_exit_2(sim, tmp_path):
    import shutil

    for f in sim.iterdir():
        if f.is_file() and f.name != "mesh.txt":
            shutil.copy(f, tmp_path / f.name)
    assert main(["run", str(tmp_path / "config.ini")]) == 2
    assert not (tmp_path / "run").exists()


def test_decompose_and_nonconvergence(groups, capsys):
    out = groups / "dec"
    assert main(["decompose", "--features", str(groups / "a.csv"), "--mesh",
                 str(groups / "mesh.txt"), "--out", str(out)]) == 0
    L, S = load_features(out / "L.csv"), load_features(out / "S.csv")
    A = load_features(groups / "a.csv")
    N = load_features(out / "N.csv")
    d = json.loads((out / "diagnostics.json").read_text())
    assert d["converged"]
    assert np.linalg.norm(L.values + S.values + N.values - A.values) / np.linalg.norm(A.values) < 1e-2
    out4 = groups / "dec4"
    assert main(["decompose", "--features", str(groups / "a.csv"), "--mesh",
                 str(groups / "mesh.txt"), "--out", str(out4), "--max-iters", "2"]) == 4
    assert (out4 / "L.csv").exists()
    assert "no convergence" in capsys.readouterr().err


def test_numerical_failure_exit_3(groups):
    X = load_features(groups / "a.csv").values
    X[0, 0] = np.inf
    save_features(groups / "bad.bin", FeatureMatrix(X), "bin")
    assert main(["--format", "bin", "decompose", "--features", str(groups / "bad.bin"), "--mesh",
                 str(groups / "mesh.txt"), "--out", str(groups / "o")]) == 3


def test_roi_template_umi_chain(groups):
    g = groups
    assert main(["roi", "--group-a", str(g / "a.csv"), "--group-b", str(g / "b.csv"), "--mesh",
                 str(g / "mesh.txt"), "--out", str(g / "roi.csv"), "--overlay", str(g / "ov.txt"),
                 "--n-perm", "300", "--p-thresh", "0.01", "--source", "raw"]) == 0
    mask = RoiMask.from_csv(g / "roi.csv")
    assert set(range(10)) <= set(mask.indices)
    assert main(["template", "--l-ad", str(g / "a.csv"), "--l-cu", str(g / "b.csv"), "--roi",
                 str(g / "roi.csv"), "--out", str(g / "t.json")]) == 0
    assert main(["umi", "--features", str(g / "a.csv"), "--template", str(g / "t.json"),
                 "--out", str(g / "u.csv")]) == 0
    rows = (g / "u.csv").read_text().splitlines()
    assert rows[0] == "subject_id,umi" and len(rows) == 13


def test_roi_folds(groups, capsys):
    g = groups
    assert main(["--seed", "2", "roi", "--group-a", str(g / "a.csv"), "--group-b", str(g / "b.csv"),
                 "--mesh", str(g / "mesh.txt"), "--out", str(g / "stab.csv"), "--n-perm", "200",
                 "--p-thresh", "0.01", "--source", "raw", "--folds", "3"]) == 0
    assert "over 3 folds" in capsys.readouterr().out


def test_p_thresh_warning(groups):
    g = groups
    with pytest.warns(UserWarning, match="smallest attainable"):
        main(["roi", "--group-a", str(g / "a.csv"), "--group-b", str(g / "b.csv"), "--mesh",
              str(g / "mesh.txt"), "--out", str(g / "r.csv"), "--n-perm", "99", "--p-thresh",
              "0.01", "--source", "raw"])


def test_idempotent_outputs(groups):
    g = groups
    args = ["roi", "--group-a", str(g / "a.csv"), "--group-b", str(g / "b.csv"), "--mesh",
            str(g / "mesh.txt"), "--n-perm", "200", "--p-thresh", "0.05", "--source", "raw"]
    main(args + ["--out", str(g / "r1.csv")])
    main(args + ["--out", str(g / "r2.csv")])
    assert (g / "r1.csv").read_bytes() == (g / "r2.csv").read_bytes()


def stat(args, capsys):
    assert main(["stats"] + args) == 0
    return json.loads(capsys.readouterr().out)


def test_stats_chi2(capsys):
    d = stat(["chi2", "--table", "10,20,30,40"], capsys)
    ref = chi_square_2x2(np.array([[10, 20], [30, 40]]))
    assert d["statistic"] == pytest.approx(ref.statistic) and d["p"] == pytest.approx(ref.p)
    assert main(["stats", "chi2", "--table", "1,2,3"]) == 2


def test_stats_paired_power_d(tmp_path, capsys):
    rng = np.random.default_rng(1)
    base = rng.normal(10, 1, 30)
    fol = base + rng.normal(1, 0.5, 30)
    p = tmp_path / "p.csv"
    p.write_text("baseline,followup\n"
                 + "\n".join(f"{a!r},{b!r}" for a, b in zip(base.tolist(), fol.tolist())))
    t = stat(["paired-t", str(p)], capsys)
    assert t["p"] < 1e-6
    n = stat(["power", str(p)], capsys)
    assert n["n_per_arm"] > 0
    d = stat(["cohens-d", "--paired", str(p)], capsys)
    diff = fol - base
    assert d["d"] == pytest.approx(diff.mean() / diff.std(ddof=1))


def test_stats_grouped(tmp_path, capsys):
    p = tmp_path / "g.csv"
    p.write_text("value,group\n1,a\n2,a\n3,a\n4,b\n5,b\n6,b\n")
    a = stat(["anova", str(p)], capsys)
    assert a["groups"] == ["a", "b"] and a["statistic"] == pytest.approx(3.674234614 ** 2)
    d = stat(["cohens-d", str(p)], capsys)
    assert d["d"] == pytest.approx(-3.0)


def test_stats_roc_pearson(tmp_path, capsys):
    p = tmp_path / "r.csv"
    p.write_text("score,label\n0.1,0\n0.4,0\n0.35,1\n0.8,1\n")
    r = stat(["roc", str(p), "--curve", str(tmp_path / "c.csv")], capsys)
    assert r["auc"] == pytest.approx(0.75)
    assert (tmp_path / "c.csv").exists()
    q = tmp_path / "xy.csv"
    q.write_text("x,y\n1,2\n2,4\n3,6.5\n4,8\n")
    assert stat(["pearson", str(q)], capsys)["r"] > 0.99


def test_stats_survival(sim, tmp_path, capsys):
    rows = (sim / "survival.csv").read_text().splitlines()
    (tmp_path / "s.csv").write_text("\n".join(",".join(r.split(",")[1:]) for r in rows))
    c = stat(["cox", str(tmp_path / "s.csv")], capsys)
    assert c["hr"] > 1
    k = stat(["km", str(tmp_path / "s.csv"), "--curve", str(tmp_path / "km.csv")], capsys)
    assert "log_rank" in k and k["steps"] > 0


def test_stats_enrich(tmp_path, capsys):
    rng = np.random.default_rng(2)
    base = rng.normal(10, 1, 40)
    score = rng.uniform(0, 1, 40)
    fol = base + 0.5 + 2 * score + rng.normal(0, 0.3, 40)
    p = tmp_path / "e.csv"
    p.write_text("baseline,followup,score\n"
                 + "\n".join(f"{a!r},{b!r},{s!r}" for a, b, s in zip(base.tolist(), fol.tolist(), score.tolist())))
    ref = tmp_path / "ref.csv"
    ref.write_text("score\n" + "\n".join(repr(x) for x in rng.uniform(0, 1, 30).tolist()))
    d = stat(["enrich", str(p), "--reference", str(ref), "--n-boot", "50"], capsys)
    assert len(d["rows"]) == 3 and d["N"] > 0


def test_threads_flag(groups):
    g = groups
    assert main(["--threads", "1", "template", "--l-ad", str(g / "a.csv"), "--l-cu",
                 str(g / "b.csv"), "--roi", str(g / "nope.csv"), "--out", str(g / "t.json")]) == 2
