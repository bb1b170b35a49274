import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from morphoumi.io import (CohortRow, CohortTable, FeatureMatrix, InputError, load_cohort,
                          load_features, read_cohort, read_survival, save_features, write_survival)
from morphoumi.mesh import save_mesh, sphere_mesh
from morphoumi.stats import SurvivalRecord


def write_fixture(d, X, rows, mesh, fmt="csv"):
    ext = "bin" if fmt == "bin" else "csv"
    save_features(d / f"f.{ext}", FeatureMatrix(X, [f"s{j}" for j in range(X.shape[1])]), fmt)
    CohortTable(tuple(rows)).to_csv(d / "c.csv")
    save_mesh(d / "m.txt", mesh)
    return d / f"f.{ext}", d / "c.csv", d / "m.txt"


def rows_for(n, timepoint="baseline"):
    return [CohortRow(f"s{j}", "AD" if j % 2 else "CU", "positive", timepoint, j,
                      {"MMSE": 28.0 - j}) for j in range(n)]


def test_minimal_fixture_roundtrip(tmp_path, tri):
    X = np.array([[2.5, 3.1], [2.75, 1e-3 + 2.0], [3.0, 0.1 + 0.2]])
    paths = write_fixture(tmp_path, X, rows_for(2), tri)
    fm, cohort, mesh = load_cohort(*paths)
    assert np.array_equal(fm.values, X) and fm.subject_ids == ("s0", "s1")
    assert cohort.rows == tuple(rows_for(2))
    assert mesh.vertex_count == 3 and np.array_equal(mesh.triangles, tri.triangles)


def test_column_count_error_names_both(tmp_path, tri):
    paths = write_fixture(tmp_path, np.ones((3, 2)), rows_for(3), tri)
    with pytest.raises(InputError, match=r"2 feature columns.*3 rows"):
        load_cohort(*paths)


def test_vertex_count_mismatch(tmp_path, tri):
    paths = write_fixture(tmp_path, np.ones((4, 2)), rows_for(2), tri)
    with pytest.raises(InputError, match="4 vertex rows"):
        load_cohort(*paths)


def test_binary_equals_csv_twin(tmp_path):
    rng = np.random.default_rng(3)
    X = rng.lognormal(1.0, 0.3, size=(5000, 40))
    fm = FeatureMatrix(X, [f"s{j}" for j in range(40)])
    save_features(tmp_path / "x.csv", fm)
    save_features(tmp_path / "x.bin", fm)
    a = load_features(tmp_path / "x.csv")
    b = load_features(tmp_path / "x.bin", subject_ids=a.subject_ids)
    assert np.array_equal(a.values, b.values) and np.array_equal(b.values, X)
    assert (tmp_path / "x.bin").stat().st_size == 24 + 8 * X.size


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_both_formats_roundtrip_exactly(tmp_path_factory, X):
    d = tmp_path_factory.mktemp("rt")
    fm = FeatureMatrix(X)
    for fmt in ("csv", "bin"):
        save_features(d / f"x.{fmt}", fm, fmt)
        back = load_features(d / f"x.{fmt}", fmt)
        assert np.array_equal(back.values.view(np.int64), X.view(np.int64))


def test_binary_corrupt(tmp_path):
    (tmp_path / "a.bin").write_bytes(b"NOTMAGIC" + bytes(16))
    with pytest.raises(InputError, match="magic"):
        load_features(tmp_path / "a.bin")
    save_features(tmp_path / "b.bin", FeatureMatrix(np.ones((3, 2))))
    (tmp_path / "b.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:-8])
    with pytest.raises(InputError, match="bytes"):
        load_features(tmp_path / "b.bin")


def test_csv_ragged_row(tmp_path):
    (tmp_path / "a.csv").write_text("s0,s1\n1.0,2.0\n3.0\n")
    with pytest.raises(InputError, match="row 3"):
        load_features(tmp_path / "a.csv")


def test_missing_file(tmp_path):
    with pytest.raises(InputError, match="no such file"):
        load_features(tmp_path / "nope.csv")


def test_duplicate_subject_timepoint(tmp_path):
    rows = rows_for(2) + [rows_for(1)[0]]
    with pytest.raises(InputError, match="duplicate"):
        CohortTable(tuple(rows))
    # same subject at two timepoints is fine
    CohortTable(tuple(rows_for(2) + rows_for(2, "m24")))


def test_unknown_enum_names_line(tmp_path):
    CohortTable(tuple(rows_for(2))).to_csv(tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text().replace(",CU,", ",XX,")
    (tmp_path / "c.csv").write_text(text)
    with pytest.raises(InputError, match=r"line 2: unknown group 'XX'"):
        read_cohort(tmp_path / "c.csv")


def test_feature_column_out_of_range(tmp_path, tri):
    rows = rows_for(2)
    rows[1] = CohortRow("s1", "AD", "positive", "baseline", 5)
    paths = write_fixture(tmp_path, np.ones((3, 2)), rows, tri)
    with pytest.raises(InputError, match="subject s1.*feature_column 5"):
        load_cohort(*paths)


def test_feature_column_reused(tmp_path, tri):
    rows = rows_for(2)
    rows[1] = CohortRow("s1", "AD", "positive", "baseline", 0)
    paths = write_fixture(tmp_path, np.ones((3, 2)), rows, tri)
    with pytest.raises(InputError, match="more than one"):
        load_cohort(*paths)


def test_nonpositive_warning(tmp_path, tri):
    X = np.ones((3, 2))
    X[1, 1] = 0.0
    paths = write_fixture(tmp_path, X, rows_for(2), tri)
    with pytest.warns(UserWarning, match="1 nonpositive"):
        load_cohort(*paths)
    X[1, 1] = 2.0
    paths = write_fixture(tmp_path, X, rows_for(2), tri)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_cohort(*paths)


def test_per_timepoint_features(tmp_path):
    mesh = sphere_mesh(20)
    rows = rows_for(3) + rows_for(3, "m24")
    CohortTable(tuple(rows)).to_csv(tmp_path / "c.csv")
    save_mesh(tmp_path / "m.txt", mesh)
    save_features(tmp_path / "b.bin", FeatureMatrix(np.full((20, 3), 3.0)))
    save_features(tmp_path / "f.bin", FeatureMatrix(np.full((20, 3), 2.9)))
    fms, cohort, _ = load_cohort({"baseline": tmp_path / "b.bin", "m24": tmp_path / "f.bin"},
                                 tmp_path / "c.csv", tmp_path / "m.txt")
    assert set(fms) == {"baseline", "m24"} and len(cohort.select(timepoint="m24")) == 3


def test_cohort_select_and_scores(tmp_path):
    rows = rows_for(4)
    rows[0] = CohortRow("s0", "CU", "negative", "baseline", 0, {"MMSE": 30.0, "CDR-SB": 0.0})
    CohortTable(tuple(rows)).to_csv(tmp_path / "c.csv")
    back = read_cohort(tmp_path / "c.csv")
    assert back.rows == tuple(rows)
    assert [r.subject_id for r in back.select(group="CU")] == ["s0", "s2"]
    assert [r.subject_id for r in back.select(amyloid="negative")] == ["s0"]


def test_feature_matrix_validation():
    with pytest.raises(InputError):
        FeatureMatrix(np.ones(3))
    with pytest.raises(InputError):
        FeatureMatrix(np.ones((2, 2)), ("a",))
    assert FeatureMatrix(np.ones((2, 3))).columns([2, 0]).subject_ids == ("s2", "s0")


def test_survival_roundtrip(tmp_path):
    recs = [SurvivalRecord(12.5, True, False), SurvivalRecord(72.0, False, True)]
    write_survival(tmp_path / "s.csv", recs)
    assert read_survival(tmp_path / "s.csv") == recs
    (tmp_path / "bad.csv").write_text("time,event,marker_positive\n1.0,maybe,1\n")
    with pytest.raises(InputError, match="line 2"):
        read_survival(tmp_path / "bad.csv")
