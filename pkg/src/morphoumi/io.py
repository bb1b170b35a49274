"""Feature matrices, cohort tables and survival records on disk.

Feature CSV: header row of subject ids, one row per vertex. Binary: the magic
``UMIFMAT1``, little-endian ``uint64`` m and n, then ``m * n`` little-endian
doubles in column-major order. Both round-trip exactly.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, load_mesh
from .stats import SurvivalRecord

MAGIC = b"UMIFMAT1"
GROUPS = ("AD", "MCI", "CU")
AMYLOID = ("positive", "negative")
TIMEPOINTS = ("baseline", "m24")
SCORES = ("MMSE", "CDR-SB", "ADAS-Cog11", "AVLT-Total")
COHORT_COLUMNS = ("subject_id", "group", "amyloid", "timepoint", "feature_column") + SCORES


class InputError(ValueError):
    """Malformed or inconsistent input files."""


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    subject_ids: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.values, dtype=float)
        if X.ndim != 2:
            raise InputError(f"feature matrix must be 2-D, got shape {X.shape}")
        ids = tuple(str(s) for s in self.subject_ids) or tuple(f"s{i}" for i in range(X.shape[1]))
        if len(ids) != X.shape[1]:
            raise InputError(f"{len(ids)} subject ids for {X.shape[1]} columns")
        object.__setattr__(self, "values", X)
        object.__setattr__(self, "subject_ids", ids)

    @property
    def shape(self):
        return self.values.shape

    def columns(self, idx) -> "FeatureMatrix":
        idx = list(idx)
        return FeatureMatrix(self.values[:, idx], tuple(self.subject_ids[i] for i in idx))


def save_features(path, fm: FeatureMatrix, fmt: str | None = None) -> None:
    fmt = fmt or _guess_format(path)
    if fmt == "bin":
        m, n = fm.shape
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<QQ", m, n))
            fh.write(np.asfortranarray(fm.values).astype("<f8").tobytes(order="F"))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(fm.subject_ids)
            for row in fm.values:
                w.writerow([repr(float(x)) for x in row])
    else:
        raise InputError(f"unknown feature format {fmt!r}")


def load_features(path, fmt: str | None = None, subject_ids=()) -> FeatureMatrix:
    fmt = fmt or _guess_format(path)
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    if fmt == "bin":
        raw = path.read_bytes()
        if raw[:8] != MAGIC:
            raise InputError(f"{path}: bad magic {raw[:8]!r}")
        m, n = struct.unpack("<QQ", raw[8:24])
        if len(raw) != 24 + 8 * m * n:
            raise InputError(f"{path}: expected {24 + 8 * m * n} bytes for {m}x{n}, got {len(raw)}")
        X = np.frombuffer(raw, dtype="<f8", offset=24).reshape((m, n), order="F")
        return FeatureMatrix(X.astype(float), subject_ids)
    if fmt != "csv":
        raise InputError(f"unknown feature format {fmt!r}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    for k, r in enumerate(body):
        if len(r) != len(header):
            raise InputError(f"{path}: row {k + 2} has {len(r)} fields, header has {len(header)}")
    try:
        X = np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return FeatureMatrix(X, tuple(header))


def _guess_format(path) -> str:
    return "bin" if str(path).endswith((".bin", ".umif")) else "csv"


# --- cohort ------------------------------------------------------------------------

@dataclass(frozen=True)
class CohortRow:
    subject_id: str
    group: str
    amyloid: str
    timepoint: str
    feature_column: int
    scores: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CohortTable:
    rows: tuple

    def __post_init__(self):
        seen = set()
        for k, r in enumerate(self.rows):
            key = (r.subject_id, r.timepoint)
            if key in seen:
                raise InputError(f"cohort row {k + 1}: duplicate (subject, timepoint) {key}")
            seen.add(key)

    def select(self, group=None, timepoint=None, amyloid=None) -> list:
        return [r for r in self.rows
                if (group is None or r.group == group)
                and (timepoint is None or r.timepoint == timepoint)
                and (amyloid is None or r.amyloid == amyloid)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COHORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.subject_id, r.group, r.amyloid, r.timepoint, r.feature_column]
                           + ["" if r.scores.get(s) is None else repr(float(r.scores[s]))
                              for s in SCORES])


def read_cohort(path) -> CohortTable:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COHORT_COLUMNS[:5] if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: missing columns {missing}")
        rows = []
        for k, d in enumerate(reader, start=2):
            for col, allowed in (("group", GROUPS), ("amyloid", AMYLOID), ("timepoint", TIMEPOINTS)):
                if d[col] not in allowed:
                    raise InputError(f"{path} line {k}: unknown {col} {d[col]!r}; expected one of {allowed}")
            try:
                ref = int(d["feature_column"])
                scores = {s: float(d[s]) for s in SCORES if d.get(s) not in (None, "")}
            except ValueError as exc:
                raise InputError(f"{path} line {k}: {exc}") from exc
            rows.append(CohortRow(d["subject_id"], d["group"], d["amyloid"], d["timepoint"], ref, scores))
    try:
        return CohortTable(tuple(rows))
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from exc


def load_cohort(features_path, cohort_csv_path, mesh_path, fmt: str | None = None):
    """Load and cross-check features, cohort table and mesh.

    ``features_path`` is either one file holding every cohort row's column or a
    mapping ``{timepoint: path}``. Returns ``(features, cohort, mesh)`` where
    ``features`` mirrors the shape of ``features_path``.
    """
    mesh = load_mesh(mesh_path)
    cohort = read_cohort(cohort_csv_path)
    per_tp = isinstance(features_path, dict)
    paths = features_path if per_tp else {None: features_path}
    loaded = {}
    for tp, p in paths.items():
        fm = load_features(p, fmt)
        rows = cohort.select(timepoint=tp)
        where = f" at timepoint {tp}" if tp else ""
        if fm.shape[1] != len(rows):
            raise InputError(f"{p} has {fm.shape[1]} feature columns but the cohort has "
                             f"{len(rows)} rows{where}")
        if fm.shape[0] != mesh.vertex_count:
            raise InputError(f"{p} has {fm.shape[0]} vertex rows, mesh {mesh_path} has "
                             f"{mesh.vertex_count} vertices")
        refs = [r.feature_column for r in rows]
        bad = [r for r in rows if not 0 <= r.feature_column < fm.shape[1]]
        if bad:
            raise InputError(f"subject {bad[0].subject_id}{where}: feature_column "
                             f"{bad[0].feature_column} outside 0..{fm.shape[1] - 1}")
        if len(set(refs)) != len(refs):
            raise InputError(f"{p}: a feature column is referenced by more than one cohort row{where}")
        if np.any(fm.values <= 0):
            warnings.warn(f"{p}: {int(np.sum(fm.values <= 0))} nonpositive feature values; "
                          "features are expected to be positive lengths", stacklevel=2)
        loaded[tp] = fm
    return (loaded if per_tp else loaded[None]), cohort, mesh


# --- survival ----------------------------------------------------------------------

def _flag(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def read_survival(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"time", "event", "marker_positive"}
        if not need <= set(reader.fieldnames or []):
            raise InputError(f"{path}: need columns {sorted(need)}")
        out = []
        for k, d in enumerate(reader, start=2):
            try:
                out.append(SurvivalRecord(float(d["time"]), _flag(d["event"]), _flag(d["marker_positive"])))
            except ValueError as exc:
                raise InputError(f"{path} line {k}: {exc}") from exc
    return out


def write_survival(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "event", "marker_positive"])
        for r in records:
            w.writerow([repr(float(r.time)), int(r.event), int(r.marker_positive)])
