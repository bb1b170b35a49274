"""Univariate morphometry index.

A template stores, on the ROI vertices, the control-group mean and the disease
atrophy degree ``dw = 100 (cu_mean - ad_mean) / cu_mean``. A subject's degree is
``dt = 100 (cu_mean - x) / cu_mean`` and the index is ``sum(dt * dw) / 100``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .roi import RoiMask

FORMAT_VERSION = 1


@dataclass(frozen=True)
class AtrophyTemplate:
    roi_indices: np.ndarray
    cu_mean: np.ndarray
    dw: np.ndarray
    vertex_count: int

    def __post_init__(self):
        idx = np.asarray(self.roi_indices, dtype=np.int64)
        cu = np.asarray(self.cu_mean, dtype=float)
        dw = np.asarray(self.dw, dtype=float)
        if not (idx.shape == cu.shape == dw.shape):
            raise ValueError("roi_indices, cu_mean and dw must align")
        if np.any(cu <= 0):
            bad = idx[cu <= 0][:5].tolist()
            raise ValueError(f"control mean must be positive on the ROI; offending vertices {bad}")
        object.__setattr__(self, "roi_indices", idx)
        object.__setattr__(self, "cu_mean", cu)
        object.__setattr__(self, "dw", dw)

    @property
    def size(self) -> int:
        return int(self.roi_indices.size)

    def to_json(self, path) -> None:
        payload = {
            "format_version": FORMAT_VERSION,
            "vertex_count": int(self.vertex_count),
            "roi_indices": self.roi_indices.tolist(),
            "cu_mean": [float(x) for x in self.cu_mean],
            "dw": [float(x) for x in self.dw],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path) -> "AtrophyTemplate":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported template format_version "
                             f"{d.get('format_version')!r}")
        return cls(np.array(d["roi_indices"], dtype=np.int64), np.array(d["cu_mean"]),
                   np.array(d["dw"]), int(d["vertex_count"]))


@dataclass(frozen=True)
class UmiScore:
    value: float
    subject_id: object
    roi_vertex_count: int


def build_template(L_ad, L_cu, roi: RoiMask) -> AtrophyTemplate:
    """Template from the two groups' low-rank components restricted to ``roi``."""
    L_ad = np.asarray(L_ad, dtype=float)
    L_cu = np.asarray(L_cu, dtype=float)
    if L_ad.shape[0] != L_cu.shape[0]:
        raise ValueError("both components must share the vertex dimension")
    idx = np.flatnonzero(roi.selected)
    if idx.size == 0:
        raise ValueError("ROI is empty; cannot build an atrophy template")
    cu = L_cu[idx].mean(axis=1)
    if np.any(cu <= 0):
        raise ValueError("control low-rank mean is not positive on "
                         f"{int(np.sum(cu <= 0))} ROI vertices")
    ad = L_ad[idx].mean(axis=1)
    return AtrophyTemplate(idx, cu, 100.0 * (cu - ad) / cu, L_cu.shape[0])


def _roi_values(features, template: AtrophyTemplate) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim != 1:
        raise ValueError("features must be a per-vertex vector")
    if x.size < template.vertex_count:
        raise ValueError(f"feature vector has {x.size} vertices, template expects "
                         f"{template.vertex_count}")
    vals = x[template.roi_indices]
    if not np.all(np.isfinite(vals)):
        missing = template.roi_indices[~np.isfinite(vals)][:5].tolist()
        raise ValueError(f"missing feature values at ROI vertices {missing}")
    return vals


def individual_degree(features, template: AtrophyTemplate) -> np.ndarray:
    x = _roi_values(features, template)
    return 100.0 * (template.cu_mean - x) / template.cu_mean


def umi(features, template: AtrophyTemplate, subject_id=None) -> UmiScore:
    dt = individual_degree(features, template)
    return UmiScore(float(dt @ template.dw) / 100.0, subject_id, template.size)


def umi_batch(X, template: AtrophyTemplate) -> np.ndarray:
    """Scores for every column of a vertices x subjects matrix."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < template.vertex_count:
        raise ValueError("matrix has fewer rows than template vertices")
    R = X[template.roi_indices]
    if not np.all(np.isfinite(R)):
        raise ValueError("missing feature values on ROI vertices")
    dt = 100.0 * (template.cu_mean[:, None] - R) / template.cu_mean[:, None]
    return template.dw @ dt / 100.0
