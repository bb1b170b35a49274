"""Triangle-mesh template and the one-ring group operators used by the sparse term.

Every feature matrix row is attached to a vertex of a shared surface template.
The sparse component is shrunk in groups: the magnitude of entry ``(p, i)`` is the
Euclidean norm of column ``i`` over the closed one-ring of the vertex behind row
``p``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Raised for malformed or non-manifold meshes."""


@dataclass(frozen=True)
class TriangleMesh:
    vertex_count: int
    triangles: np.ndarray
    positions: np.ndarray | None = None
    one_ring: tuple[tuple[int, ...], ...] = field(default=(), repr=False)

    def __post_init__(self):
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "triangles", tris)
        if self.vertex_count <= 0:
            raise MeshError("vertex_count must be positive")
        if tris.size and (tris.min() < 0 or tris.max() >= self.vertex_count):
            raise MeshError("triangle index out of range [0, %d)" % self.vertex_count)
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=float)
            if pos.shape != (self.vertex_count, 3):
                raise MeshError(f"positions must be ({self.vertex_count}, 3), got {pos.shape}")
            object.__setattr__(self, "positions", pos)

    @property
    def ring_sizes(self) -> np.ndarray:
        return np.array([len(r) for r in self.one_ring])

    def ring_operator(self) -> sp.csr_matrix:
        """Sparse 0/1 matrix ``R`` with ``R[q, q'] = 1`` iff ``q'`` is in the one-ring of ``q``."""
        cached = self.__dict__.get("_ring_op")
        if cached is not None:
            return cached
        indptr = np.zeros(self.vertex_count + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(self.ring_sizes)
        indices = np.fromiter((v for r in self.one_ring for v in r), dtype=np.int64,
                              count=int(indptr[-1]))
        op = sp.csr_matrix((np.ones(indices.size), indices, indptr),
                           shape=(self.vertex_count, self.vertex_count))
        op.has_sorted_indices = True
        object.__setattr__(self, "_ring_op", op)
        return op


@dataclass(frozen=True)
class VertexMap:
    """Row index -> vertex index. Identity unless loaded from a ``row,vertex`` CSV."""

    row_to_vertex: np.ndarray

    def __post_init__(self):
        rv = np.asarray(self.row_to_vertex, dtype=np.int64)
        object.__setattr__(self, "row_to_vertex", rv)
        if not np.array_equal(np.sort(rv), np.arange(rv.size)):
            raise MeshError("vertex map is not a bijection onto [0, vertex_count)")

    @classmethod
    def identity(cls, m: int) -> "VertexMap":
        return cls(np.arange(m))

    @property
    def vertex_to_row(self) -> np.ndarray:
        inv = np.empty_like(self.row_to_vertex)
        inv[self.row_to_vertex] = np.arange(self.row_to_vertex.size)
        return inv

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.row_to_vertex, np.arange(self.row_to_vertex.size)))

    @classmethod
    def from_csv(cls, path) -> "VertexMap":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((int(rec["row"]), int(rec["vertex"])))
        rows.sort()
        if [r for r, _ in rows] != list(range(len(rows))):
            raise MeshError(f"{path}: rows must cover 0..{len(rows) - 1} exactly once")
        return cls(np.array([v for _, v in rows]))


def build_one_ring(mesh: TriangleMesh) -> TriangleMesh:
    """Return a copy of ``mesh`` with closed one-rings populated.

    Each ring is sorted ascending and contains its center vertex. An edge shared
    by more than two triangles raises :class:`MeshError` naming that edge.
    """
    tris = mesh.triangles
    edge_count: dict[tuple[int, int], int] = {}
    for a, b, c in tris.tolist():
        if a == b or b == c or a == c:
            raise MeshError(f"degenerate triangle ({a}, {b}, {c})")
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_count[key] = edge_count.get(key, 0) + 1
    bad = [e for e, k in edge_count.items() if k > 2]
    if bad:
        e = min(bad)
        raise MeshError(f"non-manifold edge {e} shared by {edge_count[e]} triangles")

    nbrs: list[set[int]] = [{q} for q in range(mesh.vertex_count)]
    for u, v in edge_count:
        nbrs[u].add(v)
        nbrs[v].add(u)
    rings = tuple(tuple(sorted(s)) for s in nbrs)
    return TriangleMesh(mesh.vertex_count, tris, mesh.positions, rings)


def make_mesh(vertex_count: int, triangles, positions=None) -> TriangleMesh:
    return build_one_ring(TriangleMesh(vertex_count, np.asarray(triangles).reshape(-1, 3),
                                       positions))


def singleton_mesh(m: int) -> TriangleMesh:
    """Mesh with no triangles: every one-ring is ``{q}``."""
    return make_mesh(m, np.empty((0, 3), dtype=np.int64))


def _ring_in_row_space(mesh: TriangleMesh, vmap: VertexMap | None) -> sp.csr_matrix:
    op = mesh.ring_operator()
    if vmap is None or vmap.is_identity:
        return op
    # rows of A are permuted vertices: R_rows = P R P^T
    v2r = vmap.vertex_to_row
    coo = op.tocoo()
    out = sp.csr_matrix((coo.data, (v2r[coo.row], v2r[coo.col])), shape=op.shape)
    out.sort_indices()
    return out


def _check_rows(A: np.ndarray, mesh: TriangleMesh, vmap: VertexMap | None):
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {A.shape}")
    if A.shape[0] != mesh.vertex_count:
        raise ValueError(f"matrix has {A.shape[0]} rows but mesh has {mesh.vertex_count} vertices")
    if vmap is not None and vmap.row_to_vertex.size != A.shape[0]:
        raise ValueError("vertex map size does not match matrix rows")


def local_magnitude(A, mesh: TriangleMesh, vmap: VertexMap | None = None) -> np.ndarray:
    """Per-column one-ring Euclidean magnitude of every entry.

    ``out[p, i] = sqrt(sum over q' in ring(q) of A[row(q'), i]**2)``, summed in
    ascending vertex order so the result does not depend on column blocking.
    """
    A = np.asarray(A, dtype=float)
    _check_rows(A, mesh, vmap)
    op = _ring_in_row_space(mesh, vmap)
    return np.sqrt(op @ (A * A))


def local_shrink(G, threshold: float, mesh: TriangleMesh,
                 vmap: VertexMap | None = None) -> np.ndarray:
    """Group shrinkage ``G * max(0, 1 - threshold / Gbar)`` with ``Gbar`` the one-ring magnitude.

    Entries whose one-ring magnitude is at or below ``threshold`` come out as
    exact zeros, including the 0/0 case.
    """
    if threshold < 0:
        raise ValueError(f"threshold must be nonnegative, got {threshold}")
    G = np.asarray(G, dtype=float)
    if threshold == 0:
        return G.copy()
    gbar = local_magnitude(G, mesh, vmap)
    keep = gbar > threshold
    factor = np.zeros_like(gbar)
    factor[keep] = 1.0 - threshold / gbar[keep]
    return G * factor


def local_sparse_norm(S, mesh: TriangleMesh | None = None, vmap: VertexMap | None = None) -> float:
    """Scalar size of a sparse component: the entrywise l1 norm.

    The mesh arguments only validate shape; grouping already shaped the support.
    """
    S = np.asarray(S, dtype=float)
    if mesh is not None:
        _check_rows(S, mesh, vmap)
    return float(np.abs(S).sum())


# --- text I/O -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_mesh(path, mesh: TriangleMesh, scalars=None) -> None:
    """Write ``verts tris`` header, one coordinate line per vertex, then index triples.

    With ``scalars`` each coordinate line carries a fourth value, which is the
    overlay format read by external viewers.
    """
    pos = mesh.positions if mesh.positions is not None else np.zeros((mesh.vertex_count, 3))
    lines = [f"{mesh.vertex_count} {len(mesh.triangles)}"]
    if scalars is not None:
        scalars = np.asarray(scalars, dtype=float).ravel()
        if scalars.size != mesh.vertex_count:
            raise ValueError("one scalar per vertex required")
    for q in range(mesh.vertex_count):
        row = " ".join(_fmt(c) for c in pos[q])
        if scalars is not None:
            row += " " + _fmt(scalars[q])
        lines.append(row)
    lines.extend(f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path, with_scalars: bool = False):
    """Read the text mesh format; validates indices and manifoldness."""
    text = Path(path).read_text().split("\n")
    text = [t for t in (ln.strip() for ln in text) if t and not t.startswith("#")]
    if not text:
        raise MeshError(f"{path}: empty mesh file")
    try:
        nv, nt = (int(x) for x in text[0].split())
    except ValueError:
        raise MeshError(f"{path}: header must be 'verts tris', got {text[0]!r}") from None
    if len(text) != 1 + nv + nt:
        raise MeshError(f"{path}: expected {nv} vertex and {nt} triangle lines, "
                        f"found {len(text) - 1} lines")
    width = 4 if with_scalars else 3
    pos = np.empty((nv, 3))
    scal = np.empty(nv)
    for q in range(nv):
        parts = text[1 + q].split()
        if len(parts) != width:
            raise MeshError(f"{path}: vertex line {q} has {len(parts)} fields, expected {width}")
        pos[q] = [float(x) for x in parts[:3]]
        if with_scalars:
            scal[q] = float(parts[3])
    tris = np.empty((nt, 3), dtype=np.int64)
    for t in range(nt):
        parts = text[1 + nv + t].split()
        if len(parts) != 3:
            raise MeshError(f"{path}: triangle line {t} must have 3 indices")
        tris[t] = [int(x) for x in parts]
    mesh = make_mesh(nv, tris, pos)
    return (mesh, scal) if with_scalars else mesh


# --- reference shapes ------------------------------------------------------------

def icosahedron() -> TriangleMesh:
    phi = (1 + 5 ** 0.5) / 2
    pos = np.array([(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
                    (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
                    (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)], dtype=float)
    tris = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    return make_mesh(12, tris, pos)


def sphere_mesh(m: int) -> TriangleMesh:
    """Triangulated unit sphere on ``m`` Fibonacci-spiral points (convex hull)."""
    from scipy.spatial import ConvexHull

    if m < 4:
        raise MeshError("a closed sphere mesh needs at least 4 vertices")
    k = np.arange(m) + 0.5
    z = 1 - 2 * k / m
    rho = np.sqrt(1 - z * z)
    theta = np.pi * (1 + 5 ** 0.5) * k
    pos = np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
    hull = ConvexHull(pos)
    tris = np.sort(hull.simplices, axis=1)
    tris = tris[np.lexsort(tris.T[::-1])]
    return make_mesh(m, tris, pos)


def hop_distance(mesh: TriangleMesh, source: int, max_hops: int | None = None) -> np.ndarray:
    """Breadth-first edge-hop distance from ``source``.

    -1 marks vertices that are unreachable or farther than ``max_hops``.
    """
    dist = np.full(mesh.vertex_count, -1, dtype=np.int64)
    dist[source] = 0
    frontier = [source]
    d = 0
    while frontier and (max_hops is None or d < max_hops):
        d += 1
        nxt = []
        for q in frontier:
            for v in mesh.one_ring[q]:
                if dist[v] < 0:
                    dist[v] = d
                    nxt.append(v)
        frontier = nxt
    return dist
