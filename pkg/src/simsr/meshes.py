"""Mesh containers, derived topology, OBJ/PLY io, and barycentric embedding
of the high-resolution surface inside the low-resolution lattice.

All positions are rest positions in millimeters. Containers are immutable
after construction; their arrays are marked read-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

BARY_EPS = 1e-6
DEGENERATE_AREA = 1e-12


class MeshError(Exception):
    """Base class for mesh construction and io failures."""


class MeshParseError(MeshError):
    pass


class MeshIndexError(MeshError):
    pass


class MeshConnectivityError(MeshError):
    pass


class DegenerateTriangleError(MeshError):
    pass


class EmbeddingError(MeshError):
    pass


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle surface with unique undirected edges and their rest lengths."""

    vertices: np.ndarray      # (M, 3) float64, mm
    triangles: np.ndarray     # (F, 3) int64
    edges: np.ndarray         # (E, 2) int64, each undirected pair once, lo < hi
    edge_lengths: np.ndarray  # (E,) float64, mm

    @classmethod
    def from_arrays(cls, vertices, triangles):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        m = len(vertices)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= m):
            raise MeshIndexError(
                f"triangle index out of range [0, {m}): "
                f"min {triangles.min()}, max {triangles.max()}"
            )
        repeated = (
            (triangles[:, 0] == triangles[:, 1])
            | (triangles[:, 1] == triangles[:, 2])
            | (triangles[:, 0] == triangles[:, 2])
        )
        if repeated.any():
            raise DegenerateTriangleError(
                f"triangle {int(np.argmax(repeated))} repeats a vertex index"
            )
        pairs = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [0, 2]]])
        pairs.sort(axis=1)
        edges = np.unique(pairs, axis=0)
        lengths = np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1)
        if edges.size and lengths.min() <= 0.0:
            bad = edges[np.argmin(lengths)]
            raise MeshError(f"zero-length edge between vertices {bad[0]} and {bad[1]}")
        if m > 1:
            adj = sp.csr_matrix(
                (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(m, m)
            )
            n_comp, _ = connected_components(adj, directed=False)
            if n_comp != 1:
                raise MeshConnectivityError(f"surface graph has {n_comp} components")
        return cls(_readonly(vertices), _readonly(triangles), _readonly(edges), _readonly(lengths))

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def triangle_count(self):
        return len(self.triangles)


@dataclass(frozen=True)
class LatticeMesh:
    """Tetrahedralized volumetric lattice; tets oriented to positive volume."""

    vertices: np.ndarray    # (N, 3) float64, mm
    tetrahedra: np.ndarray  # (T, 4) int64

    @classmethod
    def from_arrays(cls, vertices, tetrahedra):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        tets = np.asarray(tetrahedra, dtype=np.int64).reshape(-1, 4)
        n = len(vertices)
        if tets.size and (tets.min() < 0 or tets.max() >= n):
            raise MeshIndexError(
                f"tetrahedron index out of range [0, {n}): min {tets.min()}, max {tets.max()}"
            )
        for row in tets:
            if len(set(row.tolist())) != 4:
                raise MeshError(f"tetrahedron {row.tolist()} repeats a vertex index")
        vols = _signed_volumes(vertices, tets)
        flip = vols < 0
        if flip.any():
            tets = tets.copy()
            tets[flip] = tets[flip][:, [0, 1, 3, 2]]
            vols = np.abs(vols)
        if tets.size and vols.min() <= DEGENERATE_AREA:
            raise MeshError(f"tetrahedron {int(np.argmin(vols))} has near-zero volume")
        return cls(_readonly(vertices), _readonly(tets))

    @property
    def vertex_count(self):
        return len(self.vertices)


def _signed_volumes(vertices, tets):
    a, b, c, d = (vertices[tets[:, i]] for i in range(4))
    return np.einsum("ij,ij->i", np.cross(b - a, c - a), d - a) / 6.0


@dataclass(frozen=True)
class EmbeddingWeights:
    """Per surface vertex: containing tetrahedron plus barycentric weights."""

    tet_index: np.ndarray    # (M,) int64
    bary: np.ndarray         # (M, 4) float64, rows sum to 1
    tet_vertices: np.ndarray  # (M, 4) int64, lattice vertex ids of the tet


def face_normals(vertices, triangles):
    """Unit normals of deformed triangles, following the winding order.

    Raises DegenerateTriangleError naming the first triangle whose area is
    at or below 1e-12 mm^2.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    a = vertices[triangles[:, 0]]
    crosses = np.cross(vertices[triangles[:, 1]] - a, vertices[triangles[:, 2]] - a)
    norms = np.linalg.norm(crosses, axis=1)
    areas = 0.5 * norms
    if areas.size and areas.min() <= DEGENERATE_AREA:
        raise DegenerateTriangleError(
            f"triangle {int(np.argmin(areas))} is degenerate (area {areas.min():.3e} mm^2)"
        )
    return crosses / norms[:, None]


def embed_surface(surface, lattice):
    """Assign each surface vertex to a containing tetrahedron.

    A vertex may sit slightly outside every tet (tolerance 1e-6 on the most
    negative barycentric coordinate); the tet with the smallest violation
    wins, ties by lowest tet index. Accepts a SurfaceMesh or a raw (M, 3)
    point array.
    """
    points = surface.vertices if isinstance(surface, SurfaceMesh) else np.asarray(surface, dtype=np.float64)
    tets = lattice.tetrahedra
    m = len(points)
    best_violation = np.full(m, np.inf)
    best_tet = np.full(m, -1, dtype=np.int64)
    best_bary = np.zeros((m, 4))
    for t, tet in enumerate(tets):
        v0 = lattice.vertices[tet[0]]
        basis = (lattice.vertices[tet[1:]] - v0).T  # columns are edge vectors
        local = np.linalg.solve(basis, (points - v0).T).T  # (M, 3)
        bary = np.empty((m, 4))
        bary[:, 1:] = local
        bary[:, 0] = 1.0 - local.sum(axis=1)
        violation = np.maximum(-bary.min(axis=1), 0.0)
        better = violation < best_violation
        if better.any():
            best_violation[better] = violation[better]
            best_tet[better] = t
            best_bary[better] = bary[better]
    outside = best_violation > BARY_EPS
    if outside.any():
        j = int(np.argmax(outside))
        raise EmbeddingError(
            f"surface vertex {j} lies outside all tetrahedra "
            f"(barycentric violation {best_violation[j]:.3e})"
        )
    return EmbeddingWeights(
        _readonly(best_tet), _readonly(best_bary), _readonly(tets[best_tet])
    )


def apply_embedding(weights, lr_disp):
    """Barycentric interpolation of lattice displacements onto the surface."""
    lr_disp = np.asarray(lr_disp)
    if lr_disp.ndim != 2 or lr_disp.shape[1] != 3:
        raise MeshError(f"lattice displacements must be (N, 3), got {lr_disp.shape}")
    if weights.tet_vertices.max() >= len(lr_disp):
        raise MeshError(
            f"displacement row count {len(lr_disp)} below lattice vertex "
            f"index {weights.tet_vertices.max()}"
        )
    gathered = lr_disp[weights.tet_vertices]  # (M, 4, 3)
    return np.einsum("mt,mtc->mc", weights.bary, gathered)


# ---------------------------------------------------------------------------
# OBJ io: `v x y z` and `f i j k` (1-based) lines; lattices add `t i j k l`
# tet lines; all other lines are ignored.

def _parse_obj(path):
    verts, faces, tets = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    if len(parts) < 4:
                        raise ValueError
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    if len(parts) < 4:
                        raise ValueError
                    faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
                elif parts[0] == "t":
                    if len(parts) < 5:
                        raise ValueError
                    tets.append([int(x) - 1 for x in parts[1:5]])
            except ValueError as exc:
                raise MeshParseError(f"{path}:{lineno}: cannot parse {raw.strip()!r}") from exc
    return np.array(verts, dtype=np.float64).reshape(-1, 3), faces, tets


def load_surface(path):
    verts, faces, _ = _parse_obj(path)
    if not len(verts):
        raise MeshParseError(f"{path}: no vertices")
    if not faces:
        raise MeshParseError(f"{path}: no faces")
    return SurfaceMesh.from_arrays(verts, np.array(faces, dtype=np.int64))


def load_lattice(path):
    verts, _, tets = _parse_obj(path)
    if not len(verts):
        raise MeshParseError(f"{path}: no vertices")
    if not tets:
        raise MeshParseError(f"{path}: no tetrahedra ('t i j k l' lines)")
    return LatticeMesh.from_arrays(verts, np.array(tets, dtype=np.int64))


def save_surface(path, surface):
    with open(path, "w", encoding="utf-8") as fh:
        for v in surface.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in surface.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_lattice(path, lattice):
    with open(path, "w", encoding="utf-8") as fh:
        for v in lattice.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in lattice.tetrahedra:
            fh.write(f"t {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}\n")


def save_heatmap_ply(path, vertices, triangles, colors):
    """ASCII PLY with per-vertex red/green/blue u8 properties."""
    vertices = np.asarray(vertices, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.uint8)
    if colors.shape != (len(vertices), 3):
        raise MeshError(f"colors must be ({len(vertices)}, 3) u8, got {colors.shape}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write(f"element face {len(triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v, c in zip(vertices, colors):
            fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
        for t in triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_heatmap_ply(path):
    """Read back an ASCII PLY written by save_heatmap_ply."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise MeshParseError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    body = 0
    for i, ln in enumerate(lines):
        if ln.startswith("element vertex"):
            n_vert = int(ln.split()[-1])
        elif ln.startswith("element face"):
            n_face = int(ln.split()[-1])
        elif ln == "end_header":
            body = i + 1
            break
    else:
        raise MeshParseError(f"{path}: missing end_header")
    verts = np.empty((n_vert, 3))
    colors = np.empty((n_vert, 3), dtype=np.uint8)
    for j in range(n_vert):
        parts = lines[body + j].split()
        verts[j] = [float(x) for x in parts[:3]]
        colors[j] = [int(x) for x in parts[3:6]]
    faces = np.empty((n_face, 3), dtype=np.int64)
    for j in range(n_face):
        parts = lines[body + n_vert + j].split()
        faces[j] = [int(x) for x in parts[1:4]]
    return verts, faces, colors
