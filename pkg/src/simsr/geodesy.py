"""Rest-pose neighborhood precomputation.

Three steps, all offline and deterministic: map each lattice vertex to a
distinct surface vertex by minimum-cost linear assignment on Euclidean rest
distance, measure geodesic distances from the mapped vertices along surface
edges, and freeze the k nearest lattice vertices of every surface vertex
into a table.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import dijkstra
from scipy.spatial.distance import cdist


class GeodesyError(Exception):
    pass


TABLE_MAGIC = b"SSNT"


@dataclass(frozen=True)
class AssignmentMap:
    """Injective map from lattice vertex i to surface vertex lr_to_hr[i]."""

    lr_to_hr: np.ndarray  # (N,) int64

    def __post_init__(self):
        arr = np.ascontiguousarray(self.lr_to_hr, dtype=np.int64)
        if len(np.unique(arr)) != len(arr):
            raise GeodesyError("assignment is not injective")
        arr.setflags(write=False)
        object.__setattr__(self, "lr_to_hr", arr)


@dataclass(frozen=True)
class NeighborhoodTable:
    """Per surface vertex: the k nearest lattice vertices by geodesic distance,
    ascending, ties broken by lower lattice index."""

    k: int
    indices: np.ndarray    # (M, k) int64, lattice vertex ids
    distances: np.ndarray  # (M, k) float64, mm

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        dist = np.ascontiguousarray(self.distances, dtype=np.float64)
        if idx.shape != dist.shape or idx.ndim != 2 or idx.shape[1] != self.k:
            raise GeodesyError(f"table shapes {idx.shape} / {dist.shape} do not match k={self.k}")
        if (np.diff(dist, axis=1) < 0).any():
            raise GeodesyError("table rows are not sorted by distance")
        if dist.size and dist.min() < 0:
            raise GeodesyError("negative geodesic distance")
        for arr in (idx, dist):
            arr.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "distances", dist)


def linear_assignment(costs):
    """Minimum-total-cost injection of rows into columns (N <= M)."""
    costs = np.asarray(costs, dtype=np.float64)
    n, m = costs.shape
    if n > m:
        raise GeodesyError(f"more lattice vertices ({n}) than surface vertices ({m})")
    if not np.isfinite(costs).all():
        raise GeodesyError("non-finite assignment cost")
    if costs.size and costs.min() < 0:
        raise GeodesyError("negative assignment cost")
    rows, cols = linear_sum_assignment(costs)
    out = np.empty(n, dtype=np.int64)
    out[rows] = cols
    return AssignmentMap(out)


def assign_lattice(surface, lattice):
    """Euclidean rest-distance assignment of lattice vertices to surface vertices."""
    return linear_assignment(cdist(lattice.vertices, surface.vertices))


def _graph(n_vertices, edges, lengths):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lengths = np.asarray(lengths, dtype=np.float64)
    return sp.csr_matrix(
        (lengths, (edges[:, 0], edges[:, 1])), shape=(n_vertices, n_vertices)
    )


def graph_distances(n_vertices, edges, lengths, sources):
    """Shortest-path distances (len(sources), n_vertices) over an undirected
    weighted graph; raises if any vertex is unreachable."""
    d = dijkstra(_graph(n_vertices, edges, lengths), directed=False, indices=sources)
    d = np.atleast_2d(d)
    if np.isinf(d).any():
        raise GeodesyError("graph is disconnected: unreachable vertices")
    return d


def knn_from_graph(n_vertices, edges, lengths, mapped_hr, k, chunk=64):
    """k-best geodesic neighbors per graph vertex, built source-by-source.

    Runs Dijkstra per chunk of lattice sources and folds each chunk into a
    running (n_vertices, k) best list, so peak memory stays O(n_vertices *
    (k + chunk)) regardless of the lattice size.
    """
    mapped_hr = np.asarray(mapped_hr, dtype=np.int64)
    n_sources = len(mapped_hr)
    if k > n_sources:
        raise GeodesyError(f"k={k} exceeds lattice vertex count {n_sources}")
    if k < 1:
        raise GeodesyError(f"k must be positive, got {k}")
    run_d = run_i = None
    for lo in range(0, n_sources, chunk):
        lr_ids = np.arange(lo, min(lo + chunk, n_sources))
        d = graph_distances(n_vertices, edges, lengths, mapped_hr[lr_ids])
        cand_d = d.T  # (n_vertices, C)
        cand_i = np.broadcast_to(lr_ids, cand_d.shape)
        if run_d is not None:
            cand_d = np.concatenate([run_d, cand_d], axis=1)
            cand_i = np.concatenate([run_i, cand_i], axis=1)
        order = np.lexsort((cand_i, cand_d), axis=1)[:, : min(k, cand_d.shape[1])]
        run_d = np.take_along_axis(cand_d, order, axis=1)
        run_i = np.take_along_axis(np.ascontiguousarray(cand_i), order, axis=1)
    return NeighborhoodTable(k, run_i, run_d)


def geodesic_knn(surface, assignment, k):
    """Frozen interpolation neighborhoods: for each surface vertex, the k
    lattice vertices whose assigned surface positions are geodesically
    nearest along the rest surface edges."""
    return knn_from_graph(
        surface.vertex_count, surface.edges, surface.edge_lengths,
        assignment.lr_to_hr, k,
    )


def all_geodesic_distances(surface, assignment):
    """Dense (N, M) geodesic distance matrix from every mapped lattice vertex
    to every surface vertex; used by the scattered-data baselines."""
    return graph_distances(
        surface.vertex_count, surface.edges, surface.edge_lengths,
        assignment.lr_to_hr,
    )


def precompute(surface, lattice, k):
    """Full offline pipeline: assignment costs, optimal assignment, geodesic
    k-NN table."""
    return geodesic_knn(surface, assign_lattice(surface, lattice), k)


def euclidean_knn(points, queries, k):
    """k nearest rows of points for each query row, by Euclidean distance,
    ties broken by lower point index."""
    d = cdist(np.asarray(queries, dtype=np.float64), np.asarray(points, dtype=np.float64))
    if k > d.shape[1]:
        raise GeodesyError(f"k={k} exceeds point count {d.shape[1]}")
    ids = np.broadcast_to(np.arange(d.shape[1]), d.shape)
    order = np.lexsort((ids, d), axis=1)[:, :k]
    return np.take_along_axis(np.ascontiguousarray(ids), order, axis=1), np.take_along_axis(d, order, axis=1)


# ---------------------------------------------------------------------------
# table io: magic `SSNT`, k u32, M u32, then per surface vertex k pairs of
# (u32 lattice index, f32 distance), little-endian.

def save_table(path, table):
    rec = np.empty((len(table.indices), table.k), dtype=np.dtype([("i", "<u4"), ("d", "<f4")]))
    rec["i"] = table.indices
    rec["d"] = table.distances
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<II", table.k, len(table.indices)))
        fh.write(rec.tobytes())


def load_table(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TABLE_MAGIC:
        raise GeodesyError(f"{path}: bad magic {blob[:4]!r}")
    try:
        k, m = struct.unpack_from("<II", blob, 4)
    except struct.error as exc:
        raise GeodesyError(f"{path}: truncated header") from exc
    try:
        rec = np.frombuffer(blob, dtype=np.dtype([("i", "<u4"), ("d", "<f4")]), offset=12)
    except ValueError as exc:
        raise GeodesyError(f"{path}: truncated table") from exc
    if rec.size != m * k:
        raise GeodesyError(f"{path}: expected {m * k} entries, found {rec.size}")
    rec = rec.reshape(m, k)
    return NeighborhoodTable(k, rec["i"].astype(np.int64), rec["d"].astype(np.float64))
