"""Shared mesh and model builders for tests."""

import numpy as np
import pytest
from scipy.spatial import Delaunay

from simsr.geodesy import precompute
from simsr.meshes import LatticeMesh, SurfaceMesh
from simsr.model import ModelConfig, SuperResModel


def make_grid_surface(nu=4, nv=4, spacing=10.0, jitter=0.0, seed=0):
    """Regular (nu x nv) grid patch in the xy-plane, two triangles per cell."""
    rng = np.random.default_rng(seed)
    us, vs = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    z = jitter * rng.standard_normal((nu, nv)) if jitter else np.zeros((nu, nv))
    verts = np.stack([us.ravel() * spacing, vs.ravel() * spacing, z.ravel()], axis=1)
    tris = []
    for i in range(nu - 1):
        for j in range(nv - 1):
            a = i * nv + j
            b = (i + 1) * nv + j
            c = (i + 1) * nv + j + 1
            d = i * nv + j + 1
            tris += [[a, b, c], [a, c, d]]
    return SurfaceMesh.from_arrays(verts, np.array(tris, dtype=np.int64))


def unit_tet_lattice():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return LatticeMesh.from_arrays(verts, np.array([[0, 1, 2, 3]]))


@pytest.fixture
def grid_surface():
    return make_grid_surface()


def make_box_lattice(lo=(-5.0, -5.0, -6.0), hi=(35.0, 35.0, 6.0), jitter=0.0, seed=0):
    """Eight-corner box tetrahedralized by Delaunay, optionally jittered so
    vertex distances are tie-free."""
    corners = np.array([
        [x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])
    ])
    if jitter:
        corners = corners + jitter * np.random.default_rng(seed).standard_normal(corners.shape)
    return LatticeMesh.from_arrays(corners, Delaunay(corners).simplices)


def toy_config(**overrides):
    base = dict(
        widths=(4, 5), pe_levels=1, k_graph=2, k_interp=3,
        weight_hidden=(6,), recon_hidden=(7,),
        lr=1e-3, batch_size=2, epochs=2, seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_toy_model(seed=0, **overrides):
    """Small but fully wired model: 16-vertex surface in an 8-vertex lattice."""
    surface = make_grid_surface(nu=4, nv=4, jitter=1.5, seed=seed)
    lattice = make_box_lattice()
    cfg = toy_config(seed=seed, **overrides)
    table = None
    if cfg.variant != "no_cu":
        table = precompute(surface, lattice, cfg.k_interp)
    return SuperResModel(cfg, surface, lattice, table)


def toy_frames(model, count=2, seed=0, amplitude=4.0):
    """Random displacement frames sized for a toy model, in mm."""
    from simsr.frames import DisplacementFrame

    rng = np.random.default_rng(seed)
    n = model.lattice.vertex_count
    m = model.surface.vertex_count
    frames = []
    for i in range(count):
        frames.append(DisplacementFrame(
            frame_id=i,
            params=rng.uniform(0.1, 0.9, 2).astype(np.float32),
            lr_disp=(amplitude * rng.standard_normal((n, 3))).astype(np.float32),
            hr_disp=(amplitude * rng.standard_normal((m, 3))).astype(np.float32),
        ))
    return frames
