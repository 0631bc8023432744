"""Procedural generator of paired coarse/fine displacement datasets.

The fine mesh is a curved patch (a grid with a tall narrow ridge) enclosed
by a coarse tetrahedral box lattice.  One activation vector p drives both
resolutions each frame:

    fine   displacement = sum_a p_a * bulk_a(x) + wrinkle(x) * strain(x, p)
    coarse displacement = sum_a p_a * bulk_a(x) + bias(x) * ||p||

Bulk fields are broad, overlapping Gaussian bumps both resolutions
resolve.  The wrinkle is a sinusoid too fine for the lattice to sample,
phased along the surface arc length so it stretches over the ridge; its
local amplitude follows the slope of the bulk field across the patch
(material bunching where the coarse field bends), a spatial derivative of
the coarse state.  Because the bumps overlap, the field's value at a point
does not determine its slope there, so a pointwise map of convex-averaged
coarse samples cannot recover the wrinkle; it takes features built from
differences between neighboring coarse samples.  The bias is a smooth
systematic offset only the coarse side carries, giving direct coarse
interpolation an error floor however dense the fit.

Activation trajectories are smoothed random walks squashed into (0.05,
0.95), one independent stream per family; train/test splits are by family,
never by frame.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.ndimage import uniform_filter1d

from .frames import DisplacementFrame, save_frames
from .meshes import (
    EmbeddingError,
    LatticeMesh,
    SurfaceMesh,
    embed_surface,
    save_lattice,
    save_surface,
)

MANIFEST_VERSION = 1


class DatagenError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    """Geometry, field, and trajectory parameters; fully deterministic per seed."""

    hr_nu: int = 48                 # fine grid vertices along x
    hr_nv: int = 48                 # fine grid vertices along y
    patch_size: float = 94.0        # patch side length, mm
    ridge_height: float = 18.0      # ridge peak height, mm
    ridge_width: float = 0.10       # ridge Gaussian width, fraction of patch_size
    lr_cells: tuple = (6, 6, 3)     # lattice cells per axis
    margin: float = 5.0             # lattice clearance beyond the surface bbox, mm
    lattice_jitter: float = 0.0     # uniform jitter of interior lattice nodes, mm
    channels: int = 4               # activation channel count A
    bump_amp: float = 12.0          # bulk bump amplitude, mm
    bump_width: float = 30.0        # bulk bump Gaussian width, mm; broad so bumps overlap
    bump_radius: float = 0.30       # bump-center ring radius, fraction of patch_size
    wrinkle_amp: float = 8.0        # wrinkle amplitude at unit strain, mm
    wrinkle_freq: float = 6.0       # wrinkle periods per flat patch length
    bias_amp: float = 2.0           # coarse bias amplitude, mm
    walk_step: float = 0.18         # activation random-walk step scale
    smooth_window: int = 9          # trajectory moving-average width, frames
    families: int = 4
    frames_per_family: int = 60
    train_families: tuple = (0, 1)
    test_families: tuple = (2, 3)
    seed: int = 0

    def __post_init__(self):
        if self.hr_nu < 2 or self.hr_nv < 2:
            raise DatagenError("fine grid needs at least 2 vertices per axis")
        if len(self.lr_cells) != 3 or any(c < 1 for c in self.lr_cells):
            raise DatagenError(f"lr_cells must be three positive counts, got {self.lr_cells}")
        if self.hr_nu * self.hr_nv <= self.lattice_nodes:
            raise DatagenError("fine vertex count must exceed lattice vertex count")
        if self.patch_size <= 0 or self.ridge_width <= 0:
            raise DatagenError("patch_size and ridge_width must be positive")
        if self.channels < 1:
            raise DatagenError("at least one activation channel is required")
        if self.frames_per_family < 1 or self.families < 1:
            raise DatagenError("families and frames_per_family must be positive")
        if self.smooth_window < 1:
            raise DatagenError("smooth_window must be positive")
        used = tuple(self.train_families) + tuple(self.test_families)
        if len(set(used)) != len(used):
            raise DatagenError("train and test families must be disjoint")
        if any(f < 0 or f >= self.families for f in used):
            raise DatagenError(f"family index out of range in {used}")

    @property
    def lattice_nodes(self):
        cx, cy, cz = self.lr_cells
        return (cx + 1) * (cy + 1) * (cz + 1)


_INT_FIELDS = {
    "hr_nu", "hr_nv", "channels", "families", "frames_per_family",
    "smooth_window", "seed",
}
_TUPLE_INT_FIELDS = {"lr_cells", "train_families", "test_families"}


def save_gen_config(path, config):
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(config):
            value = getattr(config, f.name)
            if f.name in _TUPLE_INT_FIELDS:
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name} = {value}\n")


def load_gen_config(path, base=None):
    """Read `key = value` lines; unknown keys or bad values raise DatagenError."""
    known = {f.name for f in fields(GenConfig)}
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DatagenError(f"{path}:{lineno}: expected `key = value`")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise DatagenError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                if key in _TUPLE_INT_FIELDS:
                    value = tuple(int(v) for v in text.split(",") if v.strip())
                elif key in _INT_FIELDS:
                    value = int(text)
                else:
                    value = float(text)
            except ValueError as exc:
                raise DatagenError(f"{path}:{lineno}: bad value for {key}: {text!r}") from exc
            overrides[key] = value
    return replace(base if base is not None else GenConfig(), **overrides)


# ---------------------------------------------------------------------------
# geometry

def ridge_profile(config, x):
    """Ridge height as a function of the x coordinate."""
    u = (np.asarray(x, dtype=np.float64) / config.patch_size - 0.5) / config.ridge_width
    return config.ridge_height * np.exp(-(u**2))


def arc_length(config, x):
    """Arc length along the ridge profile from x = 0, via dense quadrature."""
    xs = np.linspace(0.0, config.patch_size, 4097)
    u = (xs / config.patch_size - 0.5) / config.ridge_width
    slope = ridge_profile(config, xs) * (-2.0 * u) / (config.ridge_width * config.patch_size)
    s = np.concatenate([[0.0], cumulative_trapezoid(np.sqrt(1.0 + slope**2), xs)])
    return np.interp(np.asarray(x, dtype=np.float64), xs, s)


def build_surface(config):
    """Fine grid patch over [0, patch_size]^2 with the ridge as heightfield."""
    nu, nv = config.hr_nu, config.hr_nv
    x = np.linspace(0.0, config.patch_size, nu)
    y = np.linspace(0.0, config.patch_size, nv)
    gx, gy = np.meshgrid(x, y, indexing="ij")
    verts = np.stack([gx, gy, ridge_profile(config, gx)], axis=-1).reshape(-1, 3)
    tris = []
    for i in range(nu - 1):
        for j in range(nv - 1):
            a = i * nv + j
            b = a + nv
            tris.append((a, b, b + 1))
            tris.append((a, b + 1, a + 1))
    return SurfaceMesh.from_arrays(verts, np.array(tris, dtype=np.int64))


def _kuhn_tets(node_index, cells):
    cx, cy, cz = cells
    corners_of = [
        (0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0),
        (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1),
    ]
    # 6-tetrahedra split of the unit cube along the (0,0,0)-(1,1,1) diagonal
    pattern = [
        (0, 1, 3, 7), (0, 1, 7, 5), (0, 5, 7, 4),
        (0, 3, 2, 7), (0, 2, 6, 7), (0, 6, 4, 7),
    ]
    tets = []
    for i in range(cx):
        for j in range(cy):
            for k in range(cz):
                ids = [node_index[i + di, j + dj, k + dk] for di, dj, dk in corners_of]
                for tet in pattern:
                    tets.append([ids[c] for c in tet])
    return np.array(tets, dtype=np.int64)


def build_lattice(config, surface):
    """Coarse tetrahedral box covering the surface bbox plus margin."""
    lo = surface.vertices.min(axis=0) - config.margin
    hi = surface.vertices.max(axis=0) + config.margin
    cx, cy, cz = config.lr_cells
    xs = np.linspace(lo[0], hi[0], cx + 1)
    ys = np.linspace(lo[1], hi[1], cy + 1)
    zs = np.linspace(lo[2], hi[2], cz + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.stack([gx, gy, gz], axis=-1)
    if config.lattice_jitter > 0:
        rng = np.random.default_rng([config.seed, 29])
        shift = rng.uniform(-config.lattice_jitter, config.lattice_jitter, nodes.shape)
        shift[0, :, :] = 0.0
        shift[-1, :, :] = 0.0
        shift[:, 0, :] = 0.0
        shift[:, -1, :] = 0.0
        shift[:, :, 0] = 0.0
        shift[:, :, -1] = 0.0
        nodes = nodes + shift
    node_index = np.arange(nodes[..., 0].size).reshape(nodes.shape[:3])
    return LatticeMesh.from_arrays(nodes.reshape(-1, 3), _kuhn_tets(node_index, config.lr_cells))


# ---------------------------------------------------------------------------
# displacement fields

def _bump_centers(config):
    a = np.arange(config.channels)
    angle = 2.0 * np.pi * a / config.channels + np.pi / 4.0
    half = 0.5 * config.patch_size
    r = config.bump_radius * config.patch_size
    return np.stack([half + r * np.cos(angle), half + r * np.sin(angle)], axis=1)


def _bump_directions(config):
    # All channels displace along z. Tilted per-channel directions would let
    # the lateral value components reveal the channel mix, and with it the
    # field's slope; keeping one direction caps the pointwise value
    # information at a single functional of p.
    return np.tile(np.array([0.0, 0.0, 1.0]), (config.channels, 1))


def bulk_fields(config, points):
    """Per-channel broad displacement fields, shape (A, P, 3).

    Gaussian in the horizontal plane only, so lattice and surface points at
    the same (x, y) displace identically regardless of height.
    """
    pts = np.asarray(points, dtype=np.float64)
    centers = _bump_centers(config)
    d2 = (pts[None, :, 0] - centers[:, 0, None]) ** 2 + (pts[None, :, 1] - centers[:, 1, None]) ** 2
    gauss = config.bump_amp * np.exp(-d2 / config.bump_width**2)
    return gauss[:, :, None] * _bump_directions(config)[:, None, :]


def wrinkle_field(config, points):
    """High-frequency detail field, shape (P, 3); z-directed sinusoid phased
    by arc length across the ridge so its spatial period follows the surface."""
    pts = np.asarray(points, dtype=np.float64)
    s = arc_length(config, pts[:, 0])
    phase_u = 2.0 * np.pi * config.wrinkle_freq * s / config.patch_size
    phase_v = 2.0 * np.pi * config.wrinkle_freq * pts[:, 1] / config.patch_size
    out = np.zeros_like(pts)
    out[:, 2] = config.wrinkle_amp * np.sin(phase_u) * np.sin(phase_v)
    return out


def bias_field(config, points):
    """Smooth systematic offset carried only by the coarse side, shape (P, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    direction = np.array([0.3, -0.2, 1.0])
    direction /= np.linalg.norm(direction)
    shape = np.cos(np.pi * (pts[:, 0] / config.patch_size - 0.5)) * np.cos(
        np.pi * (pts[:, 1] / config.patch_size - 0.5)
    )
    return config.bias_amp * shape[:, None] * direction


def strain_gain(config, points, p):
    """Dimensionless bending signal, shape (P,): the y-slope of the bulk
    z field, relative to a single bump's peak slope.

    Linear in p and zero wherever the bulk field is flat.  It is a property
    of the coarse field's spatial variation rather than its value, and with
    overlapping bumps the value at a point leaves the slope ambiguous.
    """
    pts = np.asarray(points, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if config.bump_amp == 0.0:
        return np.zeros(len(pts))
    centers = _bump_centers(config)
    dz = _bump_directions(config)[:, 2]
    d2 = (pts[None, :, 0] - centers[:, 0, None]) ** 2 + (pts[None, :, 1] - centers[:, 1, None]) ** 2
    gauss = config.bump_amp * np.exp(-d2 / config.bump_width**2)
    dy = pts[None, :, 1] - centers[:, 1, None]
    slope = np.einsum("a,ap->p", p * dz, gauss * (-2.0 * dy) / config.bump_width**2)
    peak = np.sqrt(2.0) * np.exp(-0.5) * config.bump_amp / config.bump_width
    return slope / peak


def hr_displacement(config, points, p):
    """Fine-side field: activation-weighted bulk plus strain-driven wrinkle."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (config.channels,):
        raise DatagenError(f"activation vector must have shape ({config.channels},)")
    bulk = np.einsum("a,apc->pc", p, bulk_fields(config, points))
    return bulk + wrinkle_field(config, points) * strain_gain(config, points, p)[:, None]


def lr_displacement(config, points, p):
    """Coarse-side field: same bulk term plus the norm-scaled bias."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (config.channels,):
        raise DatagenError(f"activation vector must have shape ({config.channels},)")
    bulk = np.einsum("a,apc->pc", p, bulk_fields(config, points))
    return bulk + bias_field(config, points) * float(np.linalg.norm(p))


# ---------------------------------------------------------------------------
# trajectories and frame assembly

def activation_trajectory(config, family):
    """Smoothed random walk in (0.05, 0.95), shape (frames, A); independent
    stream per family."""
    if family < 0 or family >= config.families:
        raise DatagenError(f"family {family} out of range [0, {config.families})")
    rng = np.random.default_rng([config.seed, 17, family])
    walk = np.cumsum(rng.standard_normal((config.frames_per_family, config.channels)), axis=0)
    walk = uniform_filter1d(walk * config.walk_step, size=config.smooth_window, axis=0, mode="nearest")
    return 0.5 + 0.45 * np.tanh(walk)


def family_frames(config, surface, lattice, family):
    out = []
    base = family * config.frames_per_family
    for t, p in enumerate(activation_trajectory(config, family)):
        out.append(DisplacementFrame(
            frame_id=base + t,
            params=p,
            lr_disp=lr_displacement(config, lattice.vertices, p),
            hr_disp=hr_displacement(config, surface.vertices, p),
        ))
    return out


@dataclass(frozen=True)
class DatasetManifest:
    surface_path: str
    lattice_path: str
    frames_path: str
    table_path: str
    train_ids: tuple
    test_ids: tuple
    config: GenConfig
    version: int = MANIFEST_VERSION


def save_manifest(path, manifest):
    doc = {
        "version": manifest.version,
        "surface": os.path.basename(manifest.surface_path),
        "lattice": os.path.basename(manifest.lattice_path),
        "frames": os.path.basename(manifest.frames_path),
        "table": os.path.basename(manifest.table_path),
        "train_ids": list(manifest.train_ids),
        "test_ids": list(manifest.test_ids),
        "config": {
            f.name: (list(v) if isinstance(v := getattr(manifest.config, f.name), tuple) else v)
            for f in fields(manifest.config)
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatagenError(f"unreadable manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise DatagenError(f"unsupported manifest version {doc.get('version')!r}")
    raw = doc["config"]
    cfg = GenConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    return DatasetManifest(
        surface_path=os.path.join(base, doc["surface"]),
        lattice_path=os.path.join(base, doc["lattice"]),
        frames_path=os.path.join(base, doc["frames"]),
        table_path=os.path.join(base, doc["table"]),
        train_ids=tuple(doc["train_ids"]),
        test_ids=tuple(doc["test_ids"]),
        config=cfg,
    )


def generate(config, out_dir):
    """Build meshes and all family trajectories, write every artifact, and
    return (manifest, surface, lattice, frames)."""
    surface = build_surface(config)
    lattice = build_lattice(config, surface)
    try:
        embed_surface(surface, lattice)
    except EmbeddingError as exc:
        raise DatagenError(f"lattice does not enclose the surface: {exc}") from exc

    frames = []
    for family in range(config.families):
        frames.extend(family_frames(config, surface, lattice, family))

    def ids_of(fams):
        return tuple(
            f * config.frames_per_family + t
            for f in fams for t in range(config.frames_per_family)
        )

    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(
        surface_path=os.path.join(out_dir, "surface.obj"),
        lattice_path=os.path.join(out_dir, "lattice.obj"),
        frames_path=os.path.join(out_dir, "frames.ssrf"),
        table_path=os.path.join(out_dir, "table.ssnt"),
        train_ids=ids_of(config.train_families),
        test_ids=ids_of(config.test_families),
        config=config,
    )
    save_surface(manifest.surface_path, surface)
    save_lattice(manifest.lattice_path, lattice)
    save_frames(manifest.frames_path, lattice.vertex_count, surface.vertex_count, frames)
    save_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest, surface, lattice, frames


# ---------------------------------------------------------------------------
# out-of-family perturbations

def perturb_dynamics(frames, amplitude, period=40.0):
    """Add slow oscillatory rigid and low-mode offsets to the coarse side of a
    time-ordered sequence; fine targets are left untouched."""
    if len(frames) < 2:
        raise DatagenError("dynamics perturbation needs a time axis (>= 2 frames)")
    if period <= 0:
        raise DatagenError("oscillation period must be positive")
    if amplitude == 0:
        return [replace(fr) for fr in frames]
    rigid_dir = np.array([1.0, 0.3, 0.15])
    rigid_dir /= np.linalg.norm(rigid_dir)
    out = []
    for t, fr in enumerate(frames):
        osc = np.sin(2.0 * np.pi * t / period)
        lr = fr.lr_disp.astype(np.float64)
        n = len(lr)
        mode = np.sin(np.pi * np.arange(n) / max(n - 1, 1))
        lr = lr + amplitude * osc * rigid_dir
        lr[:, 2] += 0.5 * amplitude * np.sin(4.0 * np.pi * t / period) * mode
        out.append(replace(fr, lr_disp=lr))
    return out


def perturb_force(frame, lattice_rest, site, magnitude, direction=(0.0, 0.0, 1.0), rho=10.0):
    """Add a localized Gaussian pull magnitude*exp(-|x-site|^2/rho^2)*direction
    to the coarse displacements of one frame."""
    pts = np.asarray(lattice_rest, dtype=np.float64)
    site = np.asarray(site, dtype=np.float64)
    if site.shape != (3,):
        raise DatagenError("site must be a 3-vector")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if (site < lo).any() or (site > hi).any():
        raise DatagenError(f"site {site.tolist()} outside lattice bounds {lo.tolist()}..{hi.tolist()}")
    if rho <= 0:
        raise DatagenError("kernel radius must be positive")
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise DatagenError("direction must be nonzero")
    direction = direction / norm
    if magnitude == 0:
        return replace(frame)
    kernel = np.exp(-np.sum((pts - site) ** 2, axis=1) / rho**2)
    return replace(frame, lr_disp=frame.lr_disp.astype(np.float64) + magnitude * kernel[:, None] * direction)
