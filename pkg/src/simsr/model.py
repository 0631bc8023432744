"""Three-stage surface super-resolution model.

Stage one encodes lattice displacements into per-vertex features through a
stack of edge-convolution submodules. Stage two lifts those features onto
the surface vertices by a learned softmax-weighted interpolation over each
vertex's precomputed geodesic neighborhood, with weights produced by a
sinusoidal MLP of rest-pose coordinates. Stage three decodes the lifted
features into per-vertex surface displacements with another sinusoidal MLP.

Two ablation variants are supported: "no_fe" feeds the position-encoded
input features straight into the interpolation stage, and "no_cu" replaces
the learned interpolation with a free per-vertex weight table over the k
Euclidean-nearest lattice vertices.

All geometry inside the model lives in normalized coordinates: an isotropic
affine map placing the surface rest bounding box inside [-1, 1]^3.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.spatial.distance import cdist

from . import nn
from . import tensor as T
from .geodesy import euclidean_knn, graph_distances

VARIANTS = ("full", "no_fe", "no_cu")
DEGENERATE_AREA = 1e-12


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyperparameters."""

    widths: tuple = (64, 128)        # submodule output widths D_1..D_S
    pe_levels: int = 5               # positional encoding frequency count L
    k_graph: int = 5                 # edge-convolution neighborhood size
    k_interp: int = 20               # interpolation neighbors per surface vertex
    alpha: float = 0.001             # face-normal loss weight
    beta_start: float = 0.001        # feature regularizer ramp start
    beta_end: float = 20.0           # feature regularizer ramp end
    lr: float = 1e-4
    batch_size: int = 6
    epochs: int = 2800
    seed: int = 0
    variant: str = "full"
    weight_hidden: tuple = (64, 64)  # interpolation-weight MLP hidden widths
    recon_hidden: tuple = (128,)     # reconstruction MLP hidden widths
    checkpoint_every: int = 0        # 0 = final checkpoint only

    def __post_init__(self):
        if self.s < 1:
            raise ModelError("at least one feature submodule is required")
        if any(w < 1 for w in self.widths) or self.pe_levels < 1:
            raise ModelError("widths and pe_levels must be positive")
        if self.k_graph < 1 or self.k_interp < 1:
            raise ModelError("neighborhood sizes must be positive")
        if self.alpha < 0 or self.beta_start < 0 or self.beta_end < 0:
            raise ModelError("loss weights must be non-negative")
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ModelError("batch_size and epochs must be positive")

    @property
    def s(self):
        """Submodule count S."""
        return len(self.widths)

    @property
    def d0(self):
        """Input feature width: 3 displacement components + 6 per encoding level."""
        return 3 + 6 * self.pe_levels

    @property
    def feature_width(self):
        """Width of the final concatenated per-vertex feature."""
        if self.variant == "no_fe":
            return self.d0
        return self.d0 + sum(self.widths)


_TUPLE_FIELDS = {"widths", "weight_hidden", "recon_hidden"}
_INT_FIELDS = {"pe_levels", "k_graph", "k_interp", "batch_size", "epochs", "seed", "checkpoint_every"}
_FLOAT_FIELDS = {"alpha", "beta_start", "beta_end", "lr"}


def save_config(path, config):
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(config):
            value = getattr(config, f.name)
            if f.name in _TUPLE_FIELDS:
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name} = {value}\n")


def load_config(path, base=None):
    """Parse `key = value` lines into a ModelConfig, over base (default config
    when omitted). Unknown keys and malformed lines raise."""
    base = base if base is not None else ModelConfig()
    known = {f.name for f in fields(base)}
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ModelError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ModelError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                if key in _TUPLE_FIELDS:
                    overrides[key] = tuple(int(v) for v in value.split(",") if v.strip())
                elif key in _INT_FIELDS:
                    overrides[key] = int(value)
                elif key in _FLOAT_FIELDS:
                    overrides[key] = float(value)
                else:
                    overrides[key] = value
            except ValueError as exc:
                raise ModelError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return replace(base, **overrides)


def positional_encode(positions, levels):
    """Sinusoidal encoding of (already normalized) coordinates.

    For each axis and level l in 0..levels-1 emits sin(2^l pi p) and
    cos(2^l pi p); output width is 6 * levels.
    """
    positions = np.asarray(positions, dtype=np.float64)
    cols = []
    for level in range(levels):
        angle = (2.0**level) * np.pi * positions
        cols.append(np.sin(angle))
        cols.append(np.cos(angle))
    return np.concatenate(cols, axis=1)


def lattice_edges(tetrahedra):
    """Unique undirected vertex pairs covered by the tetrahedra."""
    t = np.asarray(tetrahedra, dtype=np.int64)
    pairs = np.concatenate([t[:, [a, b]] for a in range(4) for b in range(a + 1, 4)])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def _knn_rows(distances, k):
    """Per-row k smallest entries excluding self, ties by lower index."""
    d = distances.copy()
    np.fill_diagonal(d, np.inf)
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    pd = np.take_along_axis(d, part, axis=1)
    order = np.lexsort((part, pd), axis=1)
    return np.take_along_axis(part, order, axis=1)


def _cross3(a, b):
    """Row-wise cross product of (F, 3) tensors."""
    ax, ay, az = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    bx, by, bz = b[:, 0:1], b[:, 1:2], b[:, 2:3]
    return T.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


@dataclass
class EncodedFeatures:
    """Per-lattice-vertex features: input encoding, submodule outputs, and
    their concatenation."""

    z0: T.Tensor
    zs: list
    final: T.Tensor


class SuperResModel:
    """Model context: config, rest-pose constants, and trainable parameters."""

    def __init__(self, config, surface, lattice, table=None):
        self.config = config
        self.surface = surface
        self.lattice = lattice
        self.table = table

        n = lattice.vertex_count
        if config.k_graph > n - 1:
            raise ModelError(f"k_graph={config.k_graph} exceeds lattice size {n} - 1")
        if config.variant != "no_cu":
            if table is None:
                raise ModelError(f"variant {config.variant!r} requires a neighborhood table")
            if table.k != config.k_interp:
                raise ModelError(f"table k={table.k} does not match k_interp={config.k_interp}")
            if len(table.indices) != surface.vertex_count:
                raise ModelError("neighborhood table row count does not match surface")
            if table.indices.max() >= n:
                raise ModelError("neighborhood table indexes beyond the lattice")

        # isotropic normalization from the surface rest bounding box
        lo = surface.vertices.min(axis=0)
        hi = surface.vertices.max(axis=0)
        self.center = 0.5 * (lo + hi)
        self.scale = float(max(0.5 * (hi - lo).max(), 1e-12))
        self.rest_surface = (surface.vertices - self.center) / self.scale
        self.rest_lattice = (lattice.vertices - self.center) / self.scale

        self.pe0 = positional_encode(self.rest_lattice, config.pe_levels)

        if config.variant != "no_fe":
            edges = lattice_edges(lattice.tetrahedra)
            lengths = np.linalg.norm(
                self.rest_lattice[edges[:, 1]] - self.rest_lattice[edges[:, 0]], axis=1
            )
            dist = graph_distances(n, edges, lengths, np.arange(n))
            self.rest_graph = _knn_rows(dist, config.k_graph)

        if config.variant == "no_cu":
            self.interp_idx, _ = euclidean_knn(
                self.rest_lattice, self.rest_surface, config.k_interp
            )
        else:
            self.interp_idx = np.ascontiguousarray(table.indices)
            # Eq-style interpolation input: surface coords, lattice coords,
            # and their Euclidean separation, all rest-pose and normalized
            k = config.k_interp
            xs = np.repeat(self.rest_surface, k, axis=0)
            xl = self.rest_lattice[self.interp_idx.ravel()]
            sep = np.linalg.norm(xl - xs, axis=1, keepdims=True)
            self.u = np.concatenate([xs, xl, sep], axis=1)  # (M*k, 7)

        self.params = {}
        self._init_params(np.random.default_rng(config.seed))

    # ------------------------------------------------------------------
    # parameters

    def _init_params(self, rng):
        cfg = self.config
        p = {}

        def add(name, arr):
            p[name] = T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)

        if cfg.variant != "no_fe":
            d_prev = cfg.d0
            for s, d in enumerate(cfg.widths, start=1):
                add(f"enc{s}.edge.w", nn.he_uniform_init(rng, 2 * d_prev, d))
                add(f"enc{s}.edge.b", np.zeros(d))
                add(f"enc{s}.fc.w", nn.he_uniform_init(rng, 3 * d + d_prev, d))
                add(f"enc{s}.fc.b", np.zeros(d))
                d_prev = d

        if cfg.variant == "no_cu":
            add("cu.table", np.full((self.surface.vertex_count, cfg.k_interp), 1.0 / cfg.k_interp))
        else:
            dims = (7,) + tuple(cfg.weight_hidden) + (1,)
            for i in range(len(dims) - 1):
                init = nn.siren_first_init if i == 0 else nn.siren_hidden_init
                add(f"wnet.l{i}.w", init(rng, dims[i], dims[i + 1]))
                add(f"wnet.l{i}.b", nn.bias_init(rng, dims[i], dims[i + 1]))

        dims = (cfg.feature_width,) + tuple(cfg.recon_hidden) + (3,)
        for i in range(len(dims) - 1):
            init = nn.siren_first_init if i == 0 else nn.siren_hidden_init
            add(f"recon.l{i}.w", init(rng, dims[i], dims[i + 1]))
            add(f"recon.l{i}.b", nn.bias_init(rng, dims[i], dims[i + 1]))

        self.params = p

    def load_params(self, tensors):
        """Install checkpoint values (cast to double) into matching names."""
        missing = set(self.params) - set(tensors)
        extra = set(tensors) - set(self.params)
        if missing or extra:
            raise ModelError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in tensors.items():
            if tuple(arr.shape) != self.params[name].shape:
                raise ModelError(f"checkpoint {name}: shape {arr.shape} != {self.params[name].shape}")
            if not np.isfinite(arr).all():
                raise ModelError(f"checkpoint {name}: non-finite values")
            self.params[name].values = arr.astype(np.float64)

    def snap_params_to_single(self):
        """Round parameters to single precision so a saved checkpoint restores
        them value-exactly."""
        for p in self.params.values():
            p.values = p.values.astype(np.float32).astype(np.float64)

    def export_params(self):
        return {name: p.values for name, p in self.params.items()}

    # ------------------------------------------------------------------
    # stages

    def normalize_disp(self, disp_mm):
        return np.asarray(disp_mm, dtype=np.float64) / self.scale

    def _edgeconv(self, z, idx, w, b):
        n, k = idx.shape
        centers = np.repeat(np.arange(n), k)
        zc = z[centers]
        zn = z[idx.ravel()]
        edge_in = T.concat([zc, zn - zc], axis=1)
        h = T.leaky_relu(nn.linear(edge_in, w, b))
        return T.reduce_max(T.reshape(h, (n, k, -1)), axis=1)

    def encode(self, lr_disp_norm):
        """Feature encoding: returns EncodedFeatures with Z_0, all Z_s, and
        the final concatenation."""
        return self.encode_batch(lr_disp_norm, 1)

    def encode_batch(self, disp_stack, count):
        """Feature encoding for `count` frames stacked along rows.

        Row b*N + i is lattice vertex i of frame b.  The max/avg context
        pools run per frame, and the feature-space graphs of the later
        submodules are rebuilt per frame with row offsets, so the stacked
        pass matches `count` separate single-frame passes.
        """
        cfg = self.config
        n = self.lattice.vertex_count
        disp = disp_stack if isinstance(disp_stack, T.Tensor) else T.Tensor(np.asarray(disp_stack, dtype=np.float64))
        if disp.shape != (count * n, 3):
            raise ModelError(f"lattice displacements must be ({count * n}, 3), got {disp.shape}")
        pe = self.pe0 if count == 1 else np.tile(self.pe0, (count, 1))
        z0 = T.concat([disp, T.Tensor(pe)], axis=1)
        if cfg.variant == "no_fe":
            return EncodedFeatures(z0, [], z0)

        rows = np.repeat(np.arange(count), n)
        zs = []
        z_prev = z0
        for s in range(1, cfg.s + 1):
            if s == 1:
                idx = (self.rest_graph[None] + np.arange(count)[:, None, None] * n).reshape(-1, cfg.k_graph)
            else:
                v = z_prev.values
                idx = np.concatenate([
                    _knn_rows(cdist(v[b * n:(b + 1) * n], v[b * n:(b + 1) * n]), cfg.k_graph) + b * n
                    for b in range(count)
                ])
            e = self._edgeconv(z_prev, idx, self.params[f"enc{s}.edge.w"], self.params[f"enc{s}.edge.b"])
            pooled = T.reshape(e, (count, n, -1))
            m_pool = T.reduce_max(pooled, axis=1)[rows]
            a_pool = T.reduce_mean(pooled, axis=1)[rows]
            mix = T.concat([e, m_pool, a_pool, z_prev], axis=1)
            z_s = T.leaky_relu(nn.linear(mix, self.params[f"enc{s}.fc.w"], self.params[f"enc{s}.fc.b"]))
            zs.append(z_s)
            z_prev = z_s
        return EncodedFeatures(z0, zs, T.concat([z0] + zs, axis=1))

    def interp_weights(self):
        """Interpolation weight matrix (M, k_interp) as a graph tensor.

        Depends only on rest geometry, so one evaluation per parameter
        update serves every frame in a batch.
        """
        cfg = self.config
        if cfg.variant == "no_cu":
            return self.params["cu.table"]
        x = T.Tensor(self.u)
        last = len(cfg.weight_hidden)
        for i in range(last + 1):
            w, b = self.params[f"wnet.l{i}.w"], self.params[f"wnet.l{i}.b"]
            x = nn.linear(x, w, b) if i == last else nn.siren_layer(x, w, b)
        logits = T.reshape(x, (self.surface.vertex_count, cfg.k_interp))
        return T.softmax(logits, axis=1)

    def upsample(self, encoded, weights=None):
        """Lift lattice features to surface vertices: z_j^H = sum_i w_ij z_i^L."""
        if weights is None:
            weights = self.interp_weights()
        return T.neighbor_interp(weights, encoded.final, self.interp_idx)

    def reconstruct(self, z_h):
        """Decode surface features into normalized per-vertex displacements."""
        if z_h.shape[1] != self.config.feature_width:
            raise ModelError(f"feature width {z_h.shape[1]} != configured {self.config.feature_width}")
        x = z_h
        last = len(self.config.recon_hidden)
        for i in range(last + 1):
            w, b = self.params[f"recon.l{i}.w"], self.params[f"recon.l{i}.b"]
            x = nn.linear(x, w, b) if i == last else nn.siren_layer(x, w, b)
        return x

    def forward(self, lr_disp_norm, weights=None):
        """Displacement prediction in normalized units, with intermediates."""
        encoded = self.encode(lr_disp_norm)
        pred = self.reconstruct(self.upsample(encoded, weights))
        return pred, encoded

    def upsample_batch(self, encoded, count, weights=None):
        """Batched feature lifting through one sparse product.

        Per-frame feature blocks are laid side by side so the shared weight
        matrix lifts every frame at once; the output rows come back
        vertex-major, i.e. row j*count + b is surface vertex j of frame b.
        """
        if weights is None:
            weights = self.interp_weights()
        n = self.lattice.vertex_count
        f = self.config.feature_width
        perm = np.arange(count * n).reshape(count, n).T.ravel()
        cols = T.reshape(encoded.final[perm], (n, count * f))
        z = T.neighbor_interp(weights, cols, self.interp_idx)
        return T.reshape(z, (self.surface.vertex_count * count, f))

    def forward_batch(self, disp_stack, count, weights=None):
        """Stacked prediction for a whole batch; rows vertex-major as in
        upsample_batch."""
        encoded = self.encode_batch(disp_stack, count)
        pred = self.reconstruct(self.upsample_batch(encoded, count, weights))
        return pred, encoded

    # ------------------------------------------------------------------
    # loss

    def target_face_normals(self, target_disp_norm):
        """Unit normals of the target surface (normalized coordinates), with a
        validity mask for degenerate faces."""
        pos = self.rest_surface + target_disp_norm
        tri = self.surface.triangles
        crosses = np.cross(pos[tri[:, 1]] - pos[tri[:, 0]], pos[tri[:, 2]] - pos[tri[:, 0]])
        norms = np.linalg.norm(crosses, axis=1)
        valid = 0.5 * norms > DEGENERATE_AREA
        normals = np.zeros_like(crosses)
        normals[valid] = crosses[valid] / norms[valid, None]
        return normals, valid

    def loss(self, pred, target_disp_norm, encoded, beta, target_normals=None):
        """Total training loss and its components.

        L = sum_j |pred_j - target_j|_1
          + alpha * sum_faces (1 - cos(predicted normal, target normal))
          + beta * sum_{s,i} |z_{s,i}|_2

        Faces whose predicted (or target) area falls below 1e-12 are skipped
        in the normal term and counted in the returned dict.
        """
        normals = None if target_normals is None else [target_normals]
        return self.loss_batch(pred, target_disp_norm, encoded, beta, 1, normals)

    def loss_batch(self, pred, target_stack, encoded, beta, count, target_normals=None):
        """Loss over `count` stacked frames, summed per frame and divided by
        the frame count; `pred` and `target_stack` rows are vertex-major as
        produced by forward_batch."""
        cfg = self.config
        target = np.asarray(target_stack, dtype=np.float64)
        if pred.shape != target.shape:
            raise ModelError(f"prediction shape {pred.shape} != target {target.shape}")
        if pred.shape[0] != self.surface.vertex_count * count:
            raise ModelError(
                f"expected {self.surface.vertex_count * count} stacked rows, got {pred.shape[0]}"
            )
        recon = T.l1_distance(pred, T.Tensor(target))

        if target_normals is None:
            target_normals = [self.target_face_normals(target[b::count]) for b in range(count)]
        tgt_n = np.concatenate([nb[0] for nb in target_normals])
        tgt_valid = np.concatenate([nb[1] for nb in target_normals])

        tri = self.surface.triangles
        tri_all = np.concatenate([tri * count + b for b in range(count)])
        rest = self.rest_surface if count == 1 else np.repeat(self.rest_surface, count, axis=0)
        pred_pos_np = rest + pred.values
        pred_cross_np = np.cross(
            pred_pos_np[tri_all[:, 1]] - pred_pos_np[tri_all[:, 0]],
            pred_pos_np[tri_all[:, 2]] - pred_pos_np[tri_all[:, 0]],
        )
        pred_valid = 0.5 * np.linalg.norm(pred_cross_np, axis=1) > DEGENERATE_AREA
        mask = pred_valid & tgt_valid
        skipped = int(len(tri_all) - mask.sum())

        if mask.any():
            tri_m = tri_all[mask]
            pos = pred + T.Tensor(rest)
            v0 = pos[tri_m[:, 0]]
            cross = _cross3(pos[tri_m[:, 1]] - v0, pos[tri_m[:, 2]] - v0)
            dot = T.reduce_sum(cross * T.Tensor(tgt_n[mask]), axis=1)
            cos_sim = dot / T.l2_norm(cross, axis=1)
            fn = float(mask.sum()) - T.reduce_sum(cos_sim)
        else:
            fn = T.Tensor(np.array(0.0))

        if encoded.zs:
            reg = T.reduce_sum(T.l2_norm(encoded.zs[0], axis=1))
            for z_s in encoded.zs[1:]:
                reg = reg + T.reduce_sum(T.l2_norm(z_s, axis=1))
        else:
            reg = T.Tensor(np.array(0.0))

        total = recon + cfg.alpha * fn + beta * reg
        if count > 1:  # report per-frame means
            inv = 1.0 / count
            recon, fn, reg, total = inv * recon, inv * fn, inv * reg, inv * total
        return {"total": total, "recon": recon, "fn": fn, "reg": reg, "skipped_faces": skipped}

    # ------------------------------------------------------------------
    # inference

    def infer(self, lr_disp_mm, weights=None):
        """Predicted surface positions in millimeters for one lattice frame."""
        pred, _ = self.forward(self.normalize_disp(lr_disp_mm), weights)
        return self.surface.vertices + pred.values * self.scale

    def infer_displacement(self, lr_disp_mm, weights=None):
        """Predicted surface displacements in millimeters."""
        pred, _ = self.forward(self.normalize_disp(lr_disp_mm), weights)
        return pred.values * self.scale
