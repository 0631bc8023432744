"""Model stages: positional encoding, edge convolution, learned interpolation,
reconstruction, and the composite loss."""

import numpy as np
import pytest

from simsr import tensor as T
from simsr.geodesy import NeighborhoodTable, precompute
from simsr.meshes import SurfaceMesh
from simsr.model import (
    EncodedFeatures, ModelConfig, ModelError, SuperResModel,
    lattice_edges, load_config, positional_encode, save_config,
)

from conftest import make_box_lattice, make_grid_surface, make_toy_model, toy_config, toy_frames


# ---------------------------------------------------------------------------
# config

def test_config_defaults_match_reference_scale():
    cfg = ModelConfig()
    assert cfg.s == 2
    assert cfg.widths == (64, 128)
    assert cfg.k_graph == 5
    assert cfg.k_interp == 20
    assert cfg.alpha == 0.001
    assert (cfg.beta_start, cfg.beta_end) == (0.001, 20.0)
    assert cfg.lr == 1e-4
    assert cfg.batch_size == 6
    assert cfg.d0 == 3 + 6 * cfg.pe_levels
    assert cfg.feature_width == cfg.d0 + 64 + 128


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(widths=())
    with pytest.raises(ModelError):
        ModelConfig(k_interp=0)
    with pytest.raises(ModelError):
        ModelConfig(variant="???")
    with pytest.raises(ModelError):
        ModelConfig(alpha=-0.1)


def test_config_file_round_trip(tmp_path):
    cfg = toy_config(variant="no_cu", alpha=0.25, epochs=17)
    path = tmp_path / "model.cfg"
    save_config(path, cfg)
    assert load_config(path) == cfg


def test_config_file_errors(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("bogus_key = 3\n")
    with pytest.raises(ModelError):
        load_config(path)
    path.write_text("epochs = three\n")
    with pytest.raises(ModelError):
        load_config(path)
    path.write_text("no equals sign\n")
    with pytest.raises(ModelError):
        load_config(path)


def test_config_file_comments_and_partial(tmp_path):
    path = tmp_path / "partial.cfg"
    path.write_text("# comment line\nk_interp = 9   # trailing comment\n\nwidths = 8,16,32\n")
    cfg = load_config(path)
    assert cfg.k_interp == 9
    assert cfg.widths == (8, 16, 32)
    assert cfg.lr == ModelConfig().lr


# ---------------------------------------------------------------------------
# positional encoding

def test_positional_encode_at_origin():
    out = positional_encode(np.zeros((2, 3)), levels=5)
    assert out.shape == (2, 30)
    # sin blocks all zero, cos blocks all one
    for level in range(5):
        assert np.allclose(out[:, 6 * level : 6 * level + 3], 0.0, atol=1e-12)
        assert np.allclose(out[:, 6 * level + 3 : 6 * level + 6], 1.0, atol=1e-12)


def test_positional_encode_unit_x():
    out = positional_encode(np.array([[1.0, 0.0, 0.0]]), levels=1)
    assert abs(out[0, 0]) < 1e-9          # sin(pi)
    assert abs(out[0, 3] + 1.0) < 1e-9    # cos(pi) = -1


def test_positional_encode_width():
    assert positional_encode(np.zeros((4, 3)), levels=7).shape == (4, 42)


def test_lattice_edges_of_single_tet():
    edges = lattice_edges(np.array([[0, 1, 2, 3]]))
    assert len(edges) == 6
    assert np.array_equal(edges[0], [0, 1])


# ---------------------------------------------------------------------------
# edge convolution

def test_edgeconv_two_vertex_hand_value():
    # scalar features [1, 3], mutual neighbors, edge map w.[z_i, z_j - z_i]
    # with w = (1, 1): vertex 0 -> 1 + 2 = 3, vertex 1 -> 3 - 2 = 1
    model = make_toy_model()
    z = T.Tensor(np.array([[1.0], [3.0]]))
    idx = np.array([[1], [0]])
    w = T.Tensor(np.array([[1.0], [1.0]]))
    b = T.Tensor(np.zeros(1))
    out = model._edgeconv(z, idx, w, b)
    assert np.allclose(out.values, [[3.0], [1.0]], atol=1e-12)


def test_encode_output_shapes():
    model = make_toy_model()
    cfg = model.config
    n = model.lattice.vertex_count
    enc = model.encode(np.zeros((n, 3)))
    assert enc.z0.shape == (n, cfg.d0)
    assert [z.shape for z in enc.zs] == [(n, 4), (n, 5)]
    assert enc.final.shape == (n, cfg.feature_width)


def test_encode_rejects_wrong_vertex_count():
    model = make_toy_model()
    with pytest.raises(ModelError):
        model.encode(np.zeros((3, 3)))


def test_encode_equivariant_under_vertex_relabeling():
    from simsr.meshes import LatticeMesh

    # jittered lattice: neighbor selection must not depend on tie-breaking
    surface = make_grid_surface(nu=4, nv=4, jitter=1.5, seed=3)
    lattice = make_box_lattice(jitter=0.8, seed=5)
    table = precompute(surface, lattice, 3)
    model_a = SuperResModel(toy_config(seed=3), surface, lattice, table)
    n = lattice.vertex_count
    rng = np.random.default_rng(8)
    perm = rng.permutation(n)
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    lattice_b = LatticeMesh.from_arrays(lattice.vertices[perm], inv[lattice.tetrahedra])
    model_b = SuperResModel(model_a.config, surface, lattice_b, table)

    disp = rng.standard_normal((n, 3))
    out_a = model_a.encode(disp).final.values
    out_b = model_b.encode(disp[perm]).final.values
    assert np.allclose(out_b, out_a[perm], atol=1e-10)


# ---------------------------------------------------------------------------
# upsampling

def test_interp_weight_rows_sum_to_one():
    model = make_toy_model()
    w = model.interp_weights()
    assert w.shape == (model.surface.vertex_count, model.config.k_interp)
    assert np.allclose(w.values.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w.values > 0.0)


def test_upsample_reproduces_constant_features():
    model = make_toy_model()
    n = model.lattice.vertex_count
    row = np.arange(model.config.feature_width, dtype=np.float64)
    enc = EncodedFeatures(None, [], T.Tensor(np.tile(row, (n, 1))))
    out = model.upsample(enc)
    assert np.allclose(out.values, row, atol=1e-12)


def test_upsample_bounded_by_neighbor_extremes():
    # convex combination: each output channel lies in the neighbors' range
    for trial in range(100):
        model = make_toy_model(seed=trial)
        rng = np.random.default_rng(1000 + trial)
        feats = rng.standard_normal((model.lattice.vertex_count, model.config.feature_width))
        out = model.upsample(EncodedFeatures(None, [], T.Tensor(feats))).values
        nbr = feats[model.interp_idx]  # (M, k, F)
        assert np.all(out <= nbr.max(axis=1) + 1e-9)
        assert np.all(out >= nbr.min(axis=1) - 1e-9)


def test_upsample_k1_copies_single_neighbor():
    model = make_toy_model(k_interp=1)
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((model.lattice.vertex_count, model.config.feature_width))
    out = model.upsample(EncodedFeatures(None, [], T.Tensor(feats)))
    assert np.allclose(out.values, feats[model.interp_idx[:, 0]], atol=1e-12)


def test_upsample_constant_net_averages():
    model = make_toy_model()
    last = len(model.config.weight_hidden)
    model.params[f"wnet.l{last}.w"].values[:] = 0.0
    model.params[f"wnet.l{last}.b"].values[:] = 0.0
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((model.lattice.vertex_count, model.config.feature_width))
    out = model.upsample(EncodedFeatures(None, [], T.Tensor(feats)))
    assert np.allclose(out.values, feats[model.interp_idx].mean(axis=1), atol=1e-12)


def test_table_k_mismatch_rejected():
    surface = make_grid_surface(nu=4, nv=4, jitter=1.5)
    lattice = make_box_lattice()
    table = precompute(surface, lattice, 2)
    with pytest.raises(ModelError):
        SuperResModel(toy_config(k_interp=3), surface, lattice, table)


def test_missing_table_rejected():
    surface = make_grid_surface(nu=4, nv=4, jitter=1.5)
    with pytest.raises(ModelError):
        SuperResModel(toy_config(), surface, make_box_lattice(), None)


# ---------------------------------------------------------------------------
# reconstruction and inference

def test_zero_final_layer_predicts_rest_pose():
    model = make_toy_model()
    last = len(model.config.recon_hidden)
    model.params[f"recon.l{last}.w"].values[:] = 0.0
    model.params[f"recon.l{last}.b"].values[:] = 0.0
    lr = np.random.default_rng(0).standard_normal((model.lattice.vertex_count, 3))
    assert np.allclose(model.infer(lr), model.surface.vertices, atol=1e-12)


def test_reconstruct_shares_weights_across_rows():
    model = make_toy_model()
    row = np.random.default_rng(1).standard_normal(model.config.feature_width)
    out = model.reconstruct(T.Tensor(np.tile(row, (5, 1))))
    assert out.shape == (5, 3)
    assert np.allclose(out.values, out.values[0], atol=1e-12)


def test_reconstruct_width_mismatch():
    model = make_toy_model()
    with pytest.raises(ModelError):
        model.reconstruct(T.Tensor(np.zeros((4, 2))))


def test_inference_deterministic():
    model = make_toy_model()
    lr = np.random.default_rng(3).standard_normal((model.lattice.vertex_count, 3))
    assert np.array_equal(model.infer(lr), model.infer(lr))


def test_variant_no_fe_uses_input_features_only():
    model = make_toy_model(variant="no_fe")
    enc = model.encode(np.zeros((model.lattice.vertex_count, 3)))
    assert enc.zs == []
    assert enc.final.shape[1] == model.config.d0
    assert not any(name.startswith("enc") for name in model.params)
    lr = np.random.default_rng(0).standard_normal((model.lattice.vertex_count, 3))
    assert model.infer(lr).shape == (model.surface.vertex_count, 3)


def test_variant_no_cu_uses_free_weight_table():
    model = make_toy_model(variant="no_cu")
    assert "cu.table" in model.params
    assert not any(name.startswith("wnet") for name in model.params)
    w = model.interp_weights()
    assert np.allclose(w.values, 1.0 / model.config.k_interp)
    lr = np.random.default_rng(0).standard_normal((model.lattice.vertex_count, 3))
    assert model.infer(lr).shape == (model.surface.vertex_count, 3)


# ---------------------------------------------------------------------------
# loss

def _toy_targets(model, seed=0, amplitude=0.1):
    rng = np.random.default_rng(seed)
    lr = rng.standard_normal((model.lattice.vertex_count, 3))
    target = amplitude * rng.standard_normal((model.surface.vertex_count, 3))
    return lr, target


def test_loss_zero_when_prediction_matches_target():
    model = make_toy_model()
    _, target = _toy_targets(model)
    pred = T.Tensor(target.copy(), requires_grad=False)
    enc = model.encode(np.zeros((model.lattice.vertex_count, 3)))
    terms = model.loss(pred, target, enc, beta=0.5)
    assert float(terms["recon"].values) < 1e-12
    assert abs(float(terms["fn"].values)) < 1e-9
    assert terms["skipped_faces"] == 0


def test_loss_l1_of_single_offset_component():
    model = make_toy_model()
    _, target = _toy_targets(model)
    shifted = target.copy()
    shifted[5, 0] += 1.0
    terms = model.loss(T.Tensor(shifted), target, model.encode(np.zeros((8, 3))), beta=0.0)
    assert abs(float(terms["recon"].values) - 1.0) < 1e-12


def test_flipped_face_contributes_two():
    from simsr.meshes import LatticeMesh

    # quad strip; moving vertex 1 across the diagonal flips face (0,1,2)'s
    # normal exactly (cos -1 -> contributes 2) and leaves face (0,2,3) alone
    surface = SurfaceMesh.from_arrays(
        np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [10.0, 10.0, 0.0], [0.0, 10.0, 0.0]]),
        np.array([[0, 1, 2], [0, 2, 3]]),
    )
    lattice = LatticeMesh.from_arrays(
        np.array([[-20.0, -20.0, -5.0], [40.0, -20.0, -5.0], [-20.0, 40.0, -5.0], [5.0, 5.0, 40.0]]),
        np.array([[0, 1, 2, 3]]),
    )
    table = precompute(surface, lattice, 1)
    model = SuperResModel(toy_config(k_interp=1), surface, lattice, table)
    target = np.zeros((4, 3))
    pred = target.copy()
    pred[1] = np.array([-10.0, 10.0, 0.0]) / model.scale  # vertex 1 -> (0, 10, 0)
    terms = model.loss(T.Tensor(pred), target, model.encode(np.zeros((4, 3))), beta=0.0)
    assert abs(float(terms["fn"].values) - 2.0) < 1e-9


def test_degenerate_predicted_face_skipped_and_counted():
    model = make_toy_model()
    _, target = _toy_targets(model)
    pred = target.copy()
    tri = model.surface.triangles[0]
    # collapse the first face onto a single point
    base = model.rest_surface[tri[0]] + target[tri[0]]
    for v in tri:
        pred[v] = base - model.rest_surface[v]
    terms = model.loss(T.Tensor(pred), target, model.encode(np.zeros((8, 3))), beta=0.0)
    assert terms["skipped_faces"] >= 1
    assert np.isfinite(float(terms["total"].values))


def test_loss_gradients_match_finite_differences():
    # full pipeline: perturb a sample of parameters and compare to the tape
    model = make_toy_model(seed=1)
    rng = np.random.default_rng(5)
    lr = rng.standard_normal((model.lattice.vertex_count, 3))
    target = 0.05 * rng.standard_normal((model.surface.vertex_count, 3))

    def full_loss():
        pred, enc = model.forward(lr)
        return model.loss(pred, target, enc, beta=0.3)["total"]

    loss = full_loss()
    T.backward(loss)
    grads = {name: p.grad.copy() for name, p in model.params.items()}
    for p in model.params.values():
        p.grad = None

    h = 1e-6
    worst = 0.0
    for name, p in model.params.items():
        flat = p.values.ravel()
        for pos in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[pos]
            flat[pos] = orig + h
            up = float(full_loss().values)
            flat[pos] = orig - h
            down = float(full_loss().values)
            flat[pos] = orig
            fd = (up - down) / (2 * h)
            analytic = grads[name].ravel()[pos]
            worst = max(worst, abs(analytic - fd) / (abs(analytic) + 1e-8))
    assert worst < 1e-4


def test_checkpoint_round_trip_preserves_inference(tmp_path):
    from simsr import nn

    model = make_toy_model(seed=2)
    model.snap_params_to_single()
    lr = np.random.default_rng(0).standard_normal((model.lattice.vertex_count, 3))
    before = model.infer(lr)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, model.export_params())

    # same geometry, scrambled parameters; loading must restore them exactly
    fresh = make_toy_model(seed=2)
    for p in fresh.params.values():
        p.values = p.values + 0.37
    fresh.load_params(nn.load_checkpoint(path))
    assert np.array_equal(fresh.infer(lr), before)


def test_checkpoint_name_mismatch_rejected(tmp_path):
    from simsr import nn

    model = make_toy_model()
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, model.export_params())
    other = make_toy_model(variant="no_cu")
    with pytest.raises(ModelError):
        other.load_params(nn.load_checkpoint(path))


def test_batch_forward_matches_single_frames():
    model = make_toy_model(seed=1)
    frames = toy_frames(model, count=3, seed=4)
    stack = np.concatenate([model.normalize_disp(f.lr_disp) for f in frames])
    pred_b, enc_b = model.forward_batch(stack, 3, model.interp_weights())
    for b, f in enumerate(frames):
        pred_s, _ = model.forward(model.normalize_disp(f.lr_disp), model.interp_weights())
        assert np.allclose(pred_b.values[b::3], pred_s.values, atol=1e-10)


def test_batch_loss_matches_single_frame_mean():
    model = make_toy_model(seed=1)
    frames = toy_frames(model, count=2, seed=9)
    targets = [model.normalize_disp(f.hr_disp) for f in frames]
    stack = np.concatenate([model.normalize_disp(f.lr_disp) for f in frames])
    tgt_stack = np.stack(targets, axis=1).reshape(-1, 3)
    pred_b, enc_b = model.forward_batch(stack, 2, model.interp_weights())
    batched = model.loss_batch(pred_b, tgt_stack, enc_b, beta=0.5, count=2)
    singles = []
    for f, tgt in zip(frames, targets):
        pred_s, enc_s = model.forward(model.normalize_disp(f.lr_disp), model.interp_weights())
        singles.append(model.loss(pred_s, tgt, enc_s, beta=0.5))
    for key in ("total", "recon", "fn", "reg"):
        want = 0.5 * sum(float(t[key].values) for t in singles)
        assert abs(float(batched[key].values) - want) < 1e-9, key
    assert batched["skipped_faces"] == sum(t["skipped_faces"] for t in singles)
