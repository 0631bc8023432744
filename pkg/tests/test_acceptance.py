"""Acceptance suite: ten numbered criteria, one PASS/FAIL line each.

Covers gradient correctness, geodesic and assignment oracles, interpolation
exactness, benchmark error orderings against the classical baselines,
ablation and neighbor-count trends, bit determinism, robustness to
out-of-distribution inputs, and throughput reporting.

Criteria 5 to 7 share one generated benchmark dataset and train four models
(full, two ablations, and a k=1 variant); allow roughly an hour on a single
core. Run with `pytest tests/test_acceptance.py -v -s` to see the lines.
"""

import filecmp
import os
import time
import zlib
from dataclasses import replace

import numpy as np
import pytest

from simsr import baselines as bl
from simsr import cli
from simsr import datagen as dg
from simsr import frames as fr
from simsr import geodesy as geo
from simsr import metrics as mt
from simsr import model as mdl
from simsr import tensor as T
from simsr import training as tr
from simsr.meshes import embed_surface

from conftest import make_box_lattice, make_grid_surface, toy_config
from test_geodesy import brute_force_assignment, dijkstra_oracle, table_oracle
from test_tensor import PRIMITIVE_CASES

# Benchmark training budget: fits the 30-minute single-core limit with margin
# while converging well below the embedded-baseline target.
BENCH_OVERRIDES = dict(epochs=150, lr=1e-3, beta_end=0.5, weight_hidden=(32, 32), seed=0)
BENCH_CFG = mdl.ModelConfig(**BENCH_OVERRIDES)

TINY_GEN_CFG = """
hr_nu = 12
hr_nv = 12
patch_size = 40.0
ridge_height = 8.0
lr_cells = 3,3,2
bump_width = 14.0
frames_per_family = 4
families = 2
train_families = 0
test_families = 1
seed = 5
"""


def _verdict(num, ok, text):
    print(f"\n[criterion {num:2d}] {'PASS' if ok else 'FAIL'}  {text}")
    assert ok, f"criterion {num}: {text}"


# ---------------------------------------------------------------------------
# shared benchmark fixtures

@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    manifest, surface, lattice, frames = dg.generate(dg.GenConfig(), str(root / "data"))
    table = geo.precompute(surface, lattice, BENCH_CFG.k_interp)
    geo.save_table(manifest.table_path, table)
    by_id = {f.frame_id: f for f in frames}
    return {
        "root": root, "manifest": manifest, "surface": surface,
        "lattice": lattice, "table": table,
        "train": [by_id[i] for i in manifest.train_ids],
        "test": [by_id[i] for i in manifest.test_ids],
    }


def _test_mean_error(model, test_frames):
    weights = model.interp_weights()
    means = [
        mt.per_vertex_error(model.infer_displacement(f.lr_disp, weights), f.hr_disp)[1]
        for f in test_frames
    ]
    return float(np.mean(means))


def _train_variant(bench_data, **overrides):
    cfg = replace(BENCH_CFG, **overrides)
    table = None if cfg.variant == "no_cu" else bench_data["table"]
    if table is not None and table.k != cfg.k_interp:
        table = geo.precompute(bench_data["surface"], bench_data["lattice"], cfg.k_interp)
    model = mdl.SuperResModel(cfg, bench_data["surface"], bench_data["lattice"], table)
    start = time.perf_counter()
    tr.train(model, bench_data["train"])
    seconds = time.perf_counter() - start
    return model, seconds, _test_mean_error(model, bench_data["test"])


@pytest.fixture(scope="session")
def geodesic_field(bench):
    assignment = geo.assign_lattice(bench["surface"], bench["lattice"])
    dists = geo.all_geodesic_distances(bench["surface"], assignment)
    return assignment, dists


@pytest.fixture(scope="session")
def baseline_errors(bench, geodesic_field):
    assignment, dists = geodesic_field
    surface, lattice = bench["surface"], bench["lattice"]
    test_frames = bench["test"]

    def mean_err(predict):
        return float(np.mean([
            mt.per_vertex_error(predict(f), f.hr_disp)[1] for f in test_frames
        ]))

    embedding = embed_surface(surface, lattice)
    rbf = bl.RbfBaseline(dists[:, assignment.lr_to_hr], dists)
    return {
        "embedded": mean_err(lambda f: bl.embedded_predict(embedding, f.lr_disp)),
        "rbf": mean_err(lambda f: rbf.predict(rbf.fit(f.lr_disp))),
        "mls": mean_err(lambda f: bl.mls_reconstruct(
            lattice.vertices, f.lr_disp, surface.vertices, bench["table"], bl.MlsConfig())),
    }


@pytest.fixture(scope="session")
def trained_full(bench):
    return _train_variant(bench)


# ---------------------------------------------------------------------------
# 1. gradient correctness

def test_criterion_01_autodiff_soundness():
    start = time.perf_counter()
    worst_prim = 0.0
    for name, fn, shape in PRIMITIVE_CASES:
        rng = np.random.default_rng(zlib.crc32(name.encode("ascii")))
        for _ in range(5):
            point = rng.uniform(0.1, 0.9, size=shape)
            worst_prim = max(worst_prim, T.grad_check(fn, point))

    # ten-vertex toy problem through the composite loss
    surface = make_grid_surface(nu=2, nv=5, jitter=1.5, seed=3)
    lattice = make_box_lattice(lo=(-5.0, -5.0, -6.0), hi=(15.0, 45.0, 6.0))
    cfg = toy_config(seed=3)
    table = geo.precompute(surface, lattice, cfg.k_interp)
    model = mdl.SuperResModel(cfg, surface, lattice, table)
    rng = np.random.default_rng(11)
    lr = rng.standard_normal((lattice.vertex_count, 3))
    target = 0.05 * rng.standard_normal((surface.vertex_count, 3))

    def full_loss():
        pred, enc = model.forward(lr)
        return model.loss(pred, target, enc, beta=0.3)["total"]

    loss = full_loss()
    T.backward(loss)
    grads = {name: p.grad.copy() for name, p in model.params.items()}
    for p in model.params.values():
        p.grad = None

    h = 1e-6
    worst_loss = 0.0
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
            worst_loss = max(worst_loss, abs(analytic - fd) / (abs(analytic) + 1e-8))

    elapsed = time.perf_counter() - start
    ok = worst_prim < 1e-5 and worst_loss < 1e-4 and elapsed < 60.0
    _verdict(1, ok, f"gradients: primitives max rel err {worst_prim:.2e} (<1e-5), "
                    f"full loss {worst_loss:.2e} (<1e-4), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. assignment and geodesic oracles

def test_criterion_02_geodesy_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    assign_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(n, 9))
        costs = rng.integers(0, 100, size=(n, m)).astype(np.float64)
        cols = geo.linear_assignment(costs).lr_to_hr
        total = float(costs[np.arange(n), cols].sum())
        best, _ = brute_force_assignment(costs)
        if total != best:
            assign_ok = False
            break

    surf = make_grid_surface(nu=10, nv=20, jitter=1.5, seed=7)  # 200 vertices
    n = surf.vertex_count
    mapped = np.sort(rng.choice(n, size=24, replace=False))
    table = geo.knn_from_graph(n, surf.edges, surf.edge_lengths, mapped, k=4)
    oidx, odist = table_oracle(n, surf.edges, surf.edge_lengths, mapped, 4)
    geod_ok = bool(np.array_equal(table.indices, oidx)
                   and np.array_equal(table.distances, odist))

    for s in (0, n // 2, n - 1):
        mine = geo.graph_distances(n, surf.edges, surf.edge_lengths, np.array([s]))[0]
        if not np.array_equal(mine, dijkstra_oracle(n, surf.edges, surf.edge_lengths, s)):
            geod_ok = False

    elapsed = time.perf_counter() - start
    ok = assign_ok and geod_ok and elapsed < 60.0
    _verdict(2, ok, f"assignment brute-force exact over 200 instances: {assign_ok}, "
                    f"geodesic table/distances exact on 200-vertex mesh: {geod_ok}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. interpolation exactness

def test_criterion_03_interpolation_exactness(bench, geodesic_field):
    start = time.perf_counter()
    surface, lattice = bench["surface"], bench["lattice"]
    assignment, dists = geodesic_field
    rng = np.random.default_rng(9)

    center_d = dists[:, assignment.lr_to_hr]
    rbf = bl.RbfBaseline(center_d, center_d)
    values = rng.standard_normal((lattice.vertex_count, 3))
    rbf_err = float(np.abs(rbf.predict(rbf.fit(values)) - values).max())

    # Quadratic reproduction needs full-rank neighborhoods (10-term basis);
    # the bench lattice's four z-levels cannot guarantee that, so probe the
    # property on a general-position node cloud instead.
    nodes = rng.uniform(0.0, 20.0, size=(60, 3))
    evals = rng.uniform(4.0, 16.0, size=(300, 3))
    d = np.linalg.norm(evals[:, None, :] - nodes[None, :, :], axis=2)
    order = np.argsort(d, axis=1, kind="stable")[:, :20]
    mls_table = geo.NeighborhoodTable(20, order, np.take_along_axis(d, order, axis=1))

    coef = 0.05 * rng.standard_normal((10, 3))
    def quadratic(x):
        c = x - x.mean(axis=0)
        basis = np.stack([
            np.ones(len(c)), c[:, 0], c[:, 1], c[:, 2],
            c[:, 0] ** 2, c[:, 1] ** 2, c[:, 2] ** 2,
            c[:, 0] * c[:, 1], c[:, 0] * c[:, 2], c[:, 1] * c[:, 2],
        ], axis=1)
        return basis @ coef

    field = quadratic(np.concatenate([nodes, evals]))
    mls_pred = bl.mls_reconstruct(
        nodes, field[:len(nodes)], evals, mls_table,
        bl.MlsConfig(degree=2, trivariate=True))
    mls_err = float(np.abs(mls_pred - field[len(nodes):]).max())

    A = 0.05 * rng.standard_normal((3, 3))
    b = rng.standard_normal(3)
    embedding = embed_surface(surface, lattice)
    emb_pred = bl.embedded_predict(embedding, lattice.vertices @ A.T + b)
    emb_err = float(np.abs(emb_pred - (surface.vertices @ A.T + b)).max())

    elapsed = time.perf_counter() - start
    ok = rbf_err < 1e-8 and mls_err < 1e-6 and emb_err < 1e-9 and elapsed < 60.0
    _verdict(3, ok, f"exactness: rbf at centers {rbf_err:.2e} (<1e-8), "
                    f"mls quadratic {mls_err:.2e} (<1e-6), embedded affine {emb_err:.2e} (<1e-9)")


# ---------------------------------------------------------------------------
# 4. upsampling invariants

def test_criterion_04_upsampling_invariants():
    surface = make_grid_surface(nu=4, nv=4, jitter=1.5, seed=0)
    lattice = make_box_lattice()
    table = geo.precompute(surface, lattice, toy_config().k_interp)
    worst_sum = 0.0
    bounded = True
    for trial in range(100):
        cfg = toy_config(seed=trial)
        model = mdl.SuperResModel(cfg, surface, lattice, table)
        weights = model.interp_weights()
        w = weights.values
        worst_sum = max(worst_sum, float(np.abs(w.sum(axis=1) - 1.0).max()))

        disp = np.random.default_rng(1000 + trial).standard_normal(
            (lattice.vertex_count, 3))
        encoded = model.encode(model.normalize_disp(disp))
        lifted = model.upsample(encoded, weights).values
        feats = encoded.final.values
        nbr = feats[model.interp_idx]           # (M, k, F)
        lo = nbr.min(axis=1) - 1e-9
        hi = nbr.max(axis=1) + 1e-9
        if not ((lifted >= lo) & (lifted <= hi)).all():
            bounded = False

    ok = worst_sum < 1e-6 and bounded
    _verdict(4, ok, f"softmax rows sum to 1 within {worst_sum:.2e} (<1e-6); "
                    f"interpolants inside neighbor bounds over 100 parameterizations: {bounded}")


# ---------------------------------------------------------------------------
# 5. benchmark ordering against classical baselines

def test_criterion_05_benchmark_ordering(trained_full, baseline_errors):
    model, seconds, err = trained_full
    emb, rbf, mls = (baseline_errors[k] for k in ("embedded", "rbf", "mls"))
    ok = err <= 0.7 * emb and err < rbf and err < mls and seconds <= 1800.0
    _verdict(5, ok, f"test mean error {err:.4f}mm vs embedded {emb:.4f} "
                    f"(target <= {0.7 * emb:.4f}), rbf {rbf:.4f}, mls {mls:.4f}; "
                    f"training {seconds / 60.0:.1f}min (<=30)")


# ---------------------------------------------------------------------------
# 6. ablation ordering

def test_criterion_06_ablation_ordering(bench, trained_full):
    _, _, full_err = trained_full
    _, _, no_fe_err = _train_variant(bench, variant="no_fe")
    _, _, no_cu_err = _train_variant(bench, variant="no_cu")
    ok = full_err < no_fe_err < no_cu_err
    _verdict(6, ok, f"ablations: full {full_err:.4f} < no_fe {no_fe_err:.4f} "
                    f"< no_cu {no_cu_err:.4f} mm")


# ---------------------------------------------------------------------------
# 7. interpolation neighbor count trend

def test_criterion_07_neighbor_count_trend(bench, trained_full):
    _, _, err20 = trained_full
    _, _, err1 = _train_variant(bench, k_interp=1)

    times = {}
    sample = [f.lr_disp for f in bench["test"][:5]]
    for k in (1, 5, 20):
        table = bench["table"] if k == 20 else geo.precompute(
            bench["surface"], bench["lattice"], k)
        cfg = replace(BENCH_CFG, k_interp=k)
        model = mdl.SuperResModel(cfg, bench["surface"], bench["lattice"], table)
        times[k] = mt.bench(model.infer, sample, runs=15, warmups=3)["min_s"]

    monotonic = times[1] < times[5] < times[20]
    ok = err20 <= err1 and monotonic
    _verdict(7, ok, f"error k=20 {err20:.4f} <= k=1 {err1:.4f} mm; inference time "
                    f"{times[1] * 1e3:.1f} < {times[5] * 1e3:.1f} < {times[20] * 1e3:.1f} ms")


# ---------------------------------------------------------------------------
# 8. bit determinism

def test_criterion_08_determinism(tmp_path):
    cfg_path = tmp_path / "gen.cfg"
    cfg_path.write_text(TINY_GEN_CFG)
    outcomes = {}
    for run in ("a", "b"):
        base = tmp_path / run
        data = str(base / "data")
        assert cli.main(["datagen", "--out", data, "--config", str(cfg_path)]) == 0
        assert cli.main(["precompute", "--data", data, "--k", "6"]) == 0
        model = str(base / "model.ssck")
        assert cli.main(["train", "--data", data, "--out", model,
                         "--epochs", "2", "--k-interp", "6", "--quiet"]) == 0
        pred = str(base / "pred.ssrf")
        assert cli.main(["infer", "--data", data, "--model", model, "--out", pred]) == 0
        outcomes[run] = {
            "frames": os.path.join(data, "frames.ssrf"),
            "surface": os.path.join(data, "surface.obj"),
            "lattice": os.path.join(data, "lattice.obj"),
            "table": os.path.join(data, "table.ssnt"),
            "model": model,
            "pred": pred,
        }

    mismatched = [
        name for name in outcomes["a"]
        if not filecmp.cmp(outcomes["a"][name], outcomes["b"][name], shallow=False)
    ]
    ok = not mismatched
    _verdict(8, ok, "datagen/precompute/train/infer byte-identical across two runs"
                    + ("" if ok else f"; mismatch: {mismatched}"))


# ---------------------------------------------------------------------------
# 9. robustness to perturbed dynamics and forces

def test_criterion_09_perturbation_robustness(bench, trained_full):
    model, _, _ = trained_full
    train_range = max(
        float(np.linalg.norm(f.hr_disp, axis=1).max()) for f in bench["train"]
    )
    bound = 5.0 * train_range
    weights = model.interp_weights()

    worst = 0.0
    finite = True
    dyn = dg.perturb_dynamics(bench["test"][:20], amplitude=3.0)
    center = bench["lattice"].vertices.mean(axis=0)
    site_idx = int(np.argmin(np.linalg.norm(bench["lattice"].vertices - center, axis=1)))
    site = bench["lattice"].vertices[site_idx]
    forced = [
        dg.perturb_force(f, bench["lattice"].vertices, site, magnitude=6.0)
        for f in bench["test"][:10]
    ]
    for frame in dyn + forced:
        pred = model.infer_displacement(frame.lr_disp, weights)
        if not np.isfinite(pred).all():
            finite = False
        worst = max(worst, float(np.linalg.norm(pred, axis=1).max()))

    ok = finite and worst <= bound
    _verdict(9, ok, f"perturbed inference finite: {finite}; max displacement "
                    f"{worst:.2f}mm within 5x training range {bound:.2f}mm")


# ---------------------------------------------------------------------------
# 10. throughput report stability

def test_criterion_10_throughput_stability(bench, trained_full):
    model, _, _ = trained_full
    sample = [f.lr_disp for f in bench["test"][:10]]
    reports = [mt.bench(model.infer, sample, runs=25, warmups=5) for _ in range(2)]
    m0, m1 = reports[0]["mean_s"], reports[1]["mean_s"]
    variation = abs(m0 - m1) / (0.5 * (m0 + m1))
    fps = reports[0]["fps"]
    ok = variation < 0.20 and np.isfinite(fps) and fps > 0
    _verdict(10, ok, f"per-frame {m0 * 1e3:.2f}ms / {fps:.1f} FPS; "
                     f"run-to-run mean variation {variation * 100.0:.1f}% (<20%)")
