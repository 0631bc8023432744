"""Command line entry point: dataset generation, geodesic precompute,
training, inference, evaluation, baselines, and throughput benchmarking.

Every subcommand prints one machine-parsable `RESULT key=value ...` line on
success and exits nonzero with a message on stderr otherwise.  All paths
are explicit; the only environment input is SIMSR_THREADS, which caps the
evaluation worker count.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import baselines as bl
from . import bvae as bv
from . import datagen as dg
from . import frames as fr
from . import geodesy as geo
from . import metrics as mt
from . import model as mdl
from . import nn
from . import training as tr
from .meshes import MeshError, embed_surface, load_lattice, load_surface


class CliError(RuntimeError):
    pass


_ERRORS = (
    CliError, MeshError, fr.FrameError, geo.GeodesyError, mdl.ModelError,
    tr.TrainingError, bl.BaselineError, bv.BvaeError, dg.DatagenError,
    mt.MetricsError, nn.CheckpointError, OSError,
)


def _result(**pairs):
    parts = []
    for key, value in pairs.items():
        if isinstance(value, float):
            value = repr(value)
        parts.append(f"{key}={value}")
    print("RESULT " + " ".join(parts))


def _progress_printer(total):
    step = max(1, total // 20)

    def progress(row):
        epoch = row["epoch"]
        if epoch == 0 or (epoch + 1) % step == 0 or epoch + 1 == total:
            print(
                f"epoch {epoch + 1}/{total}  L_total={row['L_total']:.5f}  "
                f"L_recon={row['L_recon']:.5f}  beta={row['beta']:.4f}",
                file=sys.stderr,
            )

    return progress


# ---------------------------------------------------------------------------
# shared loading helpers

def _load_dataset(data_dir, need_table=False):
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CliError(f"no manifest at {manifest_path}; run `simsr datagen` first")
    manifest = dg.load_manifest(manifest_path)
    surface = load_surface(manifest.surface_path)
    lattice = load_lattice(manifest.lattice_path)
    n, m, all_frames = fr.load_frames(manifest.frames_path)
    if n != lattice.vertex_count or m != surface.vertex_count:
        raise CliError(
            f"frame container ({n}, {m}) does not match meshes "
            f"({lattice.vertex_count}, {surface.vertex_count})"
        )
    table = None
    if need_table:
        if not os.path.exists(manifest.table_path):
            raise CliError(
                f"no neighborhood table at {manifest.table_path}; run `simsr precompute` first"
            )
        table = geo.load_table(manifest.table_path)
    return manifest, surface, lattice, all_frames, table


def _select_frames(manifest, all_frames, which):
    by_id = {f.frame_id: f for f in all_frames}
    if which == "all":
        ids = sorted(by_id)
    elif which == "train":
        ids = manifest.train_ids
    else:
        ids = manifest.test_ids
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CliError(f"frame ids {missing[:5]} not present in the container")
    return [by_id[i] for i in ids]


def _model_config(args, base=None):
    cfg = base if base is not None else mdl.ModelConfig()
    if getattr(args, "model_config", None):
        cfg = mdl.load_config(args.model_config, cfg)
    overrides = {}
    for name in ("epochs", "lr", "batch_size", "seed", "variant", "k_interp"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides) if overrides else cfg


def _load_model_config(args):
    cfg_path = args.model_config or os.path.splitext(args.model)[0] + ".cfg"
    if not os.path.exists(cfg_path):
        raise CliError(f"no model config at {cfg_path}")
    return mdl.load_config(cfg_path)


def _restore_model(args, cfg, surface, lattice, table):
    model = mdl.SuperResModel(cfg, surface, lattice,
                              None if cfg.variant == "no_cu" else table)
    model.load_params(nn.load_checkpoint(args.model))
    return model


def _frame_errors(preds, targets_by_id):
    """Per-frame mean errors and the stacked per-vertex error field."""
    ids = [p.frame_id for p in preds]
    missing = [i for i in ids if i not in targets_by_id or targets_by_id[i] is None]
    if missing:
        raise CliError(f"no reference surface displacements for frames {missing[:5]}")

    def one(pred):
        errors, mean = mt.per_vertex_error(pred.hr_disp, targets_by_id[pred.frame_id])
        return errors, mean

    workers = mt.worker_count()
    if workers > 1 and len(preds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, preds))
    else:
        results = [one(p) for p in preds]
    fields = np.stack([r[0] for r in results])
    means = [r[1] for r in results]
    return ids, means, fields


def _write_eval_outputs(args, surface, ids, means, fields, method):
    if getattr(args, "csv", None):
        mt.write_series_csv(args.csv, [(i, method, e) for i, e in zip(ids, means)])
    if getattr(args, "heatmap", None):
        mt.export_heatmap(surface, fields.mean(axis=0), args.heatmap)


# ---------------------------------------------------------------------------
# subcommands

def cmd_datagen(args):
    cfg = dg.load_gen_config(args.config) if args.config else dg.GenConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    manifest, surface, lattice, frames = dg.generate(cfg, args.out)
    _result(
        out=args.out, frames=len(frames), lattice=lattice.vertex_count,
        surface=surface.vertex_count, train=len(manifest.train_ids),
        test=len(manifest.test_ids),
    )
    return 0


def cmd_precompute(args):
    manifest, surface, lattice, _, _ = _load_dataset(args.data)
    table = geo.precompute(surface, lattice, args.k)
    out = args.out or manifest.table_path
    geo.save_table(out, table)
    _result(table=out, k=table.k, rows=len(table.indices))
    return 0


def cmd_train(args):
    cfg = _model_config(args)
    need_table = cfg.variant != "no_cu"
    manifest, surface, lattice, all_frames, table = _load_dataset(args.data, need_table)
    train_frames = _select_frames(manifest, all_frames, "train")
    model = mdl.SuperResModel(cfg, surface, lattice, table)
    progress = None if args.quiet else _progress_printer(cfg.epochs)
    log = tr.train(model, train_frames, log_path=args.log, checkpoint_path=args.out, progress=progress)
    cfg_path = os.path.splitext(args.out)[0] + ".cfg"
    mdl.save_config(cfg_path, cfg)
    _result(
        checkpoint=args.out, config=cfg_path, epochs=cfg.epochs,
        frames=len(train_frames), final_loss=log[-1]["L_total"],
        final_recon=log[-1]["L_recon"],
    )
    return 0


def _predict_frames(model, frames):
    weights = model.interp_weights()
    return [
        fr.DisplacementFrame(f.frame_id, f.params, f.lr_disp,
                             model.infer_displacement(f.lr_disp, weights))
        for f in frames
    ]


def cmd_infer(args):
    cfg = _load_model_config(args)
    manifest, surface, lattice, all_frames, table = _load_dataset(
        args.data, need_table=cfg.variant != "no_cu"
    )
    model = _restore_model(args, cfg, surface, lattice, table)
    selected = _select_frames(manifest, all_frames, args.frames)
    preds = _predict_frames(model, selected)
    fr.save_frames(args.out, lattice.vertex_count, surface.vertex_count, preds)
    _result(out=args.out, frames=len(preds))
    return 0


def cmd_eval(args):
    manifest, surface, lattice, all_frames, _ = _load_dataset(args.data)
    n, m, preds = fr.load_frames(args.pred)
    if (n, m) != (lattice.vertex_count, surface.vertex_count):
        raise CliError(f"prediction container ({n}, {m}) does not match the dataset")
    for p in preds:
        if p.hr_disp is None:
            raise CliError(f"prediction frame {p.frame_id} carries no surface displacements")
    targets = {f.frame_id: f.hr_disp for f in all_frames}
    ids, means, fields = _frame_errors(preds, targets)
    stats = mt.aggregate(means)
    _write_eval_outputs(args, surface, ids, means, fields, args.method)
    _result(
        mean=stats.mean, median=stats.median, std=stats.std,
        max=stats.max, min=stats.min, frames=len(ids),
    )
    return 0


def _surface_scale(surface):
    lo = surface.vertices.min(axis=0)
    hi = surface.vertices.max(axis=0)
    return float(max(0.5 * (hi - lo).max(), 1e-12))


def cmd_baseline(args):
    need_table = args.method in ("mls", "no-fe")
    manifest, surface, lattice, all_frames, table = _load_dataset(args.data, need_table)
    selected = _select_frames(manifest, all_frames, args.frames)

    if args.method == "embedded":
        embedding = embed_surface(surface, lattice)
        preds = [
            fr.DisplacementFrame(f.frame_id, f.params, f.lr_disp,
                                 bl.embedded_predict(embedding, f.lr_disp))
            for f in selected
        ]
    elif args.method == "rbf":
        assignment = geo.assign_lattice(surface, lattice)
        dists = geo.all_geodesic_distances(surface, assignment)
        shared = bl.RbfBaseline(dists[:, assignment.lr_to_hr], dists, sigma=args.sigma)
        preds = [
            fr.DisplacementFrame(f.frame_id, f.params, f.lr_disp,
                                 shared.predict(shared.fit(f.lr_disp)))
            for f in selected
        ]
    elif args.method == "mls":
        cfg = bl.MlsConfig(degree=args.degree, sigma=args.sigma, trivariate=args.trivariate)
        preds = [
            fr.DisplacementFrame(
                f.frame_id, f.params, f.lr_disp,
                bl.mls_reconstruct(lattice.vertices, f.lr_disp, surface.vertices, table, cfg),
            )
            for f in selected
        ]
    elif args.method == "bvae":
        train_frames = _select_frames(manifest, all_frames, "train")
        cfg = bv.BvaeConfig(
            epochs=args.epochs if args.epochs is not None else 200,
            lr=args.lr if args.lr is not None else 1e-4,
            batch_size=args.batch_size if args.batch_size is not None else 6,
            seed=args.seed if args.seed is not None else 0,
        )
        vae = bv.BetaVae(lattice.vertex_count, surface.vertex_count, cfg, _surface_scale(surface))
        bv.train_bvae(vae, train_frames)
        preds = [
            fr.DisplacementFrame(f.frame_id, f.params, f.lr_disp, vae.infer(f.lr_disp))
            for f in selected
        ]
    else:  # trained ablation variants
        variant = args.method.replace("-", "_")
        cfg = _model_config(args)
        cfg = replace(cfg, variant=variant)
        if variant == "no_cu":
            table = None
        model = mdl.SuperResModel(cfg, surface, lattice, table)
        train_frames = _select_frames(manifest, all_frames, "train")
        progress = None if args.quiet else _progress_printer(cfg.epochs)
        tr.train(model, train_frames, checkpoint_path=args.save_model, progress=progress)
        if args.save_model:
            mdl.save_config(os.path.splitext(args.save_model)[0] + ".cfg", cfg)
        preds = _predict_frames(model, selected)

    fr.save_frames(args.out, lattice.vertex_count, surface.vertex_count, preds)

    targets = {f.frame_id: f.hr_disp for f in selected}
    if all(t is not None for t in targets.values()):
        ids, means, fields = _frame_errors(preds, targets)
        stats = mt.aggregate(means)
        _write_eval_outputs(args, surface, ids, means, fields, args.method)
        _result(method=args.method, out=args.out, frames=len(preds),
                mean=stats.mean, median=stats.median, std=stats.std)
    else:
        _result(method=args.method, out=args.out, frames=len(preds))
    return 0


def cmd_bench(args):
    start = time.perf_counter()
    cfg = _load_model_config(args)
    manifest, surface, lattice, all_frames, table = _load_dataset(
        args.data, need_table=cfg.variant != "no_cu"
    )
    model = _restore_model(args, cfg, surface, lattice, table)
    selected = _select_frames(manifest, all_frames, args.frames)
    load_s = time.perf_counter() - start

    report = mt.bench(model.infer, [f.lr_disp for f in selected],
                      runs=args.runs, warmups=args.warmups)
    end_to_end = time.perf_counter() - start
    _result(
        mean_ms=report["mean_s"] * 1e3, fps=report["fps"], runs=report["runs"],
        min_ms=report["min_s"] * 1e3, max_ms=report["max_s"] * 1e3,
        load_s=load_s, end_to_end_s=end_to_end,
    )
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def _add_train_flags(p, with_variant):
    p.add_argument("--model-config", help="model config file used as the base")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--k-interp", type=int, dest="k_interp")
    if with_variant:
        p.add_argument("--variant", choices=sorted(mdl.VARIANTS))
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="simsr",
        description="Coarse-to-fine simulation upsampling toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a paired coarse/fine dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="generator config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("precompute", help="build the geodesic neighborhood table")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out", help="table path (default: the manifest's)")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="train the upsampling model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.ssck)")
    p.add_argument("--log", help="per-epoch loss CSV")
    _add_train_flags(p, with_variant=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict surface displacements with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--model-config", help="config path (default: beside the checkpoint)")
    p.add_argument("--frames", choices=("test", "train", "all"), default="test")
    p.add_argument("--out", required=True, help="prediction container path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a prediction container against the dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--method", default="ours", help="label used in the CSV")
    p.add_argument("--csv", help="frame-wise error CSV path")
    p.add_argument("--heatmap", help="mean-error heatmap PLY path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run a comparison method")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True,
                   choices=("embedded", "rbf", "mls", "bvae", "no-fe", "no-cu"))
    p.add_argument("--out", required=True, help="prediction container path")
    p.add_argument("--frames", choices=("test", "train", "all"), default="test")
    p.add_argument("--sigma", type=float, help="kernel width for rbf/mls (mm)")
    p.add_argument("--degree", type=int, default=2, help="mls polynomial degree")
    p.add_argument("--trivariate", action="store_true", help="mls full 3-D basis")
    p.add_argument("--csv", help="frame-wise error CSV path")
    p.add_argument("--heatmap", help="mean-error heatmap PLY path")
    p.add_argument("--save-model", help="checkpoint path for trained variants")
    _add_train_flags(p, with_variant=False)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("bench", help="measure inference throughput")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--model-config")
    p.add_argument("--frames", choices=("test", "train", "all"), default="test")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmups", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
