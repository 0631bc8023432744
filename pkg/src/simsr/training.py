"""Mini-batch training loop for the super-resolution model."""

from __future__ import annotations

import csv

import numpy as np

from . import nn
from . import tensor as T


class TrainingError(RuntimeError):
    pass


LOG_COLUMNS = ("epoch", "L_total", "L_recon", "L_fn", "L_reg", "beta")


def beta_at(config, epoch):
    """Linear ramp of the feature regularizer weight across the run."""
    if config.epochs <= 1:
        return config.beta_start
    frac = epoch / (config.epochs - 1)
    return config.beta_start + (config.beta_end - config.beta_start) * frac


def prepare_dataset(model, frames):
    """Normalize frames once and cache target face normals."""
    data = []
    for frame in frames:
        if frame.hr_disp is None:
            raise TrainingError(f"frame {frame.frame_id} has no surface displacements")
        target = model.normalize_disp(frame.hr_disp)
        data.append({
            "frame_id": frame.frame_id,
            "lr": model.normalize_disp(frame.lr_disp),
            "target": target,
            "normals": model.target_face_normals(target),
        })
    return data


def train(model, frames, log_path=None, checkpoint_path=None, progress=None):
    """Train in place; returns the per-epoch loss log as a list of dicts.

    Deterministic for a fixed config seed: batch order comes from a dedicated
    generator and every numeric step is sequential.
    """
    cfg = model.config
    data = prepare_dataset(model, frames)
    if not data:
        raise TrainingError("empty training set")
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    state = nn.AdamState(lr=cfg.lr)
    log = []

    for epoch in range(cfg.epochs):
        beta = beta_at(cfg, epoch)
        perm = shuffle_rng.permutation(len(data))
        sums = {"L_total": 0.0, "L_recon": 0.0, "L_fn": 0.0, "L_reg": 0.0}
        n_batches = 0

        for lo in range(0, len(perm), cfg.batch_size):
            batch = perm[lo : lo + cfg.batch_size]
            count = len(batch)
            weights = model.interp_weights()  # rest-pose only: shared by the batch
            lr_stack = np.concatenate([data[i]["lr"] for i in batch])
            tgt_stack = np.stack([data[i]["target"] for i in batch], axis=1).reshape(-1, 3)
            normals = [data[i]["normals"] for i in batch]
            pred, encoded = model.forward_batch(lr_stack, count, weights)
            terms = model.loss_batch(pred, tgt_stack, encoded, beta, count, normals)
            for key, name in (("total", "L_total"), ("recon", "L_recon"), ("fn", "L_fn"), ("reg", "L_reg")):
                sums[name] += float(terms[key].values) * count
            T.backward(terms["total"])
            nn.adam_step(model.params, nn.collect_grads(model.params), state)
            nn.zero_grads(model.params)
            n_batches += 1

        row = {
            "epoch": epoch,
            "L_total": sums["L_total"] / len(data),
            "L_recon": sums["L_recon"] / len(data),
            "L_fn": sums["L_fn"] / len(data),
            "L_reg": sums["L_reg"] / len(data),
            "beta": beta,
        }
        log.append(row)
        if progress is not None:
            progress(row)
        if (
            checkpoint_path
            and cfg.checkpoint_every
            and (epoch + 1) % cfg.checkpoint_every == 0
            and epoch + 1 < cfg.epochs
        ):
            nn.save_checkpoint(checkpoint_path, model.export_params())

    model.snap_params_to_single()
    if checkpoint_path:
        nn.save_checkpoint(checkpoint_path, model.export_params())
    if log_path:
        write_log(log_path, log)
    return log


def write_log(path, log):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def read_log(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({
                "epoch": int(row["epoch"]),
                "L_total": float(row["L_total"]),
                "L_recon": float(row["L_recon"]),
                "L_fn": float(row["L_fn"]),
                "L_reg": float(row["L_reg"]),
                "beta": float(row["beta"]),
            })
        return rows
