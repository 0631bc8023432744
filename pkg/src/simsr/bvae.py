"""Variational autoencoder baseline: whole-frame lattice displacements in,
whole-frame surface displacements out.

Encoder: 3N -> 1024 -> 512 -> (128 mean, 128 log-variance). Decoder: 128 ->
three hidden layers -> 3M, hidden widths scaled in proportion to the output
size (reference widths 256/1024/4096 at 3M = 106911, floored at 32).
Training loss is squared reconstruction error plus beta times the KL
divergence from the standard normal prior; inference decodes the mean latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T


class BvaeError(ValueError):
    pass


LATENT = 128
ENCODER_WIDTHS = (1024, 512)
REFERENCE_DECODER = (256, 1024, 4096)
REFERENCE_OUTPUT = 106911
MIN_WIDTH = 32


def decoder_widths(out_dim):
    return tuple(
        max(MIN_WIDTH, int(round(w * out_dim / REFERENCE_OUTPUT))) for w in REFERENCE_DECODER
    )


@dataclass(frozen=True)
class BvaeConfig:
    beta: float = 0.01
    lr: float = 1e-4
    batch_size: int = 6
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise BvaeError("beta must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise BvaeError("batch_size and epochs must be positive")


class BetaVae:
    def __init__(self, n_lattice, m_surface, config=BvaeConfig(), scale=1.0):
        self.n = n_lattice
        self.m = m_surface
        self.config = config
        self.scale = float(scale)
        rng = np.random.default_rng(config.seed)
        p = {}

        def dense(name, fan_in, fan_out):
            p[f"{name}.w"] = T.Tensor(nn.he_uniform_init(rng, fan_in, fan_out), requires_grad=True)
            p[f"{name}.b"] = T.Tensor(np.zeros(fan_out), requires_grad=True)

        dims = (3 * n_lattice,) + ENCODER_WIDTHS
        for i in range(len(ENCODER_WIDTHS)):
            dense(f"enc.l{i}", dims[i], dims[i + 1])
        dense("enc.mean", ENCODER_WIDTHS[-1], LATENT)
        dense("enc.logvar", ENCODER_WIDTHS[-1], LATENT)

        widths = decoder_widths(3 * m_surface)
        dims = (LATENT,) + widths + (3 * m_surface,)
        for i in range(len(dims) - 1):
            dense(f"dec.l{i}", dims[i], dims[i + 1])
        self.params = p
        self._n_dec = len(dims) - 1

    def encode(self, x):
        h = x
        for i in range(len(ENCODER_WIDTHS)):
            h = T.leaky_relu(nn.linear(h, self.params[f"enc.l{i}.w"], self.params[f"enc.l{i}.b"]))
        mean = nn.linear(h, self.params["enc.mean.w"], self.params["enc.mean.b"])
        logvar = nn.linear(h, self.params["enc.logvar.w"], self.params["enc.logvar.b"])
        return mean, logvar

    def decode(self, z):
        h = z
        for i in range(self._n_dec):
            h = nn.linear(h, self.params[f"dec.l{i}.w"], self.params[f"dec.l{i}.b"])
            if i + 1 < self._n_dec:
                h = T.leaky_relu(h)
        return h

    def loss(self, x, target, noise):
        """Reparameterized training loss; noise is the standard normal draw."""
        mean, logvar = self.encode(x)
        z = mean + T.exp(0.5 * logvar) * T.Tensor(noise)
        out = self.decode(z)
        diff = out - T.Tensor(target)
        recon = T.reduce_sum(diff * diff)
        kl = -0.5 * T.reduce_sum(1.0 + logvar - mean * mean - T.exp(logvar))
        total = recon + self.config.beta * kl
        return {"total": total, "recon": recon, "kl": kl}

    def infer(self, lr_disp_mm):
        """Decode the mean latent of one frame; returns (M, 3) millimeters."""
        lr = np.asarray(lr_disp_mm, dtype=np.float64)
        if lr.shape != (self.n, 3):
            raise BvaeError(f"lattice displacements must be ({self.n}, 3), got {lr.shape}")
        x = T.Tensor((lr / self.scale).reshape(1, -1))
        mean, _ = self.encode(x)
        out = self.decode(mean)
        return out.values.reshape(self.m, 3) * self.scale


def train_bvae(vae, frames, progress=None):
    """Mini-batch Adam training; deterministic per config seed."""
    cfg = vae.config
    data = []
    for fr in frames:
        if fr.hr_disp is None:
            raise BvaeError(f"frame {fr.frame_id} has no surface displacements")
        data.append((
            np.asarray(fr.lr_disp, dtype=np.float64).reshape(-1) / vae.scale,
            np.asarray(fr.hr_disp, dtype=np.float64).reshape(-1) / vae.scale,
        ))
    if not data:
        raise BvaeError("empty training set")
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    noise_rng = np.random.default_rng(cfg.seed + 2)
    state = nn.AdamState(lr=cfg.lr)
    log = []
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(len(data))
        epoch_total = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            batch = perm[lo : lo + cfg.batch_size]
            x = T.Tensor(np.stack([data[i][0] for i in batch]))
            target = np.stack([data[i][1] for i in batch])
            noise = noise_rng.standard_normal((len(batch), LATENT))
            terms = vae.loss(x, target, noise)
            total = terms["total"] * (1.0 / len(batch))
            epoch_total += float(total.values) * len(batch)
            T.backward(total)
            nn.adam_step(vae.params, nn.collect_grads(vae.params), state)
            nn.zero_grads(vae.params)
        row = {"epoch": epoch, "loss": epoch_total / len(data)}
        log.append(row)
        if progress is not None:
            progress(row)
    return log
