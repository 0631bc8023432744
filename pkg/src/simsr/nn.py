"""Network building blocks: layer initializers, the Adam optimizer, and a
binary checkpoint format for named parameter tensors."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class CheckpointError(IOError):
    """Malformed or truncated checkpoint file."""


OMEGA_0 = 30.0


def siren_first_init(rng, fan_in, fan_out):
    """Input-layer weights for a sinusoidal MLP: uniform(-1/n, 1/n), n = fan_in."""
    bound = 1.0 / fan_in
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def siren_hidden_init(rng, fan_in, fan_out, omega=OMEGA_0):
    """Deeper-layer weights: uniform(-sqrt(6/n)/omega, sqrt(6/n)/omega)."""
    bound = np.sqrt(6.0 / fan_in) / omega
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def bias_init(rng, fan_in, fan_out):
    # matches the common dense-layer default; neither cited scheme pins biases
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out,))


def he_uniform_init(rng, fan_in, fan_out, slope=0.2):
    """Fan-in scaled uniform init for leaky-relu layers."""
    bound = np.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def siren_layer(x, w, b, omega=OMEGA_0):
    """sin(omega * (x @ w + b))"""
    return T.sin(omega * (T.matmul(x, w) + b))


def linear(x, w, b):
    return T.matmul(x, w) + b


@dataclass
class AdamState:
    """Optimizer state: hyperparameters plus per-parameter moment accumulators."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on params.

    Args:
        params: dict name -> Tensor, updated in place.
        grads: dict name -> ndarray; missing or None entries are skipped.
        state: AdamState, mutated (moments and step counter).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.values = p.values - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params):
    for p in params.values():
        p.grad = None


def collect_grads(params):
    return {name: p.grad for name, p in params.items()}


# ---------------------------------------------------------------------------
# checkpoint io
#
# layout (little-endian): magic 'SSCK', version u32, tensor count u32, then per
# tensor: name length u32, UTF-8 name, rank u32, dims u32[rank], f32 data.

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors):
    """Write named arrays to path; values are stored in single precision."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(np.asarray(arr.shape, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; returns dict name -> f32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = np.frombuffer(blob, dtype="<u4", count=rank, offset=off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out[name] = data.reshape(dims).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out
