"""Displacement frames and their binary container.

A frame pairs an activation parameter vector with per-vertex displacements
from the rest pose: always the N lattice vertices, optionally also the M
surface vertices (absent at pure-inference time).

Container layout (little-endian): magic `SSRF`, version u32, N u32, M u32,
frame count u32; per frame: frame_id u32, param count u32, params f32[],
lr_disp f32[N*3], hr_flag u8, hr_disp f32[M*3] if flag is 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class FrameError(IOError):
    """Malformed frame data or container file."""


FRAME_MAGIC = b"SSRF"
FRAME_VERSION = 1


@dataclass(frozen=True)
class DisplacementFrame:
    frame_id: int
    params: np.ndarray            # (A,) float32, dimensionless activations
    lr_disp: np.ndarray           # (N, 3) float32, mm
    hr_disp: np.ndarray | None    # (M, 3) float32, mm, or None

    def __post_init__(self):
        object.__setattr__(self, "params", np.ascontiguousarray(self.params, dtype=np.float32))
        object.__setattr__(self, "lr_disp", np.ascontiguousarray(self.lr_disp, dtype=np.float32))
        if self.hr_disp is not None:
            object.__setattr__(self, "hr_disp", np.ascontiguousarray(self.hr_disp, dtype=np.float32))
        for name in ("params", "lr_disp", "hr_disp"):
            arr = getattr(self, name)
            if arr is not None and not np.isfinite(arr).all():
                raise FrameError(f"frame {self.frame_id}: non-finite values in {name}")
        if self.lr_disp.ndim != 2 or self.lr_disp.shape[1] != 3:
            raise FrameError(f"frame {self.frame_id}: lr_disp must be (N, 3)")
        if self.hr_disp is not None and (self.hr_disp.ndim != 2 or self.hr_disp.shape[1] != 3):
            raise FrameError(f"frame {self.frame_id}: hr_disp must be (M, 3)")


def save_frames(path, n, m, frames):
    """Write frames to the binary container; every frame must match n (and m
    when hr_disp is present)."""
    parts = [FRAME_MAGIC, struct.pack("<IIII", FRAME_VERSION, n, m, len(frames))]
    for fr in frames:
        if len(fr.lr_disp) != n:
            raise FrameError(f"frame {fr.frame_id}: lr_disp rows {len(fr.lr_disp)} != N = {n}")
        if fr.hr_disp is not None and len(fr.hr_disp) != m:
            raise FrameError(f"frame {fr.frame_id}: hr_disp rows {len(fr.hr_disp)} != M = {m}")
        parts.append(struct.pack("<II", fr.frame_id, len(fr.params)))
        parts.append(fr.params.astype("<f4").tobytes())
        parts.append(fr.lr_disp.astype("<f4").tobytes())
        if fr.hr_disp is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01")
            parts.append(fr.hr_disp.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_frames(path):
    """Read a frame container; returns (n, m, list of DisplacementFrame)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FRAME_MAGIC:
        raise FrameError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, n, m, count = struct.unpack_from("<IIII", blob, 4)
    except struct.error as exc:
        raise FrameError(f"{path}: truncated header") from exc
    if version != FRAME_VERSION:
        raise FrameError(f"{path}: unsupported version {version}")
    off = 20
    frames = []
    try:
        for _ in range(count):
            frame_id, n_params = struct.unpack_from("<II", blob, off)
            off += 8
            params = np.frombuffer(blob, dtype="<f4", count=n_params, offset=off)
            off += 4 * n_params
            lr = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=off).reshape(n, 3)
            off += 4 * n * 3
            flag = blob[off]
            off += 1
            hr = None
            if flag == 1:
                hr = np.frombuffer(blob, dtype="<f4", count=m * 3, offset=off).reshape(m, 3)
                off += 4 * m * 3
            elif flag != 0:
                raise FrameError(f"{path}: bad hr flag {flag}")
            frames.append(DisplacementFrame(frame_id, params.copy(), lr.copy(),
                                            None if hr is None else hr.copy()))
    except (struct.error, ValueError, IndexError) as exc:
        raise FrameError(f"{path}: truncated frame data") from exc
    if off != len(blob):
        raise FrameError(f"{path}: {len(blob) - off} trailing bytes")
    return n, m, frames
