"""Deterministic synthetic frame sequences standing in for speech features.

Three regimes with increasing temporal structure:

  iid-gaussian        independent frames, nothing to infer across time
  smooth-random-walk  stationary AR(1), correlation decays geometrically
  piecewise-segment   constant-ish segments with random boundaries, so a
                      masked frame is largely predictable from its segment

``piecewise-segment`` is the default for distillation experiments: masked
prediction is only meaningful when context carries information about the
masked frames. All values are clipped to [-3, 3].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import Tensor

REGIMES = ("iid-gaussian", "smooth-random-walk", "piecewise-segment")

_WALK_RHO = 0.85
_SEGMENT_MIN, _SEGMENT_MAX = 6, 20
_SEGMENT_JITTER = 0.05
_CLIP = 3.0


@dataclass(frozen=True)
class SynthSpec:
    n: int
    d_in: int
    regime: str = "piecewise-segment"
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if self.n < 1 or self.d_in < 1:
            raise ValueError(f"need n >= 1 and d_in >= 1, got n={self.n}, d_in={self.d_in}")


def _one_sequence(spec: SynthSpec, rng: Rng) -> np.ndarray:
    n, d = spec.n, spec.d_in
    if spec.regime == "iid-gaussian":
        x = rng.normal((n, d))
    elif spec.regime == "smooth-random-walk":
        x = np.empty((n, d))
        x[0] = rng.normal((d,))
        noise = rng.normal((n - 1, d)) if n > 1 else np.empty((0, d))
        step_scale = np.sqrt(1.0 - _WALK_RHO ** 2)
        for t in range(1, n):
            x[t] = _WALK_RHO * x[t - 1] + step_scale * noise[t - 1]
    else:  # piecewise-segment
        x = np.empty((n, d))
        t = 0
        while t < n:
            length = min(rng.integer(_SEGMENT_MIN, _SEGMENT_MAX), n - t)
            level = rng.normal((d,))
            x[t:t + length] = level + _SEGMENT_JITTER * rng.normal((length, d))
            t += length
    return np.clip(x, -_CLIP, _CLIP)


def generate(spec: SynthSpec, batch: int, count: int) -> list[Tensor]:
    """``count`` sequences for the given batch index, deterministic under
    (spec, batch): each sequence draws from its own derived stream."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = []
    for i in range(count):
        rng = Rng(spec.seed).derive("synthdata", spec.regime, batch, i)
        out.append(Tensor(_one_sequence(spec, rng)))
    return out


def adjacent_correlation(x: np.ndarray) -> float:
    """Mean Pearson correlation between consecutive frames, a quick
    temporal-structure summary used to compare regimes."""
    a = x[:-1].ravel() - x[:-1].mean()
    b = x[1:].ravel() - x[1:].mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


# -- flat binary container for externally provided features ------------------
#
# Layout (little-endian):  magic b"RKDF", uint64 n, uint64 d_in, uint64 count,
# then count sequences of n*d_in float64, row-major.

_FRAMES_MAGIC = b"RKDF"


def save_frames(path, sequences: list[np.ndarray] | list[Tensor]) -> None:
    arrays = [s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
              for s in sequences]
    if not arrays:
        raise ValueError("need at least one sequence")
    n, d_in = arrays[0].shape
    for a in arrays:
        if a.shape != (n, d_in):
            raise ValueError(f"all sequences must share shape {(n, d_in)}, got {a.shape}")
    with open(path, "wb") as fh:
        fh.write(_FRAMES_MAGIC)
        fh.write(struct.pack("<QQQ", n, d_in, len(arrays)))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_frames(path) -> list[Tensor]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FRAMES_MAGIC:
            raise ValueError(f"not a frame container (bad magic {magic!r})")
        n, d_in, count = struct.unpack("<QQQ", fh.read(24))
        out = []
        for _ in range(count):
            buf = fh.read(n * d_in * 8)
            if len(buf) != n * d_in * 8:
                raise ValueError("truncated frame container")
            out.append(Tensor(np.frombuffer(buf, dtype="<f8").reshape(n, d_in).copy()))
    return out
