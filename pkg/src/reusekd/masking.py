"""Span-based frame masking shared bitwise between teacher and student.

A :class:`MaskPlan` is the set of masked frame indices plus everything
needed to regenerate it. Within one training step the SAME plan object is
handed to the teacher's masked pass and the student's pass, which is the
contract that keeps both models looking at identically-masked inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import Tensor, mask_rows


class DegenerateInputError(ValueError):
    """The requested masking cannot be realized on this input."""


@dataclass(frozen=True)
class MaskPlan:
    """Frozen outcome of span sampling over ``n`` frames.

    ``masked_indices`` is sorted and duplicate-free; the remaining fields
    make the plan reproducible: sampling again with the same
    (n, target_ratio, span_length, seed) yields the identical plan.
    """

    n: int
    masked_indices: tuple[int, ...]
    target_ratio: float
    span_length: int
    seed: int

    def masked_array(self) -> np.ndarray:
        return np.asarray(self.masked_indices, dtype=np.int64)

    def unmasked_array(self) -> np.ndarray:
        keep = np.ones(self.n, dtype=bool)
        keep[self.masked_array()] = False
        return np.nonzero(keep)[0].astype(np.int64)

    @property
    def num_masked(self) -> int:
        return len(self.masked_indices)

    def mask_hash(self) -> str:
        """Stable fingerprint of (n, masked set) for cross-run comparison."""
        h = hashlib.sha256()
        h.update(self.n.to_bytes(8, "little"))
        h.update(self.masked_array().tobytes())
        return h.hexdigest()[:16]


def sample_mask(n: int, ratio: float, span: int, rng: Rng | int) -> MaskPlan:
    """Sample a mask of ~ratio*n frames as merged spans of fixed length.

    Spans start at uniformly drawn positions in [0, n-span]; overlapping
    spans merge. Sampling stops as soon as the masked count reaches
    round(ratio*n), so the final count never exceeds ratio*n + span.

    The rng argument contributes only its seed: the draw stream is
    re-derived from it, which is what makes plans reproducible from
    (n, ratio, span, seed) alone.
    """
    if not 0.0 < ratio < 1.0:
        raise DegenerateInputError(f"mask ratio must be in (0, 1), got {ratio}")
    if not 1 <= span <= n:
        raise DegenerateInputError(f"span must be in [1, {n}], got {span}")
    if ratio * n < 1.0:
        raise DegenerateInputError(
            f"ratio*n = {ratio * n:.3f} < 1: nothing would be masked")
    seed = rng if isinstance(rng, int) else rng.seed
    gen = Rng(seed)
    target = round(ratio * n)
    masked: set[int] = set()
    while len(masked) < target:
        start = gen.integer(0, n - span)
        masked.update(range(start, start + span))
    return MaskPlan(n=n, masked_indices=tuple(sorted(masked)),
                    target_ratio=ratio, span_length=span, seed=seed)


def apply_mask(x: Tensor, plan: MaskPlan, mask_embedding: Tensor) -> Tensor:
    """Replace masked rows of x with the embedding vector.

    Unmasked rows pass through bit-identical to the input. Gradients flow
    into the embedding wherever it was stamped in, so a trainable mask
    embedding learns from every masked position.
    """
    if x.data.ndim != 2 or x.shape[0] != plan.n:
        raise DegenerateInputError(
            f"input shape {x.shape} does not match plan over {plan.n} frames")
    return mask_rows(x, plan.masked_array(), mask_embedding)


@dataclass(frozen=True)
class RatioSchedule:
    """Masking-ratio schedule: constant, or linear from start to end."""

    kind: str  # "constant" | "linear"
    start: float
    end: float

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        for r in (self.start, self.end):
            if not 0.0 < r < 1.0:
                raise ValueError(f"schedule ratios must be in (0, 1), got {r}")

    @classmethod
    def constant(cls, ratio: float) -> "RatioSchedule":
        return cls("constant", ratio, ratio)

    @classmethod
    def linear(cls, start: float, end: float) -> "RatioSchedule":
        return cls("linear", start, end)


def ratio_at(schedule: RatioSchedule, step: int, total: int) -> float:
    """Ratio in effect at ``step`` of ``total``; linear interpolates so that
    step 0 gives start and step == total gives end exactly."""
    if not 0 <= step <= total:
        raise DegenerateInputError(f"step {step} outside [0, {total}]")
    if schedule.kind == "constant":
        return schedule.start
    if total == 0:
        raise DegenerateInputError("linear schedule needs total > 0")
    return schedule.start + (schedule.end - schedule.start) * step / total
