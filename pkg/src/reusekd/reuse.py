"""Attention-map reuse patterns and parameter reinvestment.

A pattern assigns every encoder layer one directive: compute its own
attention maps, or reuse the maps of a named earlier layer. Directives are
stored as a tuple of ints, 0 meaning compute and any positive value the
1-based index of the source layer (the same encoding used in config
files: ``pattern = [0, 1, 0, 3]``).

Named patterns "NbyM" split L = N*M layers into M groups of N consecutive
layers; the first layer of each group computes and the remaining N-1 layers
reuse it. At L=12 this gives source sets {1,3,5,7,9,11} (2by6),
{1,4,7,10} (3by4) and {1,7} (6by2).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

if TYPE_CHECKING:
    from .encoder import EncoderConfig

COMPUTE = 0

NAMED_PATTERNS = ("none", "2by6", "3by4", "6by2")

_NBYM = re.compile(r"^(\d+)by(\d+)$")


class PatternError(ValueError):
    """Pattern name, arity, or structure is invalid."""


@dataclass(frozen=True)
class ReusePattern:
    """Per-layer directives; 0 = compute, k > 0 = reuse layer k's maps."""

    directives: tuple[int, ...]

    @property
    def num_layers(self) -> int:
        return len(self.directives)

    def compute_layers(self) -> tuple[int, ...]:
        """1-based indices of layers that compute their own maps."""
        return tuple(i + 1 for i, d in enumerate(self.directives) if d == COMPUTE)

    def reusing_layers(self) -> tuple[int, ...]:
        """1-based indices of layers that reuse another layer's maps."""
        return tuple(i + 1 for i, d in enumerate(self.directives) if d != COMPUTE)

    def reused_sources(self) -> tuple[int, ...]:
        """Distinct 1-based source layers whose maps get reused."""
        return tuple(sorted({d for d in self.directives if d != COMPUTE}))

    def source_of(self, layer: int) -> int | None:
        """1-based source for a 1-based layer, or None if it computes."""
        d = self.directives[layer - 1]
        return None if d == COMPUTE else d

    @classmethod
    def all_compute(cls, num_layers: int) -> "ReusePattern":
        return cls(tuple([COMPUTE] * num_layers))


def parse_pattern(spec: str | Sequence[int], num_layers: int) -> ReusePattern:
    """Build a validated pattern from a name or explicit directive list.

    Names: "none" or "NbyM" with N*M == num_layers. Explicit lists use the
    0 / 1-based-source encoding and must already satisfy every pattern
    invariant; any violation raises PatternError.
    """
    if isinstance(spec, str):
        name = spec.strip()
        if name == "none":
            return ReusePattern.all_compute(num_layers)
        m = _NBYM.match(name)
        if not m:
            raise PatternError(
                f"unknown pattern {name!r}: expected 'none', 'NbyM', or a directive list")
        n, groups = int(m.group(1)), int(m.group(2))
        if n * groups != num_layers:
            raise PatternError(
                f"pattern {name!r} needs {n}*{groups} = {n * groups} layers, "
                f"encoder has {num_layers}")
        directives = []
        for g in range(groups):
            first = g * n + 1
            directives.append(COMPUTE)
            directives.extend([first] * (n - 1))
        return ReusePattern(tuple(directives))

    directives = []
    for pos, raw in enumerate(spec, start=1):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise PatternError(f"directive at position {pos} is not an integer: {raw!r}")
        directives.append(raw)
    pattern = ReusePattern(tuple(directives))
    problems = validate(pattern, num_layers)
    if problems:
        raise PatternError("invalid pattern: " + "; ".join(problems))
    return pattern


def validate(pattern: ReusePattern, num_layers: int) -> list[str]:
    """All invariant violations (empty list means the pattern is valid).

    Checked: arity, layer 1 computes, sources precede their consumers,
    sources are in range, and no chained reuse (a source must itself be a
    compute layer, since only compute layers own maps).
    """
    problems = []
    if pattern.num_layers != num_layers:
        problems.append(
            f"pattern covers {pattern.num_layers} layers, encoder has {num_layers}")
    dirs = pattern.directives
    if dirs and dirs[0] != COMPUTE:
        problems.append("layer 1 must compute its own maps")
    for i, d in enumerate(dirs, start=1):
        if d == COMPUTE:
            continue
        if d < 1 or d > len(dirs):
            problems.append(f"layer {i}: source {d} out of range")
            continue
        if d >= i:
            problems.append(f"layer {i}: source {d} does not precede it")
            continue
        if dirs[d - 1] != COMPUTE:
            problems.append(
                f"layer {i}: chained reuse, source layer {d} reuses layer {dirs[d - 1]}")
    return problems


@dataclass(frozen=True)
class ReinvestmentPlan:
    """Outcome of moving key/query savings into a wider feed-forward block."""

    saved_params: int
    new_ffn_width: int
    net_param_change: int

    def __post_init__(self):
        if self.net_param_change > 0:
            raise ValueError(
                f"reinvestment exceeds savings by {self.net_param_change} parameters")


def solve_reinvestment(config: "EncoderConfig", pattern: ReusePattern,
                       width_granularity: int = 16,
                       budget: int | None = None) -> ReinvestmentPlan:
    """Widest FFN affordable with the parameters saved by reusing layers.

    Savings are the per-layer key/query parameters times the number of
    reusing layers. The new width is the largest w >= ffn_width with
    w == ffn_width (mod width_granularity) whose across-all-layers FFN cost
    increase stays within the budget (the savings, unless a smaller target
    budget is supplied to match a reference model size).
    """
    if width_granularity < 1:
        raise ValueError(f"width granularity must be >= 1, got {width_granularity}")
    from .accounting import kq_params_per_layer

    saved = kq_params_per_layer(config) * len(pattern.reusing_layers())
    if budget is None:
        budget = saved
    if budget > saved:
        raise ValueError(f"budget {budget} exceeds savings {saved}")
    d = config.model_width
    per_width_unit = config.num_layers * (2 * d + (1 if config.include_biases else 0))
    extra = (budget // per_width_unit // width_granularity) * width_granularity
    added = per_width_unit * extra
    return ReinvestmentPlan(saved_params=saved,
                            new_ffn_width=config.ffn_width + extra,
                            net_param_change=added - saved)


def apply_reinvestment(config: "EncoderConfig", plan: ReinvestmentPlan) -> "EncoderConfig":
    """Config with the plan's FFN width installed."""
    from dataclasses import replace

    return replace(config, ffn_width=plan.new_ffn_width)
