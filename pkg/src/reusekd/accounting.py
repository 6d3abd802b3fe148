"""Closed-form parameter and MAC counting for (config, pattern) pairs.

Parameter counts mirror exactly what :class:`~reusekd.encoder.Encoder`
instantiates (reusing layers contribute zero key/query parameters), plus
the configured frontend constant. MACs count multiply-accumulate pairs of
the matrix products only; norms, softmax and residual adds are not matmul
work and count zero.

Per layer with d_k = d_v = d/H, standard attention costs 4nd^2 + 2n^2 d
MACs and a reusing layer omits the key/query share 2nd^2 + n^2 d — exactly
half. The general-width formulas below reduce to those expressions.

Student-to-teacher projection heads are a separate line item: they are
reported when asked for but excluded by default, since they belong to the
distillation apparatus rather than the deployed encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .encoder import EncoderConfig
from .reuse import ReusePattern

PART_KEYS = ("frontend", "attention_kq", "attention_vo", "ffn",
             "norms_and_embeddings", "projections")


@dataclass
class CostReport:
    """Aggregate costs; params and macs halves are filled by their
    respective counters (a combined report fills both)."""

    params_total: int = 0
    params_by_part: dict[str, int] = field(default_factory=dict)
    params_detail: dict[str, int] = field(default_factory=dict)
    macs_total: int = 0
    macs_by_part: dict[str, int] = field(default_factory=dict)
    per_layer_mhsa_macs: int = 0
    per_layer_omitted_macs: int = 0
    sequence_length: int | None = None


# -- per-layer closed forms ---------------------------------------------------


def kq_params_per_layer(config: EncoderConfig) -> int:
    """Key+query parameters of one compute layer (what a reusing layer saves)."""
    d, h, dk = config.model_width, config.num_heads, config.head_key_width
    count = 2 * h * d * dk
    if config.include_biases:
        count += 2 * h * dk
    return count


def vo_params_per_layer(config: EncoderConfig) -> int:
    d, h, dv = config.model_width, config.num_heads, config.head_value_width
    count = h * d * dv + h * dv * d
    if config.include_biases:
        count += h * dv + d
    return count


def ffn_params_per_layer(config: EncoderConfig, ffn_width: int | None = None) -> int:
    d = config.model_width
    f = config.ffn_width if ffn_width is None else ffn_width
    count = 2 * d * f
    if config.include_biases:
        count += f + d
    return count


def projection_params(config: EncoderConfig) -> int:
    """Student-to-teacher linear heads, one per layer, with bias."""
    return config.num_layers * (config.model_width * config.teacher_width
                                + config.teacher_width)


def count_params(config: EncoderConfig, pattern: ReusePattern,
                 include_projections: bool = False) -> CostReport:
    """Parameter counts by part.

    norms_and_embeddings covers the two layer norms per layer plus the
    position embedding table (the table is also broken out in
    ``params_detail`` since it scales with max_seq_len, not the stack).
    """
    L, d = config.num_layers, config.model_width
    n_compute = len(pattern.compute_layers())
    kq = kq_params_per_layer(config) * n_compute
    vo = vo_params_per_layer(config) * L
    ffn = ffn_params_per_layer(config) * L
    norms = 4 * d * L
    pos = config.max_seq_len * d
    proj = projection_params(config) if include_projections else 0
    parts = {
        "frontend": config.frontend_params,
        "attention_kq": kq,
        "attention_vo": vo,
        "ffn": ffn,
        "norms_and_embeddings": norms + pos,
        "projections": proj,
    }
    detail = {
        "kq_per_compute_layer": kq_params_per_layer(config),
        "compute_layers": n_compute,
        "reusing_layers": len(pattern.reusing_layers()),
        "layer_norms": norms,
        "position_embedding": pos,
        "projection_heads": projection_params(config),
    }
    return CostReport(params_total=sum(parts.values()), params_by_part=parts,
                      params_detail=detail)


def mhsa_macs_per_layer(config: EncoderConfig, n: int) -> int:
    """Full attention MACs: q/k/v projections, logits, map-times-value and
    the output projection. Equals 4nd^2 + 2n^2 d when d_k = d_v = d/H."""
    d, h = config.model_width, config.num_heads
    dk, dv = config.head_key_width, config.head_value_width
    projections = 2 * n * d * dk * h + n * d * dv * h + n * h * dv * d
    interactions = n * n * dk * h + n * n * dv * h
    return projections + interactions


def omitted_macs_per_layer(config: EncoderConfig, n: int) -> int:
    """Key/query MACs a reusing layer skips: the two projections plus the
    logit products. Equals 2nd^2 + n^2 d when d_k = d/H."""
    d, h, dk = config.model_width, config.num_heads, config.head_key_width
    return 2 * n * d * dk * h + n * n * dk * h


def ffn_macs_per_layer(config: EncoderConfig, n: int) -> int:
    return 2 * n * config.model_width * config.ffn_width


def count_macs(config: EncoderConfig, pattern: ReusePattern, n: int,
               include_projections: bool = False) -> CostReport:
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    L = config.num_layers
    n_compute = len(pattern.compute_layers())
    mhsa = mhsa_macs_per_layer(config, n)
    omitted = omitted_macs_per_layer(config, n)
    kq_macs = (omitted) * n_compute
    vo_macs = (mhsa - omitted) * L
    proj = L * n * config.model_width * config.teacher_width if include_projections else 0
    parts = {
        "frontend": config.frontend_macs_per_frame * n,
        "attention_kq": kq_macs,
        "attention_vo": vo_macs,
        "ffn": ffn_macs_per_layer(config, n) * L,
        "norms_and_embeddings": 0,
        "projections": proj,
    }
    return CostReport(macs_total=sum(parts.values()), macs_by_part=parts,
                      per_layer_mhsa_macs=mhsa, per_layer_omitted_macs=omitted,
                      sequence_length=n)


def full_report(config: EncoderConfig, pattern: ReusePattern, n: int,
                include_projections: bool = False) -> CostReport:
    p = count_params(config, pattern, include_projections)
    m = count_macs(config, pattern, n, include_projections)
    return CostReport(params_total=p.params_total, params_by_part=p.params_by_part,
                      params_detail=p.params_detail, macs_total=m.macs_total,
                      macs_by_part=m.macs_by_part,
                      per_layer_mhsa_macs=m.per_layer_mhsa_macs,
                      per_layer_omitted_macs=m.per_layer_omitted_macs,
                      sequence_length=m.sequence_length)


# -- deltas -------------------------------------------------------------------


@dataclass
class DeltaRow:
    name: str
    value_a: int
    value_b: int

    @property
    def delta(self) -> int:
        return self.value_b - self.value_a

    @property
    def relative(self) -> float:
        return self.delta / self.value_a if self.value_a else 0.0


def compare(report_a: CostReport, report_b: CostReport) -> list[DeltaRow]:
    """Per-part and total deltas (b relative to a) for whichever of the
    params/macs halves both reports carry."""
    rows = []
    if report_a.params_by_part and report_b.params_by_part:
        rows.append(DeltaRow("params_total", report_a.params_total, report_b.params_total))
        for key in PART_KEYS:
            rows.append(DeltaRow(f"params.{key}", report_a.params_by_part[key],
                                 report_b.params_by_part[key]))
    if report_a.macs_by_part and report_b.macs_by_part:
        rows.append(DeltaRow("macs_total", report_a.macs_total, report_b.macs_total))
        for key in PART_KEYS:
            rows.append(DeltaRow(f"macs.{key}", report_a.macs_by_part[key],
                                 report_b.macs_by_part[key]))
    return rows


def format_compare(rows: list[DeltaRow]) -> str:
    width = max((len(r.name) for r in rows), default=10)
    lines = [f"{'part'.ljust(width)}  {'a':>14} {'b':>14} {'delta':>14} {'rel':>8}"]
    for r in rows:
        lines.append(f"{r.name.ljust(width)}  {r.value_a:>14,} {r.value_b:>14,} "
                     f"{r.delta:>+14,} {r.relative:>+8.2%}")
    return "\n".join(lines)


# -- calibration helpers ------------------------------------------------------


def sequence_length_for_omitted(model_width: int, target_macs: float) -> int:
    """Sequence length at which one layer's omitted key/query MACs hit the
    target: positive root of d n^2 + 2 d^2 n - target = 0, rounded."""
    d = model_width
    disc = 4 * d ** 4 + 4 * d * target_macs
    return round((-2 * d * d + math.sqrt(disc)) / (2 * d))


def calibrate_frontend(config: EncoderConfig, target_params: int,
                       target_macs: int, n: int) -> EncoderConfig:
    """Config whose frontend constants make the no-reuse totals hit the
    given absolute targets at sequence length n. The encoder stack is
    counted from the closed forms; whatever remains is attributed to the
    frontend (and, for params, everything else outside the stack)."""
    base = ReusePattern.all_compute(config.num_layers)
    zeroed = replace(config, frontend_params=0, frontend_macs_per_frame=0)
    stack_params = count_params(zeroed, base).params_total
    stack_macs = count_macs(zeroed, base, n).macs_total
    extra_params = target_params - stack_params
    extra_macs_per_frame = (target_macs - stack_macs) // n
    if extra_params < 0 or extra_macs_per_frame < 0:
        raise ValueError(
            f"stack already exceeds calibration targets: params {stack_params} vs "
            f"{target_params}, macs {stack_macs} vs {target_macs}")
    return replace(config, frontend_params=extra_params,
                   frontend_macs_per_frame=extra_macs_per_frame)
