"""Masked + unmasked layer-to-layer distillation.

Per layer, two per-frame Euclidean distances between teacher features and
the projected student features, both averaged over their frame sets:

  masked term    teacher sees the CLEAN input, student sees the masked
                 input; averaged over masked frames only.
  unmasked term  teacher receives the IDENTICAL masked input as the
                 student; averaged over the unmasked frames.

The total is the alpha-weighted sum of both terms over all layers. Three
variants cover the ablation axes: "full" (both terms), "masked_only"
(unmasked terms forced to zero), and "unmasked_from_clean" (the unmasked
term compares against the teacher's clean-input features instead, the
knowledge-leak variant).

Per-frame distance is the unsquared Euclidean norm; its subgradient at a
zero difference is the zero vector (see tensor.l2_rows).

The trainer is plain Adam with linear warmup then linear decay, one shared
mask plan per step (teacher and student consume the same plan object), and
bit-deterministic metrics under a fixed seed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .encoder import ConfigurationError, EncoderConfig, EncoderModel
from .masking import (
    DegenerateInputError,
    MaskPlan,
    RatioSchedule,
    ratio_at,
    sample_mask,
)
from .reuse import ReusePattern
from .rng import Rng
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    gather_rows,
    l2_rows,
    matmul,
    mul,
    no_grad,
    sub,
)

VARIANTS = ("full", "masked_only", "unmasked_from_clean")

METRICS_SCHEMA_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """The loss went non-finite; carries the failing step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class DistillConfig:
    """Loss and optimizer settings for one distillation run."""

    steps: int
    batch_size: int = 4
    learning_rate: float = 2e-3
    warmup_fraction: float = 0.1
    schedule: RatioSchedule = RatioSchedule.constant(0.4)
    mask_span: int = 10
    variant: str = "full"
    alphas: tuple[float, ...] | None = None  # None: 0.1 per layer, 1.0 at the last
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.alphas is not None and not any(a > 0 for a in self.alphas):
            raise ConfigurationError("at least one layer coefficient must be positive")


def default_alphas(num_layers: int) -> tuple[float, ...]:
    return (0.1,) * (num_layers - 1) + (1.0,)


class ProjectionHead:
    """One linear map per layer from student width to teacher width."""

    def __init__(self, num_layers: int, student_width: int, teacher_width: int,
                 rng: Rng):
        self.weights = [
            Tensor(rng.derive("w", i).normal((student_width, teacher_width),
                                             scale=student_width ** -0.5),
                   requires_grad=True)
            for i in range(num_layers)
        ]
        self.biases = [Tensor(np.zeros(teacher_width), requires_grad=True)
                       for _ in range(num_layers)]

    @classmethod
    def identity(cls, num_layers: int, width: int) -> "ProjectionHead":
        head = cls.__new__(cls)
        head.weights = [Tensor(np.eye(width), requires_grad=True)
                        for _ in range(num_layers)]
        head.biases = [Tensor(np.zeros(width), requires_grad=True)
                       for _ in range(num_layers)]
        return head

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def apply(self, layer: int, x: Tensor) -> Tensor:
        return add(matmul(x, self.weights[layer]), self.biases[layer])

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"proj.{i}.w", w))
            out.append((f"proj.{i}.b", b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


@dataclass
class LossBreakdown:
    """Per-layer loss terms and their weighted total.

    ``node`` is the scalar graph node behind ``total`` so callers can run
    backward(); it never participates in equality or serialization.
    """

    masked: tuple[float, ...]
    unmasked: tuple[float, ...]
    total: float
    node: Tensor = field(repr=False, compare=False)

    def check_decomposition(self, alphas, tol: float = 1e-9) -> None:
        recomposed = sum(a * (m + u) for a, m, u in
                         zip(alphas, self.masked, self.unmasked))
        if abs(recomposed - self.total) > tol:
            raise AssertionError(
                f"loss decomposition broken: total {self.total} vs "
                f"recomposed {recomposed}")


def _mean_frame_distance(teacher_feats: Tensor, student_feats: Tensor,
                         idx: np.ndarray) -> Tensor:
    diff = sub(gather_rows(student_feats, idx), gather_rows(teacher_feats, idx))
    return l2_rows(diff).mean()


def masked_loss(teacher_states: list[Tensor], student_states: list[Tensor],
                proj: ProjectionHead, plan: MaskPlan, layer: int) -> Tensor:
    """Mean distance over masked frames; teacher states must come from the
    clean input. Returns a scalar tensor (float() gives the value)."""
    idx = plan.masked_array()
    if idx.size == 0:
        raise DegenerateInputError("masked loss needs at least one masked frame")
    return _mean_frame_distance(teacher_states[layer],
                                proj.apply(layer, student_states[layer]), idx)


def unmasked_loss(teacher_states: list[Tensor], student_states: list[Tensor],
                  proj: ProjectionHead, plan: MaskPlan, layer: int) -> Tensor:
    """Mean distance over unmasked frames; teacher states must come from the
    SAME masked input the student consumed."""
    idx = plan.unmasked_array()
    if idx.size == 0:
        raise DegenerateInputError("unmasked loss needs at least one unmasked frame")
    return _mean_frame_distance(teacher_states[layer],
                                proj.apply(layer, student_states[layer]), idx)


def _breakdown_from_states(teacher_clean: list[Tensor],
                           teacher_masked: list[Tensor] | None,
                           student_states: list[Tensor],
                           proj: ProjectionHead, plan: MaskPlan,
                           alphas: tuple[float, ...], variant: str) -> LossBreakdown:
    num_layers = len(student_states)
    masked_vals, unmasked_vals = [], []
    node = None
    for layer in range(num_layers):
        m = masked_loss(teacher_clean, student_states, proj, plan, layer)
        if variant == "full":
            u = unmasked_loss(teacher_masked, student_states, proj, plan, layer)
        elif variant == "unmasked_from_clean":
            u = unmasked_loss(teacher_clean, student_states, proj, plan, layer)
        else:  # masked_only
            u = Tensor(0.0)
        masked_vals.append(float(m))
        unmasked_vals.append(float(u))
        term = add(m, u) * alphas[layer]
        node = term if node is None else add(node, term)
    breakdown = LossBreakdown(masked=tuple(masked_vals), unmasked=tuple(unmasked_vals),
                              total=float(node), node=node)
    breakdown.check_decomposition(alphas)
    return breakdown


def _require_frozen(model: EncoderModel, who: str) -> None:
    if any(p.requires_grad for p in model.parameters()):
        raise ConfigurationError(f"{who} must be frozen before distillation")


def total_loss(x: Tensor, teacher: EncoderModel, student: EncoderModel,
               proj: ProjectionHead, cfg: DistillConfig,
               plan: MaskPlan) -> LossBreakdown:
    """Full distillation loss for one utterance under one mask plan.

    The "full" variant runs the teacher twice: on the clean input for the
    masked terms and on the masked input for the unmasked terms; no caching
    between the two passes. The student always consumes the masked input,
    built from the very same plan object.
    """
    _require_frozen(teacher, "teacher")
    if teacher.config.num_layers != student.config.num_layers:
        raise ConfigurationError(
            f"layer-to-layer distillation needs equal depths, got teacher "
            f"{teacher.config.num_layers} vs student {student.config.num_layers}")
    if proj.num_layers != student.config.num_layers:
        raise ConfigurationError("projection head count does not match layers")
    alphas = cfg.alphas if cfg.alphas is not None \
        else default_alphas(student.config.num_layers)
    if len(alphas) != student.config.num_layers:
        raise ConfigurationError(
            f"got {len(alphas)} layer coefficients for "
            f"{student.config.num_layers} layers")

    student_states = [s.hidden for s in student.forward(x, plan)]
    with no_grad():
        teacher_clean = [s.hidden for s in teacher.forward(x)]
        teacher_masked = None
        if cfg.variant == "full":
            teacher_masked = [s.hidden for s in teacher.forward(x, plan)]
    return _breakdown_from_states(teacher_clean, teacher_masked, student_states,
                                  proj, plan, tuple(alphas), cfg.variant)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adaptive moment estimation over an ordered parameter list; updates
    are applied in list order so runs are bit-deterministic."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data = p.data - (self.lr * lr_scale) * m_hat / (np.sqrt(v_hat) + self.eps)


def lr_factor(step: int, total: int, warmup_fraction: float) -> float:
    """Linear warmup to 1.0, then linear decay toward 0 at the final step."""
    if total <= 1:
        return 1.0
    warmup = max(1, int(total * warmup_fraction))
    if step < warmup:
        return (step + 1) / warmup
    return max(0.0, (total - step) / (total - warmup))


# -- training loops -------------------------------------------------------------


@dataclass
class TrainResult:
    student: EncoderModel
    projection: ProjectionHead
    metrics: list[dict]


def _step_record(step: int, ratio: float, breakdowns: list[LossBreakdown],
                 plan: MaskPlan, alphas: tuple[float, ...]) -> dict:
    batch = len(breakdowns)
    masked = [sum(b.masked[l] for b in breakdowns) / batch
              for l in range(len(breakdowns[0].masked))]
    unmasked = [sum(b.unmasked[l] for b in breakdowns) / batch
                for l in range(len(breakdowns[0].unmasked))]
    total = sum(b.total for b in breakdowns) / batch
    recomposed = sum(a * (m + u) for a, m, u in zip(alphas, masked, unmasked))
    if abs(recomposed - total) > 1e-9:
        raise AssertionError(
            f"step {step}: decomposition drift {abs(recomposed - total)}")
    return {"step": step, "ratio": ratio, "total": total,
            "masked": masked, "unmasked": unmasked,
            "mask_sha": plan.mask_hash()}


def train(teacher: EncoderModel, student_config: EncoderConfig,
          student_pattern: ReusePattern, cfg: DistillConfig,
          data_source, rng: Rng) -> TrainResult:
    """Distill a freshly initialized student against a frozen teacher.

    ``data_source(step)`` returns the list of same-length utterances for
    that step. One mask plan is sampled per step from a stream derived off
    (rng, step) and shared by every utterance in the batch and by both
    models. Everything downstream of ``rng`` is deterministic, so repeated
    runs produce byte-identical metrics.
    """
    _require_frozen(teacher, "teacher")
    student = EncoderModel(student_config, student_pattern, rng.derive("student-init"))
    proj = ProjectionHead(student_config.num_layers, student_config.model_width,
                          teacher.config.model_width, rng.derive("proj-init"))
    alphas = cfg.alphas if cfg.alphas is not None \
        else default_alphas(student_config.num_layers)
    opt = Adam(student.parameters() + proj.parameters(), cfg.learning_rate,
               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    metrics: list[dict] = []
    for step in range(cfg.steps):
        batch = data_source(step)
        n = batch[0].shape[0]
        ratio = ratio_at(cfg.schedule, step, max(cfg.steps - 1, 1))
        plan = sample_mask(n, ratio, cfg.mask_span, rng.derive("mask", step))
        opt.zero_grad()
        try:
            breakdowns = [total_loss(u, teacher, student, proj, cfg, plan)
                          for u in batch]
            node = breakdowns[0].node
            for b in breakdowns[1:]:
                node = add(node, b.node)
            node = node * (1.0 / len(batch))
            node.backward()
        except NonFiniteError as exc:
            last = metrics[-1] if metrics else None
            raise TrainingDivergedError(
                step, f"{exc} (last finite record: {last})") from exc
        opt.step(lr_factor(step, cfg.steps, cfg.warmup_fraction))
        metrics.append(_step_record(step, ratio, breakdowns, plan, tuple(alphas)))
    return TrainResult(student=student, projection=proj, metrics=metrics)


def pretrain_teacher(config: EncoderConfig, pattern: ReusePattern, data_source,
                     steps: int, rng: Rng, ratio: float = 0.4, span: int = 5,
                     learning_rate: float = 2e-3) -> EncoderModel:
    """Brief masked-reconstruction pretraining, then freeze.

    The model learns to reproduce the clean frame features at masked
    positions from a linear head on the last hidden state, which gives the
    teacher context-dependent features (so distillation has structure to
    transfer) without any external data.
    """
    model = EncoderModel(config, pattern, rng.derive("teacher-init"))
    d, d_in = config.model_width, config.frame_width
    head_w = Tensor(rng.derive("head").normal((d, d_in), scale=d ** -0.5),
                    requires_grad=True)
    head_b = Tensor(np.zeros(d_in), requires_grad=True)
    opt = Adam(model.parameters() + [head_w, head_b], learning_rate)
    for step in range(steps):
        batch = data_source(step)
        n = batch[0].shape[0]
        plan = sample_mask(n, ratio, span, rng.derive("teacher-mask", step))
        idx = plan.masked_array()
        opt.zero_grad()
        node = None
        for u in batch:
            states = model.forward(u, plan)
            recon = add(matmul(states[-1].hidden, head_w), head_b)
            diff = sub(gather_rows(recon, idx), gather_rows(u, idx))
            term = mul(diff, diff).mean()
            node = term if node is None else add(node, term)
        node = node * (1.0 / len(batch))
        node.backward()
        opt.step(lr_factor(step, steps, 0.1))
    return model.freeze()


def loss_grad_check(teacher: EncoderModel, student: EncoderModel,
                    proj: ProjectionHead, cfg: DistillConfig, plan: MaskPlan,
                    x: Tensor, epsilon: float = 1e-5) -> float:
    """Finite-difference check of the full loss gradient w.r.t. every
    student and projection parameter. Teacher states are computed once and
    held fixed (they do not depend on the checked parameters)."""
    from .tensor import grad_check

    _require_frozen(teacher, "teacher")
    alphas = cfg.alphas if cfg.alphas is not None \
        else default_alphas(student.config.num_layers)
    with no_grad():
        teacher_clean = [s.hidden for s in teacher.forward(x)]
        teacher_masked = None
        if cfg.variant == "full":
            teacher_masked = [s.hidden for s in teacher.forward(x, plan)]

    def rebuild(_):
        student_states = [s.hidden for s in student.forward(x, plan)]
        return _breakdown_from_states(teacher_clean, teacher_masked, student_states,
                                      proj, plan, tuple(alphas), cfg.variant).node

    params = student.parameters() + proj.parameters()
    return grad_check(rebuild, params, epsilon=epsilon)


# -- metrics serialization ------------------------------------------------------


def metrics_to_jsonl(records: list[dict]) -> str:
    lines = []
    for r in records:
        row = {"schema_version": METRICS_SCHEMA_VERSION}
        row.update(r)
        lines.append(json.dumps(row, sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


def metrics_to_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if not records:
        writer.writerow(["step", "ratio", "total", "mask_sha"])
        return buf.getvalue()
    num_layers = len(records[0]["masked"])
    header = (["step", "ratio", "total"]
              + [f"L_m_{l + 1}" for l in range(num_layers)]
              + [f"L_u_{l + 1}" for l in range(num_layers)]
              + ["mask_sha"])
    writer.writerow(header)
    for r in records:
        writer.writerow([r["step"], repr(r["ratio"]), repr(r["total"])]
                        + [repr(v) for v in r["masked"]]
                        + [repr(v) for v in r["unmasked"]]
                        + [r["mask_sha"]])
    return buf.getvalue()


def write_metrics(out_dir, records: list[dict], stem: str = "metrics") -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.jsonl").write_text(metrics_to_jsonl(records))
    (out / f"{stem}.csv").write_text(metrics_to_csv(records))
