"""Transformer encoder with per-layer standard or map-reusing attention.

Layer layout is pre-norm: x + Attn(LN(x)), then x + FFN(LN(x)), GELU inside
the FFN. There is no final norm after the last layer, so each layer's
recorded hidden state is the raw post-residual stream — the surface the
distillation losses read.

A layer either computes its own multi-head attention maps
(softmax(Q K^T / sqrt(d_k)) per head) or consumes the stored map tensors of
an earlier compute layer. Reusing layers carry no key/query weights at all;
because the reused maps are the source layer's actual graph nodes,
gradients taken through a reusing layer flow back into the source layer's
key/query parameters.

:class:`Encoder` is the bare stack (position embedding + layers) operating
on already-projected features of width ``model_width``.
:class:`EncoderModel` adds the frame-level frontend stub: an input
projection from ``input_width`` and a learned mask embedding applied to raw
frames, which is what teacher/student models are built from.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .masking import MaskPlan, apply_mask
from .reuse import ReusePattern, validate
from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_cols,
    gather_rows,
    gelu,
    layernorm,
    matmul,
    softmax_rows,
    transpose,
)


class ConfigurationError(ValueError):
    """Encoder configuration and inputs do not fit together."""


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture description, the single source of truth for both the
    runnable encoder and the cost model.

    ``frontend_params`` / ``frontend_macs_per_frame`` are accounting
    constants for the (out-of-scope) waveform frontend; they buy nothing at
    runtime. ``input_width`` is the raw frame-feature width consumed by
    :class:`EncoderModel` (defaults to ``model_width``).
    """

    num_layers: int
    model_width: int
    num_heads: int
    ffn_width: int
    key_width: int | None = None
    value_width: int | None = None
    teacher_width: int = 768
    input_width: int | None = None
    max_seq_len: int = 512
    frontend_params: int = 0
    frontend_macs_per_frame: int = 0
    include_biases: bool = True

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError(f"need at least one layer, got {self.num_layers}")
        if self.model_width < 1 or self.num_heads < 1 or self.ffn_width < 1:
            raise ConfigurationError("widths and head count must be positive")
        if (self.key_width is None or self.value_width is None) \
                and self.model_width % self.num_heads != 0:
            raise ConfigurationError(
                f"{self.num_heads} heads do not divide width {self.model_width}; "
                "set key_width/value_width explicitly")
        if self.max_seq_len < 1:
            raise ConfigurationError("max_seq_len must be positive")

    @property
    def head_key_width(self) -> int:
        return self.key_width if self.key_width is not None \
            else self.model_width // self.num_heads

    @property
    def head_value_width(self) -> int:
        return self.value_width if self.value_width is not None \
            else self.model_width // self.num_heads

    @property
    def frame_width(self) -> int:
        return self.input_width if self.input_width is not None else self.model_width


@dataclass
class AttentionWeights:
    """Per-head projections; reusing layers have query = key = None (the
    parameters truly do not exist, they are not zeroed tensors)."""

    query: list[Tensor] | None
    key: list[Tensor] | None
    value: list[Tensor]
    out_proj: Tensor
    query_bias: list[Tensor] | None = None
    key_bias: list[Tensor] | None = None
    value_bias: list[Tensor] | None = None
    out_bias: Tensor | None = None

    @property
    def num_heads(self) -> int:
        return len(self.value)

    def has_key_query(self) -> bool:
        return self.query is not None and self.key is not None


@dataclass
class LayerWeights:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attention: AttentionWeights
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn_w1: Tensor
    ffn_w2: Tensor
    ffn_b1: Tensor | None = None
    ffn_b2: Tensor | None = None


@dataclass
class LayerState:
    """Per-layer outputs: post-FFN hidden state, this layer's attention
    maps (the source layer's very tensors when reusing), and where the maps
    came from (1-based, None when computed here)."""

    hidden: Tensor
    attention_maps: list[Tensor]
    reused_from: int | None = None


def _init_linear(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out), scale=fan_in ** -0.5), requires_grad=True)


def _init_attention(config: EncoderConfig, reusing: bool, rng: Rng) -> AttentionWeights:
    d, h = config.model_width, config.num_heads
    dk, dv = config.head_key_width, config.head_value_width
    biases = config.include_biases

    def vec(width):
        return Tensor(np.zeros(width), requires_grad=True)

    if reusing:
        q = k = qb = kb = None
    else:
        q = [_init_linear(rng.derive("q", i), d, dk) for i in range(h)]
        k = [_init_linear(rng.derive("k", i), d, dk) for i in range(h)]
        qb = [vec(dk) for _ in range(h)] if biases else None
        kb = [vec(dk) for _ in range(h)] if biases else None
    v = [_init_linear(rng.derive("v", i), d, dv) for i in range(h)]
    vb = [vec(dv) for _ in range(h)] if biases else None
    out = _init_linear(rng.derive("out"), h * dv, d)
    ob = vec(d) if biases else None
    return AttentionWeights(query=q, key=k, value=v, out_proj=out,
                            query_bias=qb, key_bias=kb, value_bias=vb, out_bias=ob)


def _init_layer(config: EncoderConfig, reusing: bool, rng: Rng) -> LayerWeights:
    d, f = config.model_width, config.ffn_width
    ones = lambda: Tensor(np.ones(d), requires_grad=True)
    zeros = lambda w: Tensor(np.zeros(w), requires_grad=True)
    return LayerWeights(
        ln1_gamma=ones(), ln1_beta=zeros(d),
        attention=_init_attention(config, reusing, rng.derive("attn")),
        ln2_gamma=ones(), ln2_beta=zeros(d),
        ffn_w1=_init_linear(rng.derive("ffn1"), d, f),
        ffn_w2=_init_linear(rng.derive("ffn2"), f, d),
        ffn_b1=zeros(f) if config.include_biases else None,
        ffn_b2=zeros(d) if config.include_biases else None,
    )


def _project(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def mhsa_forward(x: Tensor, w: AttentionWeights) -> tuple[Tensor, list[Tensor]]:
    """Standard multi-head self-attention.

    Returns the projected output and the per-head attention maps
    softmax(Q_h K_h^T / sqrt(d_k)), each an (n, n) row-stochastic tensor,
    kept around so later layers can reuse them.
    """
    if not w.has_key_query():
        raise ConfigurationError(
            "mhsa_forward needs key/query weights; this layer is configured to reuse")
    maps, heads = [], []
    dk = w.query[0].shape[1]
    inv_sqrt_dk = 1.0 / np.sqrt(dk)
    for h in range(w.num_heads):
        q = _project(x, w.query[h], w.query_bias[h] if w.query_bias else None)
        k = _project(x, w.key[h], w.key_bias[h] if w.key_bias else None)
        a = softmax_rows(matmul(q, transpose(k)) * inv_sqrt_dk)
        v = _project(x, w.value[h], w.value_bias[h] if w.value_bias else None)
        maps.append(a)
        heads.append(matmul(a, v))
    out = _project(concat_cols(heads), w.out_proj, w.out_bias)
    return out, maps


def reuse_mhsa_forward(x: Tensor, w: AttentionWeights, maps: list[Tensor]) -> Tensor:
    """Attention with borrowed maps: only the value/output path is computed,
    no key/query work happens at all."""
    if w.has_key_query():
        raise ConfigurationError("reusing layer unexpectedly carries key/query weights")
    n = x.shape[0]
    if len(maps) != w.num_heads:
        raise ShapeError(f"expected {w.num_heads} maps, got {len(maps)}")
    for a in maps:
        if a.shape != (n, n):
            raise ShapeError(f"attention map shape {a.shape} does not match n={n}")
    heads = []
    for h in range(w.num_heads):
        v = _project(x, w.value[h], w.value_bias[h] if w.value_bias else None)
        heads.append(matmul(maps[h], v))
    return _project(concat_cols(heads), w.out_proj, w.out_bias)


def encoder_forward(x: Tensor, config: EncoderConfig, pattern: ReusePattern,
                    layers: list[LayerWeights],
                    pos_embedding: Tensor | None = None) -> list[LayerState]:
    """Run the full stack, recording one LayerState per layer.

    A reusing layer stores the source layer's map tensors themselves (same
    objects), so a perturbation of the source's key/query weights moves
    both layers' maps identically.
    """
    problems = validate(pattern, config.num_layers)
    if problems:
        raise ConfigurationError("pattern does not fit encoder: " + "; ".join(problems))
    if len(layers) != config.num_layers:
        raise ConfigurationError(
            f"got weights for {len(layers)} layers, config has {config.num_layers}")
    n = x.shape[0]
    if pos_embedding is not None:
        if n > pos_embedding.shape[0]:
            raise ConfigurationError(
                f"sequence length {n} exceeds max_seq_len {pos_embedding.shape[0]}")
        x = add(x, gather_rows(pos_embedding, np.arange(n)))

    states: list[LayerState] = []
    for idx, w in enumerate(layers, start=1):
        source = pattern.source_of(idx)
        z = layernorm(x, w.ln1_gamma, w.ln1_beta)
        if source is None:
            attn_out, maps = mhsa_forward(z, w.attention)
        else:
            maps = states[source - 1].attention_maps
            attn_out = reuse_mhsa_forward(z, w.attention, maps)
        x = add(x, attn_out)
        z2 = layernorm(x, w.ln2_gamma, w.ln2_beta)
        hidden = gelu(_project(z2, w.ffn_w1, w.ffn_b1))
        x = add(x, _project(hidden, w.ffn_w2, w.ffn_b2))
        states.append(LayerState(hidden=x, attention_maps=maps, reused_from=source))
    return states


def _attention_named(prefix: str, w: AttentionWeights):
    for group, tensors in (("q", w.query), ("k", w.key), ("v", w.value)):
        if tensors is not None:
            for h, t in enumerate(tensors):
                yield f"{prefix}.{group}.{h}", t
    for group, tensors in (("q_bias", w.query_bias), ("k_bias", w.key_bias),
                           ("v_bias", w.value_bias)):
        if tensors is not None:
            for h, t in enumerate(tensors):
                yield f"{prefix}.{group}.{h}", t
    yield f"{prefix}.out", w.out_proj
    if w.out_bias is not None:
        yield f"{prefix}.out_bias", w.out_bias


class Encoder:
    """Position embedding + layer stack built from (config, pattern)."""

    def __init__(self, config: EncoderConfig, pattern: ReusePattern, rng: Rng):
        problems = validate(pattern, config.num_layers)
        if problems:
            raise ConfigurationError("invalid pattern: " + "; ".join(problems))
        self.config = config
        self.pattern = pattern
        self.pos_embedding = Tensor(
            rng.derive("pos").normal((config.max_seq_len, config.model_width), scale=0.02),
            requires_grad=True)
        self.layers = [
            _init_layer(config, pattern.source_of(i) is not None, rng.derive("layer", i))
            for i in range(1, config.num_layers + 1)
        ]

    def forward(self, x: Tensor) -> list[LayerState]:
        return encoder_forward(x, self.config, self.pattern, self.layers,
                               self.pos_embedding)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("pos_embedding", self.pos_embedding)]
        for i, w in enumerate(self.layers):
            p = f"layers.{i}"
            out.append((f"{p}.ln1.gamma", w.ln1_gamma))
            out.append((f"{p}.ln1.beta", w.ln1_beta))
            out.extend(_attention_named(f"{p}.attn", w.attention))
            out.append((f"{p}.ln2.gamma", w.ln2_gamma))
            out.append((f"{p}.ln2.beta", w.ln2_beta))
            out.append((f"{p}.ffn.w1", w.ffn_w1))
            if w.ffn_b1 is not None:
                out.append((f"{p}.ffn.b1", w.ffn_b1))
            out.append((f"{p}.ffn.w2", w.ffn_w2))
            if w.ffn_b2 is not None:
                out.append((f"{p}.ffn.b2", w.ffn_b2))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.data.size for t in self.parameters())


class EncoderModel:
    """Encoder plus the frame-level frontend stub.

    Owns the input projection (frame width -> model width) and a learned
    mask embedding applied to raw frames. Teacher and student are both
    instances of this class; a frozen teacher's mask embedding is sampled
    once at creation and never updated.
    """

    def __init__(self, config: EncoderConfig, pattern: ReusePattern, rng: Rng):
        self.config = config
        self.pattern = pattern
        d_in, d = config.frame_width, config.model_width
        self.input_proj_w = _init_linear(rng.derive("input_proj"), d_in, d)
        self.input_proj_b = Tensor(np.zeros(d), requires_grad=True)
        self.mask_embedding = Tensor(rng.derive("mask_emb").normal((d_in,), scale=0.5),
                                     requires_grad=True)
        self.encoder = Encoder(config, pattern, rng.derive("encoder"))

    def forward(self, frames: Tensor, plan: MaskPlan | None = None) -> list[LayerState]:
        """Layer states for raw frames; with a plan, frames are masked with
        this model's own embedding before projection."""
        if frames.data.ndim != 2 or frames.shape[1] != self.config.frame_width:
            raise ConfigurationError(
                f"frames shape {frames.shape} does not match input width "
                f"{self.config.frame_width}")
        x = frames if plan is None else apply_mask(frames, plan, self.mask_embedding)
        x = add(matmul(x, self.input_proj_w), self.input_proj_b)
        return self.encoder.forward(x)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("input_proj.w", self.input_proj_w),
               ("input_proj.b", self.input_proj_b),
               ("mask_embedding", self.mask_embedding)]
        out.extend((f"encoder.{name}", t) for name, t in self.encoder.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def freeze(self) -> "EncoderModel":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def copy_weights_from(self, other: "EncoderModel") -> None:
        mine = self.named_parameters()
        theirs = dict(other.named_parameters())
        if set(dict(mine)) != set(theirs):
            raise ConfigurationError("models have different parameter sets")
        for name, t in mine:
            if t.shape != theirs[name].shape:
                raise ConfigurationError(
                    f"shape mismatch for {name}: {t.shape} vs {theirs[name].shape}")
            t.data = theirs[name].data.copy()


# -- checkpoint container -----------------------------------------------------
#
# Layout (little-endian): magic b"RKDC", format version uint16, header length
# uint64, UTF-8 JSON header, then each array's float64 row-major bytes in
# manifest order. The header carries the config, the pattern directives and
# the array manifest (name + shape), so a file is self-describing. The writer
# is fully deterministic, making save -> load -> save byte-stable.

_CKPT_MAGIC = b"RKDC"
_CKPT_VERSION = 1


def save_checkpoint(path, config: EncoderConfig, pattern: ReusePattern,
                    named_arrays: list[tuple[str, Tensor]]) -> None:
    manifest = [{"name": name, "shape": list(t.data.shape)} for name, t in named_arrays]
    header = {
        "config": asdict(config),
        "pattern": list(pattern.directives),
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HQ", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in named_arrays:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EncoderConfig, ReusePattern, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint container")
        version, header_len = struct.unpack("<HQ", fh.read(10))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    config = EncoderConfig(**header["config"])
    pattern = ReusePattern(tuple(header["pattern"]))
    return config, pattern, arrays


def save_model(path, model: EncoderModel,
               extra_arrays: list[tuple[str, Tensor]] | None = None) -> None:
    arrays = model.named_parameters() + list(extra_arrays or [])
    save_checkpoint(path, model.config, model.pattern, arrays)


def load_model(path) -> tuple[EncoderModel, dict[str, np.ndarray]]:
    """Rebuild an EncoderModel from a checkpoint; arrays not belonging to
    the model (e.g. projection heads) are returned for the caller."""
    config, pattern, arrays = load_checkpoint(path)
    model = EncoderModel(config, pattern, Rng(0))
    consumed = set()
    for name, t in model.named_parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint missing array {name}")
        if arrays[name].shape != t.data.shape:
            raise ValueError(
                f"checkpoint array {name} has shape {arrays[name].shape}, "
                f"model expects {t.data.shape}")
        t.data = arrays[name].copy()
        consumed.add(name)
    leftovers = {k: v for k, v in arrays.items() if k not in consumed}
    return model, leftovers
