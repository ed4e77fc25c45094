"""Toy decoder-only multi-modal transformer with pruning hook points.

A small frozen-backbone stand-in: vision patch vectors pass through a linear
connector, text ids through an embedding table, and the concatenated
sequence runs through rotary-attention decoder layers.  Decision modules
inserted after scheduled layers drive either attention masking (training
path, constant sequence length) or physical token removal (inference path,
survivors keep their original position indices).  ``verify_equivalence``
checks that both paths agree at surviving positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import SeededRng, Tensor
from .pruning import (
    DecisionModuleParams,
    KeepScores,
    PruneDecision,
    PruneSchedule,
    NoTextTokensError,
    TokenLayout,
    build_attention_mask,
    combine_decisions,
    decision_module_forward,
    gumbel_decision,
    kept_count,
    reindex_positions,
    select_top_k,
)

_CAUSAL_NEG = -1e9


@dataclass(frozen=True)
class ToyMllmConfig:
    depth: int = 8
    d: int = 64
    heads: int = 4
    ffn: int = 256
    vocab: int = 64
    max_positions: int = 128
    vision_tokens: int = 16
    patch_dim: int = 16
    position_kind: str = "rotary"  # or "absolute"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("heads must divide d")
        if self.vision_tokens < 1:
            raise ValueError("need at least one vision token")
        if self.position_kind not in ("rotary", "absolute"):
            raise ValueError("position_kind must be 'rotary' or 'absolute'")
        if self.position_kind == "rotary" and (self.d // self.heads) % 2 != 0:
            raise ValueError("rotary positions need an even per-head width")


@dataclass
class DecoderLayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_ffn1: Tensor
    b_ffn1: Tensor
    w_ffn2: Tensor
    b_ffn2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in (
            "w_q", "w_k", "w_v", "w_o", "ln1_gain", "ln1_bias",
            "w_ffn1", "b_ffn1", "w_ffn2", "b_ffn2", "ln2_gain", "ln2_bias",
        )}


@dataclass
class BackboneParams:
    embedding: Tensor
    connector_w: Tensor
    connector_b: Tensor
    pos_embedding: Tensor | None
    layers: list[DecoderLayerParams]
    final_ln_gain: Tensor
    final_ln_bias: Tensor
    head: Tensor

    def named(self) -> dict[str, Tensor]:
        out = {
            "backbone.embedding": self.embedding,
            "backbone.connector_w": self.connector_w,
            "backbone.connector_b": self.connector_b,
            "backbone.final_ln_gain": self.final_ln_gain,
            "backbone.final_ln_bias": self.final_ln_bias,
            "backbone.head": self.head,
        }
        if self.pos_embedding is not None:
            out["backbone.pos_embedding"] = self.pos_embedding
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"backbone.layer.{i}"))
        return out

    def trainable(self) -> list[Tensor]:
        return list(self.named().values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.named().values():
            t.requires_grad = flag

    def checksum(self) -> float:
        return float(sum(np.abs(t.data).sum() for t in self.named().values()))


def init_backbone(cfg: ToyMllmConfig, rng: SeededRng) -> BackboneParams:
    d = cfg.d

    def proj(fan_in, shape):
        return Tensor(rng.normal(shape, scale=1.0 / math.sqrt(fan_in)), requires_grad=True)

    layers = []
    for _ in range(cfg.depth):
        layers.append(DecoderLayerParams(
            w_q=proj(d, (d, d)),
            w_k=proj(d, (d, d)),
            w_v=proj(d, (d, d)),
            w_o=proj(d, (d, d)),
            ln1_gain=Tensor(np.ones(d), requires_grad=True),
            ln1_bias=Tensor(np.zeros(d), requires_grad=True),
            w_ffn1=proj(d, (d, cfg.ffn)),
            b_ffn1=Tensor(np.zeros(cfg.ffn), requires_grad=True),
            w_ffn2=proj(cfg.ffn, (cfg.ffn, d)),
            b_ffn2=Tensor(np.zeros(d), requires_grad=True),
            ln2_gain=Tensor(np.ones(d), requires_grad=True),
            ln2_bias=Tensor(np.zeros(d), requires_grad=True),
        ))
    pos = None
    if cfg.position_kind == "absolute":
        pos = Tensor(rng.normal((cfg.max_positions, d), scale=0.02), requires_grad=True)
    return BackboneParams(
        embedding=Tensor(rng.normal((cfg.vocab, d), scale=0.02), requires_grad=True),
        connector_w=proj(cfg.patch_dim, (cfg.patch_dim, d)),
        connector_b=Tensor(np.zeros(d), requires_grad=True),
        pos_embedding=pos,
        layers=layers,
        final_ln_gain=Tensor(np.ones(d), requires_grad=True),
        final_ln_bias=Tensor(np.zeros(d), requires_grad=True),
        head=proj(d, (d, cfg.vocab)),
    )


# ---------------------------------------------------------------------------
# positions and masks


def rotary_tables(positions: np.ndarray, dh: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables per position for a head width dh; positions (..., n)."""
    half = dh // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    return np.cos(angles), np.sin(angles)


def _apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate half-pairs of the last axis; cos/sin broadcast over heads."""
    half = x.data.shape[-1] // 2
    x1 = nm.slice_last(x, 0, half)
    x2 = nm.slice_last(x, half, 2 * half)
    rot1 = nm.sub(nm.mul(x1, cos), nm.mul(x2, sin))
    rot2 = nm.add(nm.mul(x1, sin), nm.mul(x2, cos))
    return nm.concat([rot1, rot2], axis=-1)


def causal_additive_mask(positions: np.ndarray) -> np.ndarray:
    """0 where key position <= query position, -1e9 elsewhere.

    positions: (n,) or (B, n) ORIGINAL indices; output (1|B, 1, n, n) ready
    to broadcast over heads.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 1:
        pos = pos[None, :]
    allowed = pos[:, None, :] <= pos[:, :, None]
    return np.where(allowed, 0.0, _CAUSAL_NEG)[:, None, :, :]


# ---------------------------------------------------------------------------
# forward passes


def embed_inputs(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    patches: np.ndarray,
    text_ids: np.ndarray,
) -> tuple[Tensor, TokenLayout, np.ndarray]:
    """Connector-projected vision rows, then embedded text rows.

    patches: (B, V, patch_dim); text_ids: (B, T).  Returns the (B, N, d)
    hidden state, the shared layout, and the (N,) original positions.
    """
    patches = np.asarray(patches, dtype=np.float64)
    text_ids = np.asarray(text_ids, dtype=np.intp)
    if patches.ndim != 3 or text_ids.ndim != 2:
        raise nm.DimensionError("expected batched patches (B,V,p) and text ids (B,T)")
    if text_ids.shape[1] == 0:
        raise NoTextTokensError("at least one text token is required")
    v, t = patches.shape[1], text_ids.shape[1]
    vision = nm.add(nm.matmul(Tensor(patches), backbone.connector_w), backbone.connector_b)
    text = nm.embedding_rows(backbone.embedding, text_ids)
    h = nm.concat([vision, text], axis=1)
    layout = TokenLayout(v + t, tuple(range(v)), tuple(range(v, v + t)))
    positions = np.arange(v + t)
    if cfg.position_kind == "absolute":
        h = nm.add(h, nm.embedding_rows(backbone.pos_embedding, positions))
    return h, layout, positions


def decoder_layer_forward(
    layer: DecoderLayerParams,
    cfg: ToyMllmConfig,
    h: Tensor,
    positions: np.ndarray,
    causal_mask: np.ndarray,
    prune_mask: Tensor | None = None,
) -> Tensor:
    """Pre-norm self-attention (rotary from original indices) + FFN.

    Raw scores get the additive causal mask; when a prune mask is present
    the multiplicative masked softmax is used, otherwise the plain one.
    """
    heads, dh = cfg.heads, cfg.d // cfg.heads
    a = nm.layer_norm(h, layer.ln1_gain, layer.ln1_bias)
    q = nm.matmul(a, layer.w_q)
    k = nm.matmul(a, layer.w_k)
    v = nm.matmul(a, layer.w_v)

    def split(x):
        b, n, d = x.data.shape
        return nm.transpose(nm.reshape(x, (b, n, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    if cfg.position_kind == "rotary":
        cos, sin = rotary_tables(positions, dh)
        if cos.ndim == 2:  # shared positions -> broadcast over batch and heads
            cos, sin = cos[None, None], sin[None, None]
        else:  # per-sample positions -> insert the head axis
            cos, sin = cos[:, None], sin[:, None]
        qh = _apply_rotary(qh, cos, sin)
        kh = _apply_rotary(kh, cos, sin)
    scores = nm.add(nm.scale(nm.matmul(qh, nm.transpose(kh)), 1.0 / math.sqrt(dh)), causal_mask)
    if prune_mask is not None:
        mask = prune_mask
        if mask.data.ndim == 2:
            mask = nm.reshape(mask, (1, 1) + mask.data.shape)
        elif mask.data.ndim == 3:
            mask = nm.reshape(mask, (mask.data.shape[0], 1) + mask.data.shape[1:])
        probs = nm.masked_row_softmax(scores, mask)
    else:
        probs = nm.row_softmax(scores)
    ctx = nm.matmul(probs, vh)
    b, _, n, _ = ctx.data.shape
    merged = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, n, cfg.d))
    h = nm.add(h, nm.matmul(merged, layer.w_o))
    a2 = nm.layer_norm(h, layer.ln2_gain, layer.ln2_bias)
    inner = nm.silu(nm.add(nm.matmul(a2, layer.w_ffn1), layer.b_ffn1))
    return nm.add(h, nm.add(nm.matmul(inner, layer.w_ffn2), layer.b_ffn2))


def _logits(backbone: BackboneParams, h: Tensor) -> Tensor:
    return nm.matmul(
        nm.layer_norm(h, backbone.final_ln_gain, backbone.final_ln_bias), backbone.head
    )


@dataclass
class ForwardTrace:
    """Everything a forward pass reports besides its logits."""

    logits: Tensor
    keep_scores: list[KeepScores] = field(default_factory=list)
    decisions: list[PruneDecision] = field(default_factory=list)
    keep_fractions: list[float] = field(default_factory=list)
    keep_fraction_tensors: list[Tensor] = field(default_factory=list)
    kept_indices: list[np.ndarray] | None = None
    hidden: list[np.ndarray] | None = None
    positions: np.ndarray | None = None


def forward_train(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    modules: list[DecisionModuleParams],
    schedule: PruneSchedule | None,
    patches: np.ndarray,
    text_ids: np.ndarray,
    tau: float = 1.0,
    rng: SeededRng | None = None,
    mode: str = "train",
    forced_decisions: list[PruneDecision] | None = None,
    record_hidden: bool = False,
) -> ForwardTrace:
    """Masked forward: constant sequence length, decisions applied via masks.

    After each scheduled layer the decision module scores ALL original
    vision tokens, the new decision is combined with the running cumulative
    one, and the resulting mask governs every later layer until the next
    module.  ``forced_decisions`` bypasses scoring-as-decision (scores are
    still recorded) so captured decisions can be replayed.
    """
    if schedule is not None and schedule.layers and schedule.layers[-1] > cfg.depth:
        raise ValueError("schedule layer index exceeds backbone depth")
    h, layout, positions = embed_inputs(backbone, cfg, patches, text_ids)
    causal = causal_additive_mask(positions)
    trace = ForwardTrace(logits=h, positions=positions)
    hidden: list[np.ndarray] = []
    mask: Tensor | None = None
    cumulative: PruneDecision | None = None
    stage = 0
    for layer_idx in range(1, cfg.depth + 1):
        h = decoder_layer_forward(backbone.layers[layer_idx - 1], cfg, h, positions, causal, mask)
        if record_hidden:
            hidden.append(h.data.copy())
        if schedule is not None and stage < schedule.num_modules and layer_idx == schedule.layers[stage]:
            scores = decision_module_forward(h, layout, modules[stage])
            if forced_decisions is not None:
                decision = forced_decisions[stage]
            else:
                decision = gumbel_decision(
                    scores, tau, None if rng is None else rng.derive(7, stage), mode
                )
            cumulative = decision if cumulative is None else combine_decisions(cumulative, decision)
            mask = build_attention_mask(cumulative, layout)
            trace.keep_scores.append(scores)
            trace.decisions.append(cumulative)
            trace.keep_fractions.append(float(cumulative.values.mean()))
            if cumulative.tensor is not None:
                # per-sample realized fractions; the ratio loss averages them
                trace.keep_fraction_tensors.append(nm.mean_last(cumulative.tensor))
            stage += 1
    trace.logits = _logits(backbone, h)
    if record_hidden:
        trace.hidden = hidden
    return trace


def forward_infer(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    modules: list[DecisionModuleParams],
    schedule: PruneSchedule | None,
    patches: np.ndarray,
    text_ids: np.ndarray,
    forced_keep: list[np.ndarray] | None = None,
    score_override_rng: SeededRng | None = None,
    record_hidden: bool = False,
) -> ForwardTrace:
    """Pruned forward: dropped vision rows are physically removed.

    Survivors keep their ORIGINAL position indices (rotary tables and the
    causal mask are rebuilt from them).  Selection keeps the top
    floor(rho_hat * V_original) keep-probabilities per sample; since that
    count is sample-independent, the whole batch stays rectangular.
    ``forced_keep`` replays given per-stage keep sets (original vision
    indices); ``score_override_rng`` replaces learned scores with seeded
    uniform draws (random-pruning baseline at matched survivor counts).
    """
    if schedule is not None and schedule.layers and schedule.layers[-1] > cfg.depth:
        raise ValueError("schedule layer index exceeds backbone depth")
    h, layout, base_positions = embed_inputs(backbone, cfg, patches, text_ids)
    batch = h.data.shape[0]
    v_orig, t = layout.num_vision, layout.num_text
    positions = np.broadcast_to(base_positions, (batch, layout.total)).copy()
    causal = causal_additive_mask(positions)
    # original vision index of each current vision row, per sample
    orig_vision = np.broadcast_to(np.arange(v_orig), (batch, v_orig)).copy()
    cur_layout = layout
    trace = ForwardTrace(logits=h, kept_indices=[], positions=positions)
    hidden: list[np.ndarray] = []
    stage = 0
    for layer_idx in range(1, cfg.depth + 1):
        h = decoder_layer_forward(backbone.layers[layer_idx - 1], cfg, h, positions, causal)
        if record_hidden:
            hidden.append(h.data.copy())
        if schedule is not None and stage < schedule.num_modules and layer_idx == schedule.layers[stage]:
            scores = decision_module_forward(h, cur_layout, modules[stage])
            trace.keep_scores.append(scores)
            if forced_keep is not None and forced_keep[stage] is not None:
                kept_rows = np.stack([
                    np.asarray([int(np.where(orig_vision[b] == oi)[0][0])
                                for oi in forced_keep[stage]], dtype=np.intp)
                    for b in range(batch)
                ])
            else:
                p_keep = scores.p_keep  # (B, v_cur)
                if score_override_rng is not None:
                    p_keep = score_override_rng.uniform(p_keep.shape)
                kept_rows = _select_rows(
                    p_keep, schedule.infer_ratios[stage], layout, orig_vision
                )
            h = _prune_rows(h, kept_rows, cur_layout)
            orig_vision = np.take_along_axis(orig_vision, kept_rows, axis=1)
            positions = np.stack([
                np.concatenate([positions[b, kept_rows[b]], positions[b, cur_layout.text]])
                for b in range(batch)
            ])
            k = kept_rows.shape[1]
            cur_layout = TokenLayout(k + t, tuple(range(k)), tuple(range(k, k + t)))
            causal = causal_additive_mask(positions)
            trace.kept_indices.append(orig_vision.copy())
            trace.keep_fractions.append(k / v_orig)
            stage += 1
    trace.logits = _logits(backbone, h)
    trace.positions = positions
    if record_hidden:
        trace.hidden = hidden
    return trace


def _select_rows(
    p_keep: np.ndarray, rho_hat: float, layout: TokenLayout, orig_vision: np.ndarray
) -> np.ndarray:
    """Per-sample top-k row selection via select_top_k on original indices."""
    v_orig = layout.num_vision
    rows = []
    for b in range(p_keep.shape[0]):
        surviving = np.zeros(v_orig)
        surviving[orig_vision[b]] = 1.0
        # embed current scores at their original slots; dead slots are excluded
        gamma = np.zeros((v_orig, 2))
        gamma[orig_vision[b], 0] = np.log(np.clip(p_keep[b], 1e-12, None))
        gamma[orig_vision[b], 1] = np.log(np.clip(1.0 - p_keep[b], 1e-12, None))
        kept_orig = select_top_k(
            KeepScores(Tensor(gamma)), rho_hat, layout, PruneDecision(surviving)
        )
        rows.append([int(np.where(orig_vision[b] == oi)[0][0]) for oi in kept_orig])
    return np.asarray(rows, dtype=np.intp)


def _prune_rows(h: Tensor, kept_rows: np.ndarray, layout: TokenLayout) -> Tensor:
    text_rows = np.broadcast_to(
        np.asarray(layout.text, dtype=np.intp), (kept_rows.shape[0], layout.num_text)
    )
    idx = np.concatenate([kept_rows, text_rows], axis=1)
    return nm.take_per_sample(h, idx)


def verify_equivalence(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    modules: list[DecisionModuleParams],
    schedule: PruneSchedule,
    patches: np.ndarray,
    text_ids: np.ndarray,
    tau: float = 1.0,
    seed: int = 0,
) -> dict:
    """Masked-vs-pruned agreement for one sample under identical decisions.

    Decisions captured from a masked forward are replayed as the inference
    keep sets; hidden states and logits are compared at surviving vision
    positions and all text positions, layer by layer.
    """
    rng = SeededRng(seed, 101)
    masked = forward_train(
        backbone, cfg, modules, schedule, patches, text_ids,
        tau=tau, rng=rng, mode="train", record_hidden=True,
    )
    keep_sets = [np.flatnonzero(dec.values[0]) for dec in masked.decisions]
    pruned = forward_infer(
        backbone, cfg, modules, schedule, patches, text_ids,
        forced_keep=keep_sets, record_hidden=True,
    )
    v = cfg.vision_tokens
    text_positions = np.arange(v, v + text_ids.shape[1])
    max_dev = 0.0
    per_layer = []
    stage = 0
    survivors = np.arange(v)
    for layer_idx in range(1, cfg.depth + 1):
        masked_h = masked.hidden[layer_idx - 1][0]
        pruned_h = pruned.hidden[layer_idx - 1][0]
        rows_masked = np.concatenate([survivors, text_positions])
        dev = float(np.abs(masked_h[rows_masked] - pruned_h).max())
        per_layer.append(dev)
        max_dev = max(max_dev, dev)
        if stage < schedule.num_modules and layer_idx == schedule.layers[stage]:
            survivors = keep_sets[stage]
            stage += 1
    rows_masked = np.concatenate([survivors, text_positions])
    logit_dev = float(np.abs(masked.logits.data[0][rows_masked] - pruned.logits.data[0]).max())
    max_dev = max(max_dev, logit_dev)
    return {
        "max_abs_deviation": max_dev,
        "per_layer": per_layer,
        "logit_deviation": logit_dev,
        "keep_sets": keep_sets,
    }
