"""Language-guided vision-token pruning primitives.

Cross-attention decision modules score vision tokens against text tokens,
Gumbel-Softmax turns scores into differentiable keep/drop decisions,
decisions accumulate multiplicatively across stages, and masks or top-k
selection apply them during the masked (training) and physically pruned
(inference) forward passes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import DimensionError, SeededRng, Tensor


class NoTextTokensError(ValueError):
    """Decision modules require at least one text token as language context."""


class ScheduleInfeasibleError(ValueError):
    """A stage asks for more survivors than are available."""


# ---------------------------------------------------------------------------
# token layout and decisions


@dataclass(frozen=True)
class TokenLayout:
    """Which sequence positions hold vision tokens and which hold text."""

    total: int
    vision: tuple[int, ...]
    text: tuple[int, ...]

    def __post_init__(self):
        v, t = self.vision, self.text
        if sorted(set(v) | set(t)) != list(range(self.total)) or set(v) & set(t):
            raise ValueError("vision and text indices must partition 0..N-1")
        if list(v) != sorted(v) or list(t) != sorted(t):
            raise ValueError("index lists must be strictly increasing")

    @property
    def num_vision(self) -> int:
        return len(self.vision)

    @property
    def num_text(self) -> int:
        return len(self.text)


@dataclass
class PruneDecision:
    """Per-vision-token keep (1) / drop (0) values.

    ``values`` is a {0,1} float array of shape (V,) or (B, V).  In training
    mode ``tensor`` carries the straight-through node with the same forward
    values, so masks built from the decision stay differentiable.
    """

    values: np.ndarray
    tensor: Tensor | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        bad = (self.values != 0.0) & (self.values != 1.0)
        if bad.any():
            raise ValueError("decision values must be exactly 0 or 1")

    @property
    def num_vision(self) -> int:
        return self.values.shape[-1]


def combine_decisions(prev: PruneDecision, new: PruneDecision) -> PruneDecision:
    """Elementwise product: a token dropped earlier can never return."""
    if prev.values.shape != new.values.shape:
        raise DimensionError(
            f"decision shapes disagree: {prev.values.shape} vs {new.values.shape}"
        )
    tensor = None
    if prev.tensor is not None and new.tensor is not None:
        tensor = nm.mul(prev.tensor, new.tensor)
    return PruneDecision(prev.values * new.values, tensor)


@dataclass(frozen=True)
class PruneSchedule:
    """Decision-module placement and cumulative keep-ratio targets.

    ``layers`` are 1-indexed decoder layers; a module runs after its layer.
    Ratios are fractions of the ORIGINAL vision-token count and must be
    strictly decreasing.
    """

    layers: tuple[int, ...]
    train_ratios: tuple[float, ...]
    infer_ratios: tuple[float, ...]

    def __post_init__(self):
        if len(self.layers) != len(self.train_ratios) or len(self.layers) != len(self.infer_ratios):
            raise ValueError("layers and ratio lists must have equal length")
        if list(self.layers) != sorted(set(self.layers)) or (self.layers and self.layers[0] < 1):
            raise ValueError("module layers must be strictly increasing and >= 1")
        for ratios in (self.train_ratios, self.infer_ratios):
            if any(not (0.0 < r <= 1.0) for r in ratios):
                raise ValueError("keep ratios must lie in (0, 1]")
            if any(a <= b for a, b in zip(ratios, ratios[1:])):
                raise ValueError("keep ratios must be strictly decreasing")

    @property
    def num_modules(self) -> int:
        return len(self.layers)


def kept_count(rho: float, num_vision: int) -> int:
    """floor(rho * V) clamped to at least one survivor."""
    if not (0.0 < rho <= 1.0):
        raise ValueError("keep ratio must lie in (0, 1]")
    return max(1, math.floor(rho * num_vision))


# ---------------------------------------------------------------------------
# decision module parameters


@dataclass
class CrossAttentionBlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
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
            "w_q", "w_k", "w_v", "w_out", "ln1_gain", "ln1_bias",
            "w_ffn1", "b_ffn1", "w_ffn2", "b_ffn2", "ln2_gain", "ln2_bias",
        )}


@dataclass
class DecisionModuleParams:
    """Weights of one inserted pruning module: cross-attention blocks + 2-way head."""

    blocks: list[CrossAttentionBlockParams]
    w_score: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_score.data.shape[0]
        if self.w_score.data.shape != (d, 2):
            raise ValueError("scoring head must map d -> 2")
        if d % self.heads != 0:
            raise ValueError("head count must divide the hidden width")

    @property
    def d(self) -> int:
        return self.w_score.data.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"{prefix}.block.{i}"))
        out[f"{prefix}.w_score"] = self.w_score
        return out

    def trainable(self) -> list[Tensor]:
        return [t for t in self.named("m").values()]


def init_decision_module(
    d: int, rng: SeededRng, blocks: int = 2, heads: int = 8
) -> DecisionModuleParams:
    """Random init; the scoring head starts at zero so p_keep begins at 0.5."""

    def proj(fan_in, shape):
        return Tensor(rng.normal(shape, scale=1.0 / math.sqrt(fan_in)), requires_grad=True)

    block_params = []
    for _ in range(blocks):
        block_params.append(CrossAttentionBlockParams(
            w_q=proj(d, (d, d)),
            w_k=proj(d, (d, d)),
            w_v=proj(d, (d, d)),
            w_out=proj(d, (d, d)),
            ln1_gain=Tensor(np.ones(d), requires_grad=True),
            ln1_bias=Tensor(np.zeros(d), requires_grad=True),
            w_ffn1=proj(d, (d, 2 * d)),
            b_ffn1=Tensor(np.zeros(2 * d), requires_grad=True),
            w_ffn2=proj(2 * d, (2 * d, d)),
            b_ffn2=Tensor(np.zeros(d), requires_grad=True),
            ln2_gain=Tensor(np.ones(d), requires_grad=True),
            ln2_bias=Tensor(np.zeros(d), requires_grad=True),
        ))
    return DecisionModuleParams(
        blocks=block_params,
        w_score=Tensor(np.zeros((d, 2)), requires_grad=True),
        heads=heads,
    )


# ---------------------------------------------------------------------------
# forward pieces


@dataclass
class KeepScores:
    """Raw keep/drop scores per vision token: column 0 keeps, column 1 drops."""

    gamma: Tensor

    @property
    def p_keep(self) -> np.ndarray:
        g = self.gamma.data
        shifted = g - g.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return (e / e.sum(axis=-1, keepdims=True))[..., 0]


def _check_layout(h: Tensor, layout: TokenLayout) -> None:
    if h.data.shape[-2] != layout.total:
        raise DimensionError(
            f"hidden state has {h.data.shape[-2]} rows, layout expects {layout.total}"
        )
    if layout.num_text == 0:
        raise NoTextTokensError("decision modules require at least one text token")


def project_qkv(
    h: Tensor, layout: TokenLayout, params: DecisionModuleParams, block: int
) -> tuple[Tensor, Tensor, Tensor]:
    """Queries from vision rows, keys/values from text rows."""
    _check_layout(h, layout)
    blk = params.blocks[block]
    vision_rows = nm.take(h, layout.vision, axis=-2)
    text_rows = nm.take(h, layout.text, axis=-2)
    return (
        nm.matmul(vision_rows, blk.w_q),
        nm.matmul(text_rows, blk.w_k),
        nm.matmul(text_rows, blk.w_v),
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.data.shape
    return nm.transpose(
        nm.reshape(x, tuple(lead) + (n, heads, d // heads)),
        tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2),
    )


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, dh = x.data.shape
    merged = nm.transpose(
        x, tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    )
    return nm.reshape(merged, tuple(lead) + (n, heads * dh))


def _ffn(x: Tensor, blk: CrossAttentionBlockParams) -> Tensor:
    """[LayerNorm, Linear(d, 2d), SiLU, Linear(2d, d), LayerNorm]."""
    inner = nm.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
    inner = nm.add(nm.matmul(inner, blk.w_ffn1), blk.b_ffn1)
    inner = nm.matmul(nm.silu(inner), blk.w_ffn2)
    inner = nm.add(inner, blk.b_ffn2)
    return nm.layer_norm(inner, blk.ln2_gain, blk.ln2_bias)


def _block_forward(
    q_input: Tensor, text: Tensor, blk: CrossAttentionBlockParams, heads: int
) -> Tensor:
    d = q_input.data.shape[-1]
    dh = d // heads
    q = nm.matmul(q_input, blk.w_q)
    k = nm.matmul(text, blk.w_k)
    v = nm.matmul(text, blk.w_v)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), 1.0 / math.sqrt(dh))
    ctx = _merge_heads(nm.matmul(nm.row_softmax(scores), vh))
    attn_out = nm.add(nm.matmul(ctx, blk.w_out), q)
    return nm.add(attn_out, _ffn(attn_out, blk))


def cross_attention_block(
    h: Tensor, layout: TokenLayout, params: DecisionModuleParams, block: int
) -> Tensor:
    """One block applied to the sequence: vision rows query text rows."""
    _check_layout(h, layout)
    vision_rows = nm.take(h, layout.vision, axis=-2)
    text_rows = nm.take(h, layout.text, axis=-2)
    return _block_forward(vision_rows, text_rows, params.blocks[block], params.heads)


def decision_module_forward(
    h: Tensor, layout: TokenLayout, params: DecisionModuleParams
) -> KeepScores:
    """Sequential blocks (queries chained, keys/values from the same text rows),
    then the 2-way scoring head on the final block output."""
    _check_layout(h, layout)
    x = nm.take(h, layout.vision, axis=-2)
    text_rows = nm.take(h, layout.text, axis=-2)
    for blk in params.blocks:
        x = _block_forward(x, text_rows, blk, params.heads)
    return KeepScores(gamma=nm.matmul(x, params.w_score))


def gumbel_decision(
    scores: KeepScores,
    tau: float,
    rng: SeededRng | None = None,
    mode: str = "train",
) -> PruneDecision:
    """Turn keep/drop scores into a {0,1} decision per vision token.

    train: Gumbel noise + temperature softmax, hard forward via row argmax,
    straight-through gradient through the soft relaxation.  eval: noiseless
    argmax of the raw scores.  soft: the relaxation itself as the forward
    value (for gradient checking against finite differences).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    gamma = scores.gamma
    if mode == "eval":
        values = (gamma.data[..., 0] >= gamma.data[..., 1]).astype(np.float64)
        return PruneDecision(values)
    if rng is None:
        raise ValueError("train/soft modes need an rng for the Gumbel draws")
    noise = nm.sample_gumbel(gamma.data.shape, rng)
    soft = nm.row_softmax(nm.scale(nm.add(gamma, noise), 1.0 / tau))
    if mode == "soft":
        keep = nm.reshape(nm.slice_last(soft, 0, 1), soft.data.shape[:-1])
        hard_values = (soft.data[..., 0] >= soft.data[..., 1]).astype(np.float64)
        return PruneDecision(hard_values, keep)
    if mode != "train":
        raise ValueError(f"unknown mode: {mode!r}")
    hard = nm.hard_one_hot_st(soft)
    keep = nm.reshape(nm.slice_last(hard, 0, 1), hard.data.shape[:-1])
    return PruneDecision(keep.data.copy(), keep)


def build_attention_mask(decision: PruneDecision, layout: TokenLayout) -> Tensor:
    """Keep/drop mask over the full sequence.

    M[i][j] = 1 when i == j or j is a text position; otherwise M[i][j] is the
    decision value of vision token j.  Differentiable in the decision when
    the decision carries a tensor.
    """
    n, v = layout.total, layout.num_vision
    if decision.values.shape[-1] != v:
        raise DimensionError("decision length must equal the vision-token count")
    base = np.zeros((n, n))
    base[np.arange(n), np.arange(n)] = 1.0
    base[:, list(layout.text)] = 1.0
    scatter = np.zeros((v, n))
    scatter[np.arange(v), list(layout.vision)] = 1.0

    d = decision.tensor if decision.tensor is not None else Tensor(decision.values)
    batched = d.data.ndim == 2
    row = nm.matmul(nm.reshape(d, (-1, v)), scatter)  # (B, N): decision at vision cols
    row = nm.reshape(row, (d.data.shape[0], 1, n) if batched else (1, n))
    return nm.add(base, nm.mul(1.0 - base, row))


def select_top_k(
    scores: KeepScores,
    rho_hat: float,
    layout: TokenLayout,
    surviving: PruneDecision,
) -> list[int]:
    """Indices (within the original vision ordering) of the k highest keep
    scores among currently surviving tokens, k = floor(rho_hat * V_original).

    Ties break toward the smaller original index; the result is returned in
    ascending index order so downstream gathers preserve relative order.
    """
    v = layout.num_vision
    p = scores.p_keep
    if p.ndim != 1 or p.shape[0] != v or surviving.values.shape != (v,):
        raise DimensionError("select_top_k expects per-token scores for one sample")
    k = kept_count(rho_hat, v)
    alive = [i for i in range(v) if surviving.values[i] == 1.0]
    if k > len(alive):
        raise ScheduleInfeasibleError(
            f"stage needs {k} survivors but only {len(alive)} tokens remain"
        )
    ranked = sorted(alive, key=lambda i: (-p[i], i))
    return sorted(ranked[:k])


def reindex_positions(
    original_positions: list[int] | np.ndarray,
    kept_vision_indices: list[int],
    layout: TokenLayout,
) -> list[int]:
    """Original position indices of the pruned sequence: kept vision rows
    first (original order), then all text rows, positions unchanged."""
    pos = list(original_positions)
    kept = [pos[layout.vision[i]] for i in kept_vision_indices]
    return kept + [pos[t] for t in layout.text]
