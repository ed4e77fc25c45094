"""Analytic FLOPs accounting for a vision-language pipeline under pruning.

Counts matrix-multiply work only (2 FLOPs per multiply-accumulate);
vocabulary head, embedding lookups and elementwise work (norms,
activations, residuals, rotary) are excluded as sub-1% contributors.
Per-layer decoder costs use the token count in force for that layer
segment; decision-module costs use the surviving query count at each
stage, matching the executable inference path.  The reported module
overhead is the cost at full retention (every stage scoring all original
vision tokens), which is exactly what an all-ones keep-ratio pipeline
adds over the baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .pruning import kept_count


class InfeasibleScheduleError(ValueError):
    """The requested schedule cannot be costed."""


@dataclass(frozen=True)
class DecoderSpec:
    layers: int
    d: int
    heads: int
    ffn: int
    ffn_kind: str = "gated"  # gated: 3 matrices; plain: 2
    vocab: int = 32000

    def __post_init__(self):
        if min(self.layers, self.d, self.heads, self.ffn, self.vocab) <= 0:
            raise ValueError("decoder dimensions must be positive")
        if self.ffn_kind not in ("gated", "plain"):
            raise ValueError("ffn_kind must be 'gated' or 'plain'")


@dataclass(frozen=True)
class VisionEncoderSpec:
    layers: int
    d: int
    ffn: int
    tokens: int

    def __post_init__(self):
        if self.layers < 0 or min(self.d, self.ffn, self.tokens) <= 0:
            raise ValueError("vision encoder dimensions must be positive")


@dataclass(frozen=True)
class ConnectorSpec:
    widths: tuple[int, ...]  # consecutive linear layer widths, input first

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError("connector needs at least input and output widths")


@dataclass(frozen=True)
class DecisionModuleSpec:
    blocks: int = 2
    heads: int = 8

    def __post_init__(self):
        if self.blocks <= 0 or self.heads <= 0:
            raise ValueError("decision module shape must be positive")


@dataclass(frozen=True)
class ArchitectureSpec:
    decoder: DecoderSpec
    vision_encoder: VisionEncoderSpec
    connector: ConnectorSpec
    decision_module: DecisionModuleSpec = DecisionModuleSpec()


@dataclass(frozen=True)
class InputSpec:
    vision_tokens: int
    text_tokens: int

    def __post_init__(self):
        if self.vision_tokens < 1 or self.text_tokens < 1:
            raise ValueError("pipeline accounting needs at least one token of each kind")


@dataclass
class CostReport:
    """Per-stage FLOPs breakdown, totals, and the reduction vs baseline."""

    vision_encoder: float
    connector: float
    decoder_layers: list[float]
    decision_modules: list[float]
    baseline: float
    module_overhead_full: float
    tokens_per_layer: list[int]

    @property
    def decoder_total(self) -> float:
        return sum(self.decoder_layers)

    @property
    def modules_total(self) -> float:
        return sum(self.decision_modules)

    @property
    def total(self) -> float:
        return self.vision_encoder + self.connector + self.decoder_total + self.modules_total

    @property
    def reduction(self) -> float:
        return (self.baseline - self.total) / self.baseline

    def as_dict(self) -> dict:
        return {
            "vision_encoder_flops": self.vision_encoder,
            "connector_flops": self.connector,
            "decoder_flops": self.decoder_total,
            "decision_module_flops": self.modules_total,
            "decision_module_per_stage": list(self.decision_modules),
            "total_flops": self.total,
            "total_tflops": self.total / 1e12,
            "baseline_flops": self.baseline,
            "baseline_tflops": self.baseline / 1e12,
            "reduction_percent": 100.0 * self.reduction,
            "module_overhead_full_flops": self.module_overhead_full,
            "module_overhead_full_tflops": self.module_overhead_full / 1e12,
            "tokens_per_layer": list(self.tokens_per_layer),
        }


def decoder_layer_flops(tokens: int, spec: DecoderSpec) -> float:
    """One decoder layer on ``tokens`` positions.

    MACs: QKV + output projections 4*n*d^2, attention score and value
    products 2*n^2*d, FFN 3*n*d*ffn (gated) or 2*n*d*ffn (plain).
    """
    if tokens < 1:
        raise ValueError("token count must be at least 1")
    n, d = tokens, spec.d
    ffn_mats = 3 if spec.ffn_kind == "gated" else 2
    macs = 4 * n * d * d + 2 * n * n * d + ffn_mats * n * d * spec.ffn
    return 2.0 * macs


def vision_encoder_flops(spec: VisionEncoderSpec) -> float:
    """Standard (plain-FFN) transformer encoder over its own token count."""
    n, d = spec.tokens, spec.d
    macs = 4 * n * d * d + 2 * n * n * d + 2 * n * d * spec.ffn
    return 2.0 * macs * spec.layers


def connector_flops(spec: ConnectorSpec, tokens: int) -> float:
    macs = tokens * sum(a * b for a, b in zip(spec.widths, spec.widths[1:]))
    return 2.0 * macs


def decision_module_flops(
    vision_queries: int, text_kv: int, d: int, spec: DecisionModuleSpec
) -> float:
    """One inserted module scoring ``vision_queries`` tokens against text.

    Per block MACs: Q projection q*d^2, K/V projections 2*t*d^2, attention
    2*q*t*d, output projection q*d^2, FFN 2*q*d*2d; plus the q*d*2 scoring
    head once.
    """
    if vision_queries < 1 or text_kv < 1:
        raise ValueError("query and key/value counts must be at least 1")
    q, t = vision_queries, text_kv
    block_macs = q * d * d + 2 * t * d * d + 2 * q * t * d + q * d * d + 2 * q * d * (2 * d)
    return 2.0 * (spec.blocks * block_macs + q * d * 2)


def _validate_ratios(ratios) -> list[float]:
    ratios = [float(r) for r in ratios]
    if any(not (0.0 < r <= 1.0) for r in ratios):
        raise InfeasibleScheduleError("keep ratios must lie in (0, 1]")
    if any(a < b for a, b in zip(ratios, ratios[1:])):
        raise InfeasibleScheduleError("keep ratios must be nonincreasing")
    return ratios


def pipeline_flops(
    arch: ArchitectureSpec,
    input_spec: InputSpec,
    module_layers=None,
    ratios=None,
) -> CostReport:
    """Full-pipeline cost: vision encoder + connector once, decoder layers at
    the token count in force per segment, decision modules at surviving
    query counts.  Without a schedule this is the baseline."""
    dec = arch.decoder
    v, t = input_spec.vision_tokens, input_spec.text_tokens
    if module_layers is None:
        module_layers = []
    module_layers = [int(l) for l in module_layers]
    if module_layers and (module_layers != sorted(set(module_layers)) or module_layers[0] < 1
                          or module_layers[-1] > dec.layers):
        raise InfeasibleScheduleError("module layers must be increasing and within depth")
    if ratios is None:
        ratios = []
    ratios = _validate_ratios(ratios)
    if len(ratios) != len(module_layers):
        raise InfeasibleScheduleError("one keep ratio per module layer required")

    survivors = [kept_count(r, v) for r in ratios]
    tokens_per_layer = []
    current = v + t
    stage = 0
    layer_costs = []
    module_costs = []
    for layer in range(1, dec.layers + 1):
        tokens_per_layer.append(current)
        layer_costs.append(decoder_layer_flops(current, dec))
        if stage < len(module_layers) and layer == module_layers[stage]:
            queries = current - t
            module_costs.append(
                decision_module_flops(queries, t, dec.d, arch.decision_module)
            )
            current = survivors[stage] + t
            stage += 1

    baseline = (
        vision_encoder_flops(arch.vision_encoder)
        + connector_flops(arch.connector, v)
        + sum(decoder_layer_flops(v + t, dec) for _ in range(dec.layers))
    )
    overhead_full = sum(
        decision_module_flops(v, t, dec.d, arch.decision_module) for _ in module_layers
    )
    return CostReport(
        vision_encoder=vision_encoder_flops(arch.vision_encoder),
        connector=connector_flops(arch.connector, v),
        decoder_layers=layer_costs,
        decision_modules=module_costs,
        baseline=baseline,
        module_overhead_full=overhead_full,
        tokens_per_layer=tokens_per_layer,
    )


def ratio_triple(rho: float) -> list[float]:
    """The progressive schedule [rho, rho-0.2, rho-0.4]."""
    return [rho, rho - 0.2, rho - 0.4]


def reduction_sweep(
    arch: ArchitectureSpec,
    input_spec: InputSpec,
    module_layers,
    rho_start: float,
    rho_stop: float,
    step: float,
) -> tuple[list[tuple[float, float]], list[float]]:
    """(rho, total TFLOPs) points over an inclusive rho range.

    Points where rho - 0.4 would be nonpositive are skipped and reported
    in the second return value.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    points = []
    skipped = []
    n = int(round((rho_stop - rho_start) / step))
    for i in range(n + 1):
        rho = round(rho_start + i * step, 10)
        if rho - 0.4 <= 0.0:
            skipped.append(rho)
            continue
        report = pipeline_flops(arch, input_spec, module_layers, ratio_triple(rho))
        points.append((rho, report.total / 1e12))
    return points, skipped


def llava_7b_architecture() -> ArchitectureSpec:
    """Constants of the reference 7B-class pipeline (for tests and docs);
    production entry points read them from the config file instead."""
    return ArchitectureSpec(
        decoder=DecoderSpec(layers=32, d=4096, heads=32, ffn=11008, ffn_kind="gated"),
        vision_encoder=VisionEncoderSpec(layers=24, d=1024, ffn=4096, tokens=577),
        connector=ConnectorSpec(widths=(1024, 4096, 4096)),
        decision_module=DecisionModuleSpec(blocks=2, heads=8),
    )
