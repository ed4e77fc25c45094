"""The invariant suite behind the verify command.

Each check is parameter-independent or runs on freshly seeded random
parameters, returns a measured value, and passes or fails against a fixed
threshold.  The CLI renders the results and exits nonzero on any failure.
"""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import SeededRng, Tensor
from .cost import DecoderSpec, decoder_layer_flops
from .model import (
    BackboneParams,
    ToyMllmConfig,
    causal_additive_mask,
    decoder_layer_forward,
    forward_train,
    init_backbone,
    verify_equivalence,
)
from .pruning import (
    DecisionModuleParams,
    KeepScores,
    PruneDecision,
    PruneSchedule,
    TokenLayout,
    build_attention_mask,
    combine_decisions,
    decision_module_forward,
    gumbel_decision,
    init_decision_module,
    kept_count,
    select_top_k,
)
from .reports import CheckResult
from .training import LossConfig, causal_lm_loss, ratio_loss, total_loss


def _random_layout(rng: SeededRng, max_total: int = 12) -> TokenLayout:
    total = int(rng.integers(3, max_total, ()))
    num_vision = int(rng.integers(1, total, ()))
    idx = sorted(int(i) for i in rng.choice(total, num_vision))
    text = tuple(i for i in range(total) if i not in idx)
    return TokenLayout(total, tuple(idx), text)


def check_mask_algebra(seed: int, trials: int = 50) -> CheckResult:
    """Mask structure: all-ones diagonal and text columns, no empty rows."""
    rng = SeededRng(seed, 301)
    failures = 0
    for _ in range(trials):
        layout = _random_layout(rng)
        decision = PruneDecision((rng.uniform((layout.num_vision,)) < 0.5).astype(float))
        m = build_attention_mask(decision, layout).data
        ok = np.all(np.diag(m) == 1.0)
        ok &= all(np.all(m[:, j] == 1.0) for j in layout.text)
        ok &= bool(np.all(m.sum(axis=1) >= 1.0))
        for i, vj in enumerate(layout.vision):
            col = np.delete(m[:, vj], vj)
            ok &= bool(np.all(col == decision.values[i]))
        failures += 0 if ok else 1
    return CheckResult("mask_algebra", failures == 0, float(failures), "0 failures")


def check_masked_softmax(seed: int, trials: int = 50) -> CheckResult:
    """Row normalization and exactly-zero masked entries of the masked softmax."""
    rng = SeededRng(seed, 302)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 9, ()))
        scores = Tensor(rng.normal((n, n), scale=3.0))
        mask = (rng.uniform((n, n)) < 0.6).astype(float)
        np.fill_diagonal(mask, 1.0)
        p = nm.masked_row_softmax(scores, Tensor(mask)).data
        worst = max(worst, float(np.abs(p.sum(axis=1) - 1.0).max()))
        if float(np.abs(p[mask == 0.0]).max() if (mask == 0).any() else 0.0) != 0.0:
            worst = max(worst, 1.0)
    return CheckResult("eq13_row_normalization", worst < 1e-12, worst, "< 1e-12")


def check_pruned_isolation(seed: int) -> CheckResult:
    """Perturbing a dropped token's hidden state leaves other rows bitwise
    unchanged through a masked decoder layer."""
    rng = SeededRng(seed, 303)
    cfg = ToyMllmConfig(depth=2, d=32, heads=4, ffn=64, vocab=16,
                        vision_tokens=6, patch_dim=8)
    backbone = init_backbone(cfg, rng)
    backbone.set_trainable(False)
    layout = TokenLayout(9, tuple(range(6)), (6, 7, 8))
    decision = PruneDecision(np.array([1.0, 0.0, 1.0, 0.0, 1.0, 1.0]))
    mask = build_attention_mask(decision, layout)
    positions = np.arange(9)
    causal = causal_additive_mask(positions)
    h = rng.normal((1, 9, cfg.d))
    out = decoder_layer_forward(backbone.layers[0], cfg, Tensor(h), positions, causal, mask).data
    worst = 0.0
    for dead in (1, 3):
        for scale in (1.0, 1e3):
            perturbed = h.copy()
            perturbed[0, dead] += rng.normal((cfg.d,), scale=scale)
            out2 = decoder_layer_forward(
                backbone.layers[0], cfg, Tensor(perturbed), positions, causal, mask
            ).data
            others = [i for i in range(9) if i != dead]
            worst = max(worst, float(np.abs(out[0, others] - out2[0, others]).max()))
    return CheckResult("pruned_token_isolation", worst == 0.0, worst, "bitwise 0")


def check_monotone_pruning(seed: int, trials: int = 100) -> CheckResult:
    """Cumulative decisions never resurrect a dropped token."""
    rng = SeededRng(seed, 304)
    failures = 0
    for _ in range(trials):
        v = int(rng.integers(2, 20, ()))
        cumulative = PruneDecision(np.ones(v))
        for _ in range(int(rng.integers(1, 5, ()))):
            new = PruneDecision((rng.uniform((v,)) < 0.7).astype(float))
            updated = combine_decisions(cumulative, new)
            if np.any(updated.values > cumulative.values):
                failures += 1
            cumulative = updated
    return CheckResult("monotone_pruning", failures == 0, float(failures), "0 failures")


def check_count_contract(seed: int, trials: int = 100) -> CheckResult:
    """select_top_k keeps exactly floor(rho_s * V) tokens at every stage."""
    rng = SeededRng(seed, 305)
    failures = 0
    for _ in range(trials):
        v = int(rng.integers(4, 40, ()))
        stages = int(rng.integers(1, 4, ()))
        ratios = sorted((float(r) for r in rng.uniform((stages,)) * (1.0 - 1.0 / v) + 1.0 / v),
                        reverse=True)
        layout = TokenLayout(v + 1, tuple(range(v)), (v,))
        surviving = PruneDecision(np.ones(v))
        for rho in ratios:
            gamma = rng.normal((v, 2))
            kept = select_top_k(KeepScores(Tensor(gamma)), rho, layout, surviving)
            if len(kept) != kept_count(rho, v) or any(surviving.values[i] != 1.0 for i in kept):
                failures += 1
                break
            values = np.zeros(v)
            values[kept] = 1.0
            surviving = PruneDecision(values)
    return CheckResult("count_contract", failures == 0, float(failures), "0 failures")


def check_equivalence(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    modules: list[DecisionModuleParams],
    schedule: PruneSchedule,
    tau: float,
    seed: int,
    trials: int = 10,
) -> CheckResult:
    """Masked vs physically pruned forward agreement at surviving positions."""
    rng = SeededRng(seed, 306)
    worst = 0.0
    for trial in range(trials):
        patches = rng.normal((1, cfg.vision_tokens, cfg.patch_dim))
        text = rng.integers(0, cfg.vocab, (1, int(rng.integers(1, 5, ())) + 1))
        report = verify_equivalence(
            backbone, cfg, modules, schedule, patches, text, tau=tau, seed=seed + trial
        )
        worst = max(worst, report["max_abs_deviation"])
    return CheckResult("masked_pruned_equivalence", worst < 1e-9, worst, "< 1e-9")


def check_gradients(seed: int) -> CheckResult:
    """Finite-difference check of the total loss over every decision-module
    parameter at tiny dimensions (soft relaxation path)."""
    value = gradient_check_value(seed)
    return CheckResult("gradient_check", value < 1e-4, value, "< 1e-4")


def gradient_check_value(
    seed: int, d: int = 16, vision: int = 6, text: int = 2, h: float = 1e-5
) -> float:
    rng = SeededRng(seed, 307)
    cfg = ToyMllmConfig(depth=2, d=d, heads=2, ffn=2 * d, vocab=16,
                        vision_tokens=vision, patch_dim=8)
    backbone = init_backbone(cfg, rng)
    backbone.set_trainable(False)
    module = init_decision_module(cfg.d, rng.derive(1), blocks=2, heads=2)
    module.w_score.data[:] = rng.normal((d, 2), scale=0.3)
    schedule = PruneSchedule((1,), (0.5,), (0.5,))
    patches = rng.normal((1, vision, cfg.patch_dim))
    ids = rng.integers(0, cfg.vocab, (1, text))
    targets = np.zeros((1, vision + text), dtype=np.intp)
    targets[0, -1] = int(rng.integers(0, cfg.vocab, ()))
    loss_cfg = LossConfig(1.0, 2.0)

    def loss_fn():
        trace = forward_train(
            backbone, cfg, [module], schedule, patches, ids,
            tau=1.0, rng=SeededRng(seed, 12345), mode="soft",
        )
        closs = causal_lm_loss(trace.logits, targets, (vision + text - 1,))
        rloss = ratio_loss(trace.keep_fraction_tensors, schedule.train_ratios)
        return total_loss(closs, rloss, loss_cfg)

    return nm.finite_diff_check(loss_fn, module.trainable(), h=h)


def check_gumbel(seed: int) -> CheckResult:
    """Determinism, location (Euler-Mascheroni mean), and the 0.5 keep rate
    on symmetric scores."""
    a = nm.sample_gumbel((1000,), SeededRng(seed, 308))
    b = nm.sample_gumbel((1000,), SeededRng(seed, 308))
    deterministic = bool(np.array_equal(a, b))
    draws = nm.sample_gumbel((1_000_000,), SeededRng(seed, 309))
    mean_err = abs(float(draws.mean()) - 0.5772156649)
    scores = KeepScores(Tensor(np.zeros((100_000, 2))))
    decision = gumbel_decision(scores, 1.0, SeededRng(seed, 310), mode="train")
    rate_err = abs(float(decision.values.mean()) - 0.5)
    value = max(mean_err, rate_err, 0.0 if deterministic else 1.0)
    return CheckResult("gumbel_properties", deterministic and value < 0.01, value, "< 0.01")


def check_cost_agreement(seed: int) -> CheckResult:
    """Analytic decoder-layer FLOPs vs the matmul instruction counter."""
    rng = SeededRng(seed, 311)
    cfg = ToyMllmConfig()
    backbone = init_backbone(cfg, rng)
    backbone.set_trainable(False)
    n = cfg.vision_tokens + 4
    h = Tensor(rng.normal((1, n, cfg.d)))
    positions = np.arange(n)
    causal = causal_additive_mask(positions)
    with nm.matmul_flop_counter() as counter:
        decoder_layer_forward(backbone.layers[0], cfg, h, positions, causal)
    analytic = decoder_layer_flops(
        n, DecoderSpec(layers=cfg.depth, d=cfg.d, heads=cfg.heads,
                       ffn=cfg.ffn, ffn_kind="plain", vocab=cfg.vocab)
    )
    rel = abs(counter.flops - analytic) / analytic
    return CheckResult("cost_instruction_agreement", rel < 0.02, rel, "< 2%")


def run_all_checks(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    modules: list[DecisionModuleParams],
    schedule: PruneSchedule,
    tau: float,
    seed: int,
) -> list[CheckResult]:
    return [
        check_mask_algebra(seed),
        check_masked_softmax(seed),
        check_pruned_isolation(seed),
        check_monotone_pruning(seed),
        check_count_contract(seed),
        check_equivalence(backbone, cfg, modules, schedule, tau, seed),
        check_gradients(seed),
        check_gumbel(seed),
        check_cost_agreement(seed),
    ]
