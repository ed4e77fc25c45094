"""Losses, schedules, synthetic data, and the frozen-backbone training loop.

Phase A pretrains the toy backbone on the synthetic task with no pruning;
phase B freezes it and trains only the inserted decision modules against
the weighted sum of the causal LM loss (through the attention masks) and
the keep-ratio loss on cumulative decisions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import SeededRng, Tensor
from .model import (
    BackboneParams,
    ForwardTrace,
    ToyMllmConfig,
    forward_infer,
    forward_train,
)
from .pruning import DecisionModuleParams, PruneSchedule


class DegenerateLossError(ValueError):
    """The loss has nothing to average over."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossConfig:
    lambda_causal: float = 1.0
    lambda_ratio: float = 2.0
    ratio_kind: str = "mse"  # or "huber"
    huber_beta: float = 0.5

    def __post_init__(self):
        if self.lambda_causal < 0 or self.lambda_ratio < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_causal == 0 and self.lambda_ratio == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.ratio_kind not in ("mse", "huber"):
            raise ValueError("ratio_kind must be 'mse' or 'huber'")


def causal_lm_loss(logits: Tensor, targets: np.ndarray, positions) -> Tensor:
    """Mean next-token cross-entropy over the given loss positions.

    logits: (B, N, vocab); targets: (B, N) ids aligned so that the id at a
    loss position is what that position should predict.
    """
    positions = tuple(positions)
    if not positions:
        raise DegenerateLossError("empty loss-position set")
    picked = nm.take(logits, positions, axis=-2)
    t = np.asarray(targets, dtype=np.intp)[:, positions]
    return nm.cross_entropy_mean(picked, t)


def ratio_loss(
    fractions: list, targets, kind: str = "mse", beta: float = 0.5
) -> Tensor:
    """Mean penalty between realized CUMULATIVE keep fractions and targets.

    ``fractions`` holds one entry per module: a scalar for a single sample,
    or a per-sample vector for a batch (the penalty is then averaged over
    the batch, keeping the per-sample form of the objective).  The default
    penalty is squared error; the huber variant switches to a linear tail
    beyond ``beta``.
    """
    targets = list(targets)
    if len(fractions) != len(targets):
        raise nm.DimensionError("one realized fraction per target required")
    total: Tensor | None = None
    for frac, rho in zip(fractions, targets):
        diff = nm.sub(rho, nm.as_tensor(frac))
        term = nm.huber(diff, beta) if kind == "huber" else nm.mul(diff, diff)
        term = nm.mean_all(term)
        total = term if total is None else nm.add(total, term)
    return nm.scale(total, 1.0 / len(targets))


def total_loss(causal: Tensor, ratio: Tensor, cfg: LossConfig) -> Tensor:
    return nm.add(
        nm.scale(nm.as_tensor(causal), cfg.lambda_causal),
        nm.scale(nm.as_tensor(ratio), cfg.lambda_ratio),
    )


# ---------------------------------------------------------------------------
# optimizer schedule


@dataclass(frozen=True)
class OptimizerConfig:
    rule: str = "sgd"  # or "adam"
    lr: float = 2e-6
    warmup_ratio: float = 0.03
    steps: int = 1000
    max_grad_norm: float = 1.0
    weight_decay: float = 0.0
    batch_size: int = 64

    def __post_init__(self):
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ValueError("warmup ratio must lie in [0, 1)")
        if self.max_grad_norm <= 0:
            raise ValueError("max gradient norm must be positive")
        if self.rule not in ("sgd", "adam"):
            raise ValueError("rule must be 'sgd' or 'adam'")


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero at the last step.

    With warmup_ratio = 0 the schedule starts at the peak.
    """
    if not (0 <= step <= cfg.steps):
        raise ValueError("step outside [0, total steps]")
    warmup = math.floor(cfg.warmup_ratio * cfg.steps)
    if warmup > 0 and step < warmup:
        return cfg.lr * step / warmup
    span = max(1, cfg.steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm


class _Sgd:
    def __init__(self, params: list[Tensor], weight_decay: float = 0.0):
        self.params = params
        self.weight_decay = weight_decay

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        for p, g in zip(self.params, grads):
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * g


class _Adam:
    def __init__(
        self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0
    ):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def make_optimizer(rule: str, params: list[Tensor], weight_decay: float = 0.0):
    if rule == "adam":
        return _Adam(params, weight_decay=weight_decay)
    return _Sgd(params, weight_decay=weight_decay)


# ---------------------------------------------------------------------------
# synthetic multi-modal task

BOS_ID = 0
QUERY_BASE = 1  # query token for attribute a is QUERY_BASE + a
_PATCH_JITTER = 0.25


@dataclass(frozen=True)
class SyntheticSpec:
    """Key-matched retrieval task over image patches.

    With informative >= 2, each queried attribute is answered by
    indirection: an anchor patch carries a sample-specific key, and the
    class value sits on the patches whose key subspace matches it.
    Distractor patches carry the same structure under other keys, so the
    answer cannot be read without first resolving the anchor — the evidence
    has to stay in the vision tokens for more than one attention hop.
    With informative == 1 the single patch carries the class direction
    directly (plain saliency).
    """

    vision_tokens: int
    patch_dim: int
    classes: int
    informative: int
    samples: int
    attributes: int = 1
    keys: int = 4
    distractor_keys: int = 2
    signal_scale: float = 1.5  # structured-patch norm relative to noise norm

    def __post_init__(self):
        if self.informative < self.attributes:
            raise ValueError("need at least one informative patch per attribute")
        if self.attributes + self.keys + self.classes > self.patch_dim:
            raise ValueError("attributes + keys + classes must fit in patch_dim")
        if self.distractor_keys >= self.keys:
            raise ValueError("need at least one non-distractor key")
        if self.informative >= 2:
            if self.informative < 2 * self.attributes:
                raise ValueError("indirection needs anchor + value patch per attribute")
            if (self.informative - self.attributes) % self.attributes != 0:
                raise ValueError("informative patches must split evenly across attributes")
        if self.structured_patches > self.vision_tokens:
            raise ValueError("structured patches exceed the patch count")
        if self.signal_scale <= 0:
            raise ValueError("signal scale must be positive")

    @property
    def copies_per_attribute(self) -> int:
        return max(1, (self.informative - self.attributes) // self.attributes) \
            if self.informative > self.attributes else 0

    @property
    def structured_patches(self) -> int:
        if self.informative < 2:
            return self.informative + self.distractor_keys
        per_key = self.informative - self.attributes
        return self.informative + self.distractor_keys * max(1, per_key // self.attributes)

    @property
    def answer_base(self) -> int:
        return QUERY_BASE + self.attributes

    @property
    def vocab_needed(self) -> int:
        return self.answer_base + self.classes


@dataclass
class SyntheticSample:
    patches: np.ndarray  # (V, patch_dim)
    prompt_ids: np.ndarray  # (T,) = [BOS, QUERY_a]
    target_id: int
    informative_idx: tuple[int, ...]
    attribute_values: tuple[int, ...]


@dataclass(frozen=True)
class TaskDirections:
    """Orthonormal direction banks shared by every sample of a task seed."""

    anchors: np.ndarray  # (attributes, patch_dim)
    keys: np.ndarray  # (keys, patch_dim)
    values: np.ndarray  # (classes, patch_dim)


def class_directions(spec: SyntheticSpec, seed: int) -> TaskDirections:
    """Direction banks scaled so structured patches match the noise norm."""
    rng = SeededRng(seed, 17)
    raw = rng.normal((spec.patch_dim, spec.patch_dim))
    q, _ = np.linalg.qr(raw)
    scale = spec.signal_scale * math.sqrt(spec.patch_dim)
    a = spec.attributes
    return TaskDirections(
        anchors=q[:a] * scale,
        keys=q[a : a + spec.keys] * scale,
        values=q[a + spec.keys : a + spec.keys + spec.classes] * scale,
    )


def _structured_patch(*directions: np.ndarray) -> np.ndarray:
    return np.sum(directions, axis=0) / math.sqrt(len(directions))


def make_synthetic_dataset(
    spec: SyntheticSpec, seed: int, split: int = 0
) -> list[SyntheticSample]:
    """Deterministic dataset; directions depend only on the seed, so
    different ``split`` values draw disjoint samples of the SAME task.

    A rule that reads only the informative patches plus the prompt recovers
    every label; shuffling or resampling the remaining patches leaves it
    unchanged.
    """
    dirs = class_directions(spec, seed)
    rng = SeededRng(seed, 18).derive(split)
    samples = []
    for _ in range(spec.samples):
        patches = rng.normal((spec.vision_tokens, spec.patch_dim))
        slots = rng.choice(spec.vision_tokens, spec.structured_patches)
        cursor = 0

        def next_slots(count):
            nonlocal cursor
            out = slots[cursor : cursor + count]
            cursor += count
            return out

        values = tuple(int(v) for v in rng.integers(0, spec.classes, (spec.attributes,)))
        informative: list[int] = []
        queried = int(rng.integers(0, spec.attributes, ()))
        if spec.informative < 2:
            # direct task: the one informative patch carries the class value
            (slot,) = next_slots(1)
            patches[slot] = _structured_patch(dirs.values[values[queried]])
            informative.append(int(slot))
            copies = 1
        else:
            copies = spec.copies_per_attribute
            key_perm = rng.permutation(spec.keys)
            attr_keys = key_perm[: spec.attributes]
            for a in range(spec.attributes):
                (slot,) = next_slots(1)
                patches[slot] = _structured_patch(dirs.anchors[a], dirs.keys[attr_keys[a]])
                if a == queried:
                    informative.append(int(slot))
                for slot in next_slots(copies):
                    patches[slot] = _structured_patch(
                        dirs.keys[attr_keys[a]], dirs.values[values[a]]
                    )
                    if a == queried:
                        informative.append(int(slot))
        # distractors mirror the value-patch structure under unused keys
        if spec.informative >= 2 or spec.distractor_keys:
            free_keys = [k for k in range(spec.keys) if spec.informative < 2 or k not in key_perm[: spec.attributes]]
            d_keys = free_keys[: spec.distractor_keys]
            for k in d_keys:
                fake = int(rng.integers(0, spec.classes, ()))
                for slot in next_slots(copies if spec.informative >= 2 else 1):
                    patches[slot] = _structured_patch(dirs.keys[k], dirs.values[fake])
        patches += _PATCH_JITTER * rng.normal(patches.shape)
        samples.append(SyntheticSample(
            patches=patches,
            prompt_ids=np.array([BOS_ID, QUERY_BASE + queried], dtype=np.intp),
            target_id=spec.answer_base + values[queried],
            informative_idx=tuple(sorted(informative)),
            attribute_values=values,
        ))
    return samples


def _stack_batch(samples: list[SyntheticSample]):
    patches = np.stack([s.patches for s in samples])
    ids = np.stack([s.prompt_ids for s in samples])
    targets = np.array([s.target_id for s in samples], dtype=np.intp)
    return patches, ids, targets


def _answer_targets(ids: np.ndarray, targets: np.ndarray, num_vision: int):
    """Per-position target array with the answer id at the last position."""
    n = num_vision + ids.shape[1]
    full = np.zeros((ids.shape[0], n), dtype=np.intp)
    full[:, -1] = targets
    return full, (n - 1,)


# ---------------------------------------------------------------------------
# training loops


def _module_params(modules: list[DecisionModuleParams]) -> list[Tensor]:
    out: list[Tensor] = []
    for m in modules:
        out.extend(m.trainable())
    return out


def _run_updates(
    params: list[Tensor],
    loss_fn,
    opt_cfg: OptimizerConfig,
    on_step=None,
) -> None:
    """Generic loop: forward/backward, clip, schedule, update."""
    optimizer = make_optimizer(opt_cfg.rule, params, opt_cfg.weight_decay)
    for step in range(opt_cfg.steps):
        for p in params:
            p.grad = None
        loss, extras = loss_fn(step)
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        loss.backward()
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
        grads, _ = clip_grad_norm(grads, opt_cfg.max_grad_norm)
        optimizer.step(grads, lr_at(step, opt_cfg))
        if on_step is not None:
            on_step(step, value, extras)
    for p in params:
        p.grad = None


def pretrain_backbone(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    dataset: list[SyntheticSample],
    opt_cfg: OptimizerConfig,
    seed: int,
    metrics: list | None = None,
) -> None:
    """Phase A: causal-loss-only training of the full backbone, no pruning."""
    backbone.set_trainable(True)
    params = backbone.trainable()
    order_rng = SeededRng(seed, 21)
    steps_per_epoch = max(1, len(dataset) // opt_cfg.batch_size)

    def loss_fn(step):
        batch = _draw_batch(dataset, opt_cfg.batch_size, order_rng)
        patches, ids, targets = _stack_batch(batch)
        trace = forward_train(backbone, cfg, [], None, patches, ids)
        full, positions = _answer_targets(ids, targets, cfg.vision_tokens)
        return causal_lm_loss(trace.logits, full, positions), {}

    epoch_losses: list[float] = []

    def on_step(step, value, extras):
        epoch_losses.append(value)
        if metrics is not None and (step + 1) % steps_per_epoch == 0:
            metrics.append({
                "phase": "pretrain",
                "step": step + 1,
                "loss_causal": float(np.mean(epoch_losses)),
            })
            epoch_losses.clear()

    _run_updates(params, loss_fn, opt_cfg, on_step)


def _draw_batch(dataset, batch_size, rng: SeededRng):
    idx = rng.integers(0, len(dataset), (batch_size,))
    return [dataset[int(i)] for i in idx]


def train_decision_modules(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    modules: list[DecisionModuleParams],
    dataset: list[SyntheticSample],
    schedule: PruneSchedule,
    loss_cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    seed: int,
    tau: float = 1.0,
    eval_dataset: list[SyntheticSample] | None = None,
) -> list[dict]:
    """Phase B: frozen backbone, trainable decision modules.

    Per step: masked forward with Gumbel decisions, weighted causal + ratio
    loss, clipped gradients, scheduled update.  Returns one metrics record
    per epoch (losses, realized keep fractions, masked-forward accuracy on
    the eval split when given).
    """
    backbone.set_trainable(False)
    params = _module_params(modules)
    order_rng = SeededRng(seed, 22)
    noise_rng = SeededRng(seed, 23)
    steps_per_epoch = max(1, len(dataset) // opt_cfg.batch_size)
    metrics: list[dict] = []

    def loss_fn(step):
        batch = _draw_batch(dataset, opt_cfg.batch_size, order_rng)
        patches, ids, targets = _stack_batch(batch)
        trace = forward_train(
            backbone, cfg, modules, schedule, patches, ids,
            tau=tau, rng=noise_rng.derive(step), mode="train",
        )
        full, positions = _answer_targets(ids, targets, cfg.vision_tokens)
        closs = causal_lm_loss(trace.logits, full, positions)
        rloss = ratio_loss(
            trace.keep_fraction_tensors, schedule.train_ratios,
            loss_cfg.ratio_kind, loss_cfg.huber_beta,
        )
        loss = total_loss(closs, rloss, loss_cfg)
        return loss, {
            "loss_causal": float(closs.data),
            "loss_ratio": float(rloss.data),
            "keep_fractions": list(trace.keep_fractions),
        }

    epoch_acc: dict[str, list] = {"total": [], "causal": [], "ratio": [], "fracs": []}

    def on_step(step, value, extras):
        epoch_acc["total"].append(value)
        epoch_acc["causal"].append(extras["loss_causal"])
        epoch_acc["ratio"].append(extras["loss_ratio"])
        epoch_acc["fracs"].append(extras["keep_fractions"])
        if (step + 1) % steps_per_epoch == 0 or step + 1 == opt_cfg.steps:
            record = {
                "phase": "train",
                "step": step + 1,
                "loss_total": float(np.mean(epoch_acc["total"])),
                "loss_causal": float(np.mean(epoch_acc["causal"])),
                "loss_ratio": float(np.mean(epoch_acc["ratio"])),
                "keep_fractions": [float(x) for x in np.mean(epoch_acc["fracs"], axis=0)],
            }
            if eval_dataset is not None:
                record["accuracy_masked"] = evaluate_accuracy(
                    backbone, cfg, modules, eval_dataset, schedule, mode="masked"
                )
            metrics.append(record)
            for v in epoch_acc.values():
                v.clear()

    _run_updates(params, loss_fn, opt_cfg, on_step)
    return metrics


def evaluate_accuracy(
    backbone: BackboneParams,
    cfg: ToyMllmConfig,
    modules: list[DecisionModuleParams],
    dataset: list[SyntheticSample],
    schedule: PruneSchedule | None,
    mode: str = "none",
    rng: SeededRng | None = None,
    batch_size: int = 64,
) -> float:
    """Answer-position argmax accuracy under the requested forward mode.

    none: plain forward.  masked: noiseless decisions applied via masks.
    pruned: physical top-k removal at the schedule's inference ratios.
    random: pruned path with seeded uniform scores at matched survivor
    counts.
    """
    if mode not in ("none", "masked", "pruned", "random"):
        raise ValueError(f"unknown mode: {mode!r}")
    if mode == "random" and rng is None:
        rng = SeededRng(0, 99)
    correct = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start : start + batch_size]
        patches, ids, targets = _stack_batch(batch)
        if mode == "none" or schedule is None:
            trace = forward_train(backbone, cfg, [], None, patches, ids)
        elif mode == "masked":
            trace = forward_train(
                backbone, cfg, modules, schedule, patches, ids, mode="eval"
            )
        else:
            trace = forward_infer(
                backbone, cfg, modules, schedule, patches, ids,
                score_override_rng=rng if mode == "random" else None,
            )
        pred = trace.logits.data[:, -1, :].argmax(axis=-1)
        correct += int((pred == targets).sum())
    return correct / len(dataset)
