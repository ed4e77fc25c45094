"""Run configuration: a strict, round-trippable YAML document.

Unknown keys anywhere in the tree are errors, reported with their path.
Loading constructs the domain types directly, so every cross-field
invariant those types enforce is checked at load time.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import yaml

from .cost import (
    ArchitectureSpec,
    ConnectorSpec,
    DecisionModuleSpec,
    DecoderSpec,
    InputSpec,
    VisionEncoderSpec,
)
from .model import ToyMllmConfig
from .pruning import PruneSchedule
from .training import LossConfig, OptimizerConfig, SyntheticSpec


class ConfigError(ValueError):
    """A config file failed validation; the message names the field."""


@dataclass(frozen=True)
class ModulesConfig:
    blocks: int = 2
    heads: int = 8

    def __post_init__(self):
        if self.blocks < 1 or self.heads < 1:
            raise ValueError("blocks and heads must be positive")


@dataclass(frozen=True)
class CostConfig:
    arch: ArchitectureSpec
    input: InputSpec
    module_layers: tuple[int, ...]
    default_rho: float = 0.5


@dataclass(frozen=True)
class DataConfig:
    spec: SyntheticSpec
    eval_samples: int
    seed: int


@dataclass
class RunConfig:
    model: ToyMllmConfig
    schedule: PruneSchedule
    tau: float
    modules: ModulesConfig
    loss: LossConfig
    optimizer: OptimizerConfig  # phase B (decision modules)
    pretrain: OptimizerConfig  # phase A (backbone)
    data: DataConfig
    cost: CostConfig
    output_dir: str

    @property
    def seed(self) -> int:
        return self.data.seed

    def fingerprint(self) -> str:
        """Architecture fingerprint: model + schedule + module shape."""
        m, s, mod = self.model, self.schedule, self.modules
        text = "|".join(str(x) for x in (
            m.depth, m.d, m.heads, m.ffn, m.vocab, m.max_positions,
            m.vision_tokens, m.patch_dim, m.position_kind,
            s.layers, mod.blocks, mod.heads,
        ))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _take(mapping: dict, path: str, fields: dict, required=()):
    """Pop known keys with defaults; reject anything left over."""
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping")
    out = {}
    for key, default in fields.items():
        if key in mapping:
            out[key] = mapping.pop(key)
        elif key in required:
            raise ConfigError(f"{path}.{key}: missing required key")
        else:
            out[key] = default
    if mapping:
        raise ConfigError(f"{path}.{next(iter(mapping))}: unknown key")
    return out


def _build(cls, kwargs, path: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_optimizer(raw: dict, path: str) -> OptimizerConfig:
    kw = _take(raw, path, {
        "rule": "sgd", "lr": 2e-6, "warmup_ratio": 0.03, "steps": 1000,
        "max_grad_norm": 1.0, "weight_decay": 0.0, "batch_size": 64,
    })
    return _build(OptimizerConfig, kw, path)


def parse_config(doc: dict) -> RunConfig:
    doc = dict(doc)
    top = _take(doc, "config", {
        "model": {}, "schedule": {}, "modules": {}, "loss": {},
        "optimizer": {}, "pretrain": {}, "data": {}, "cost": {},
        "output": {},
    }, required=("model", "schedule", "data"))

    model = _build(ToyMllmConfig, _take(top["model"], "model", {
        "depth": 8, "d": 64, "heads": 4, "ffn": 256, "vocab": 64,
        "max_positions": 128, "vision_tokens": 16, "patch_dim": 16,
        "position_kind": "rotary",
    }), "model")

    sched_kw = _take(top["schedule"], "schedule", {
        "layers": None, "train_ratios": None, "infer_ratios": None, "tau": 1.0,
    }, required=("layers", "train_ratios"))
    tau = float(sched_kw.pop("tau"))
    if tau <= 0:
        raise ConfigError("schedule.tau: must be positive")
    if sched_kw["infer_ratios"] is None:
        sched_kw["infer_ratios"] = sched_kw["train_ratios"]
    schedule = _build(PruneSchedule, {
        "layers": tuple(sched_kw["layers"]),
        "train_ratios": tuple(float(r) for r in sched_kw["train_ratios"]),
        "infer_ratios": tuple(float(r) for r in sched_kw["infer_ratios"]),
    }, "schedule")
    if schedule.layers and schedule.layers[-1] > model.depth:
        raise ConfigError("schedule.layers: exceeds model depth")

    modules = _build(ModulesConfig, _take(top["modules"], "modules", {
        "blocks": 2, "heads": 8,
    }), "modules")
    if model.d % modules.heads != 0:
        raise ConfigError("modules.heads: must divide model.d")

    loss = _build(LossConfig, _take(top["loss"], "loss", {
        "lambda_causal": 1.0, "lambda_ratio": 2.0,
        "ratio_kind": "mse", "huber_beta": 0.5,
    }), "loss")

    optimizer = _parse_optimizer(top["optimizer"], "optimizer")
    pretrain = _parse_optimizer(top["pretrain"], "pretrain")

    data_kw = _take(top["data"], "data", {
        "classes": 8, "informative": 3, "attributes": 1, "keys": 4,
        "distractor_keys": 2, "signal_scale": 1.5,
        "train_samples": 4096, "eval_samples": 256, "seed": 1234,
    })
    spec = _build(SyntheticSpec, {
        "vision_tokens": model.vision_tokens,
        "patch_dim": model.patch_dim,
        "classes": data_kw["classes"],
        "informative": data_kw["informative"],
        "samples": data_kw["train_samples"],
        "attributes": data_kw["attributes"],
        "keys": data_kw["keys"],
        "distractor_keys": data_kw["distractor_keys"],
        "signal_scale": data_kw["signal_scale"],
    }, "data")
    if spec.vocab_needed > model.vocab:
        raise ConfigError("data: synthetic vocabulary exceeds model.vocab")
    data = DataConfig(spec=spec, eval_samples=int(data_kw["eval_samples"]),
                      seed=int(data_kw["seed"]))

    cost_kw = _take(top["cost"], "cost", {
        "decoder": {}, "vision_encoder": {}, "connector": {},
        "decision_module": {}, "input": {}, "module_layers": (1, 8, 16),
        "default_rho": 0.5,
    })
    decoder = _build(DecoderSpec, _take(cost_kw["decoder"], "cost.decoder", {
        "layers": 32, "d": 4096, "heads": 32, "ffn": 11008,
        "ffn_kind": "gated", "vocab": 32000,
    }), "cost.decoder")
    vision = _build(VisionEncoderSpec, _take(cost_kw["vision_encoder"], "cost.vision_encoder", {
        "layers": 24, "d": 1024, "ffn": 4096, "tokens": 577,
    }), "cost.vision_encoder")
    connector = _build(ConnectorSpec, {"widths": tuple(
        _take(cost_kw["connector"], "cost.connector", {"widths": (1024, 4096, 4096)})["widths"]
    )}, "cost.connector")
    dm = _build(DecisionModuleSpec, _take(cost_kw["decision_module"], "cost.decision_module", {
        "blocks": 2, "heads": 8,
    }), "cost.decision_module")
    cost_input = _build(InputSpec, _take(cost_kw["input"], "cost.input", {
        "vision_tokens": 576, "text_tokens": 30,
    }), "cost.input")
    cost = CostConfig(
        arch=ArchitectureSpec(decoder=decoder, vision_encoder=vision,
                              connector=connector, decision_module=dm),
        input=cost_input,
        module_layers=tuple(int(l) for l in cost_kw["module_layers"]),
        default_rho=float(cost_kw["default_rho"]),
    )

    out_kw = _take(top["output"], "output", {"dir": "runs/default"})
    return RunConfig(
        model=model, schedule=schedule, tau=tau, modules=modules, loss=loss,
        optimizer=optimizer, pretrain=pretrain, data=data, cost=cost,
        output_dir=str(out_kw["dir"]),
    )


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if doc is None:
        doc = {}
    return parse_config(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    m, s, mod, l, data = cfg.model, cfg.schedule, cfg.modules, cfg.loss, cfg.data
    dec, vis, conn, dm = (cfg.cost.arch.decoder, cfg.cost.arch.vision_encoder,
                          cfg.cost.arch.connector, cfg.cost.arch.decision_module)

    def opt_dict(o: OptimizerConfig) -> dict:
        return {"rule": o.rule, "lr": o.lr, "warmup_ratio": o.warmup_ratio,
                "steps": o.steps, "max_grad_norm": o.max_grad_norm,
                "weight_decay": o.weight_decay, "batch_size": o.batch_size}

    return {
        "model": {"depth": m.depth, "d": m.d, "heads": m.heads, "ffn": m.ffn,
                  "vocab": m.vocab, "max_positions": m.max_positions,
                  "vision_tokens": m.vision_tokens, "patch_dim": m.patch_dim,
                  "position_kind": m.position_kind},
        "schedule": {"layers": list(s.layers),
                     "train_ratios": list(s.train_ratios),
                     "infer_ratios": list(s.infer_ratios), "tau": cfg.tau},
        "modules": {"blocks": mod.blocks, "heads": mod.heads},
        "loss": {"lambda_causal": l.lambda_causal, "lambda_ratio": l.lambda_ratio,
                 "ratio_kind": l.ratio_kind, "huber_beta": l.huber_beta},
        "optimizer": opt_dict(cfg.optimizer),
        "pretrain": opt_dict(cfg.pretrain),
        "data": {"classes": data.spec.classes, "informative": data.spec.informative,
                 "attributes": data.spec.attributes, "keys": data.spec.keys,
                 "distractor_keys": data.spec.distractor_keys,
                 "signal_scale": data.spec.signal_scale,
                 "train_samples": data.spec.samples,
                 "eval_samples": data.eval_samples, "seed": data.seed},
        "cost": {
            "decoder": {"layers": dec.layers, "d": dec.d, "heads": dec.heads,
                        "ffn": dec.ffn, "ffn_kind": dec.ffn_kind, "vocab": dec.vocab},
            "vision_encoder": {"layers": vis.layers, "d": vis.d, "ffn": vis.ffn,
                               "tokens": vis.tokens},
            "connector": {"widths": list(conn.widths)},
            "decision_module": {"blocks": dm.blocks, "heads": dm.heads},
            "input": {"vision_tokens": cfg.cost.input.vision_tokens,
                      "text_tokens": cfg.cost.input.text_tokens},
            "module_layers": list(cfg.cost.module_layers),
            "default_rho": cfg.cost.default_rho,
        },
        "output": {"dir": cfg.output_dir},
    }


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
