"""Command-line entry point: flops, train, verify, eval.

Exit codes: 0 success, 1 check failure (or training divergence), 2 invalid
input.  Every command is deterministic given the config and seed; reports
go to stdout as tables and to the output directory as JSONL records.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .cost import InfeasibleScheduleError, pipeline_flops, ratio_triple, reduction_sweep
from .model import BackboneParams, ToyMllmConfig, init_backbone
from .numerics import SeededRng
from .pruning import (
    DecisionModuleParams,
    PruneSchedule,
    ScheduleInfeasibleError,
    init_decision_module,
)
from .reports import CheckResult, read_records, record_line, render_table, write_records
from .training import (
    DivergenceError,
    evaluate_accuracy,
    make_synthetic_dataset,
    pretrain_backbone,
    train_decision_modules,
)
from .verify import run_all_checks


def build_model(cfg: RunConfig) -> tuple[BackboneParams, list[DecisionModuleParams]]:
    """Seed-derived random initialization of backbone and decision modules."""
    rng = SeededRng(cfg.seed, 1)
    backbone = init_backbone(cfg.model, rng.derive(0))
    modules = [
        init_decision_module(cfg.model.d, rng.derive(1, i),
                             blocks=cfg.modules.blocks, heads=cfg.modules.heads)
        for i in range(cfg.schedule.num_modules)
    ]
    return backbone, modules


def named_tensors(backbone: BackboneParams, modules: list[DecisionModuleParams]):
    out = dict(backbone.named())
    for i, module in enumerate(modules):
        out.update(module.named(f"module.{i}"))
    return out


def apply_tensors(backbone, modules, tensors: dict) -> None:
    target = named_tensors(backbone, modules)
    missing = set(target) - set(tensors)
    extra = set(tensors) - set(target)
    if missing or extra:
        raise CheckpointError(
            f"tensor names disagree with the architecture "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})"
        )
    for name, tensor in target.items():
        if tensor.data.shape != tensors[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        tensor.data[:] = tensors[name]


def _datasets(cfg: RunConfig):
    train = make_synthetic_dataset(cfg.data.spec, cfg.seed, split=0)
    eval_spec = type(cfg.data.spec)(**{
        **cfg.data.spec.__dict__, "samples": cfg.data.eval_samples
    })
    held_out = make_synthetic_dataset(eval_spec, cfg.seed, split=1)
    return train, held_out


# ---------------------------------------------------------------------------
# commands


def cmd_flops(cfg: RunConfig, args) -> int:
    arch, inp = cfg.cost.arch, cfg.cost.input
    layers = list(cfg.cost.module_layers)
    records = []
    rows = []

    def add_row(label, report):
        rows.append([
            label, report.vision_encoder / 1e12, report.connector / 1e12,
            report.decoder_total / 1e12, report.modules_total / 1e12,
            report.total / 1e12, 100.0 * report.reduction,
        ])
        for metric, value in report.as_dict().items():
            records.append(record_line("flops", label, metric, value))

    baseline = pipeline_flops(arch, inp)
    if args.sweep:
        start, stop, step = (float(x) for x in args.sweep.split(":"))
        points, skipped = reduction_sweep(arch, inp, layers, start, stop, step)
        for rho, _ in points:
            add_row(f"rho={rho:g}", pipeline_flops(arch, inp, layers, ratio_triple(rho)))
        for rho in skipped:
            print(f"note: rho={rho:g} infeasible (rho - 0.4 <= 0), skipped")
    elif args.baseline:
        add_row("baseline", baseline)
    else:
        add_row("baseline", baseline)
        rho = args.rho if args.rho is not None else cfg.cost.default_rho
        add_row(f"rho={rho:g}", pipeline_flops(arch, inp, layers, ratio_triple(rho)))

    print(render_table(
        ["setting", "vision TF", "connector TF", "decoder TF", "modules TF",
         "total TF", "reduction %"],
        rows,
    ))
    if cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        write_records(os.path.join(cfg.output_dir, "flops.jsonl"), records)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    backbone, modules = build_model(cfg)
    train_ds, eval_ds = _datasets(cfg)
    metrics: list[dict] = []

    backbone_path = os.path.join(cfg.output_dir, "backbone.lvpr")
    if os.path.exists(backbone_path):
        _, tensors, _ = load_checkpoint(backbone_path, cfg.fingerprint())
        apply_tensors(backbone, [], tensors)
        print(f"loaded pretrained backbone from {backbone_path}")
    else:
        print(f"phase A: pretraining backbone ({cfg.pretrain.steps} steps)")
        pretrain_backbone(backbone, cfg.model, train_ds, cfg.pretrain, cfg.seed, metrics)
        save_checkpoint(backbone_path, cfg.fingerprint(),
                        {k: t.data for k, t in backbone.named().items()})

    print(f"phase B: training decision modules ({cfg.optimizer.steps} steps)")
    metrics += train_decision_modules(
        backbone, cfg.model, modules, train_ds, cfg.schedule, cfg.loss,
        cfg.optimizer, cfg.seed, tau=cfg.tau, eval_dataset=eval_ds,
    )

    tensors = {k: t.data for k, t in named_tensors(backbone, modules).items()}
    ckpt_path = os.path.join(cfg.output_dir, "checkpoint.lvpr")
    save_checkpoint(ckpt_path, cfg.fingerprint(), tensors,
                    rng_state={"seed": cfg.seed, "stream": 0})

    lines = []
    for m in metrics:
        step = m["step"]
        phase = m["phase"]
        for key, value in m.items():
            if key in ("step", "phase"):
                continue
            lines.append(record_line("train", step, key, value, phase=phase))
    write_records(os.path.join(cfg.output_dir, "metrics.jsonl"), lines)

    last = [m for m in metrics if m["phase"] == "train"][-1]
    print(render_table(
        ["step", "loss_total", "loss_causal", "loss_ratio", "keep_fractions"],
        [[last["step"], last["loss_total"], last["loss_causal"], last["loss_ratio"],
          "[" + ", ".join(f"{f:.3f}" for f in last["keep_fractions"]) + "]"]],
    ))
    print(f"checkpoint written to {ckpt_path}")
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    backbone, modules = build_model(cfg)
    if args.checkpoint:
        _, tensors, _ = load_checkpoint(args.checkpoint, cfg.fingerprint())
        apply_tensors(backbone, modules, tensors)
    backbone.set_trainable(False)
    results = run_all_checks(
        backbone, cfg.model, modules, cfg.schedule, cfg.tau, cfg.seed
    )
    rows = [[r.name, "pass" if r.passed else "FAIL", r.value, r.threshold] for r in results]
    print(render_table(["check", "status", "value", "threshold"], rows))
    if cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        write_records(os.path.join(cfg.output_dir, "verify.jsonl"),
                      [r.as_record() for r in results])
    return 0 if all(r.passed for r in results) else 1


def cmd_eval(cfg: RunConfig, args) -> int:
    backbone, modules = build_model(cfg)
    _, tensors, _ = load_checkpoint(args.checkpoint, cfg.fingerprint())
    apply_tensors(backbone, modules, tensors)
    backbone.set_trainable(False)
    _, eval_ds = _datasets(cfg)

    schedule = cfg.schedule
    if args.rho is not None:
        ratios = tuple(max(r, 1.0 / cfg.model.vision_tokens) for r in ratio_triple(args.rho))
        if len(schedule.layers) != 3:
            raise ConfigError("--rho expects a 3-module schedule")
        schedule = PruneSchedule(schedule.layers, schedule.train_ratios, ratios)

    modes = [args.mode] if args.mode else ["masked", "pruned", "random"]
    records = []
    rows = []
    clean = evaluate_accuracy(backbone, cfg.model, modules, eval_ds, None, mode="none")
    records.append(record_line("eval", "none", "accuracy", clean))
    toy_arch, toy_input = _toy_cost_model(cfg)
    base_report = pipeline_flops(toy_arch, toy_input)
    rows.append(["none", clean, base_report.total / 1e12])
    for mode in modes:
        rng = SeededRng(cfg.seed, 404) if mode == "random" else None
        acc = evaluate_accuracy(
            backbone, cfg.model, modules, eval_ds, schedule, mode=mode, rng=rng
        )
        if mode == "masked":
            tflops = base_report.total / 1e12
        else:
            report = pipeline_flops(
                toy_arch, toy_input, list(schedule.layers), list(schedule.infer_ratios)
            )
            tflops = report.total / 1e12
        rows.append([mode, acc, tflops])
        records.append(record_line("eval", mode, "accuracy", acc))
        records.append(record_line("eval", mode, "tflops", tflops))
    print(render_table(["mode", "accuracy", "toy TFLOPs"], rows))
    if cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        write_records(os.path.join(cfg.output_dir, "eval.jsonl"), records)
    return 0


def _toy_cost_model(cfg: RunConfig):
    """ArchitectureSpec mirroring the toy backbone, for eval cost reporting."""
    from .cost import (ArchitectureSpec, ConnectorSpec, DecisionModuleSpec,
                       DecoderSpec, InputSpec, VisionEncoderSpec)
    m = cfg.model
    arch = ArchitectureSpec(
        decoder=DecoderSpec(layers=m.depth, d=m.d, heads=m.heads, ffn=m.ffn,
                            ffn_kind="plain", vocab=m.vocab),
        vision_encoder=VisionEncoderSpec(layers=0, d=m.d, ffn=m.ffn,
                                         tokens=m.vision_tokens),
        connector=ConnectorSpec(widths=(m.patch_dim, m.d)),
        decision_module=DecisionModuleSpec(blocks=cfg.modules.blocks,
                                           heads=cfg.modules.heads),
    )
    return arch, InputSpec(m.vision_tokens, 2)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lvprune",
        description="Language-guided vision-token pruning: train, verify, "
                    "evaluate, and cost a toy multi-modal pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_flops = sub.add_parser("flops", help="analytic FLOPs report")
    p_flops.add_argument("--rho", type=float, default=None,
                         help="keep ratio; modules run [rho, rho-0.2, rho-0.4]")
    p_flops.add_argument("--sweep", type=str, default=None, metavar="A:B:STEP",
                         help="sweep rho over an inclusive range")
    p_flops.add_argument("--baseline", action="store_true",
                         help="report the no-pruning baseline only")

    p_train = sub.add_parser("train", help="two-phase training run")
    p_verify = sub.add_parser("verify", help="run the invariant suite")
    p_verify.add_argument("--checkpoint", type=str, default=None)
    p_eval = sub.add_parser("eval", help="accuracy report from a checkpoint")
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--mode", choices=["masked", "pruned", "random"], default=None)
    p_eval.add_argument("--rho", type=float, default=None)

    for p in (p_flops, p_train, p_verify, p_eval):
        p.add_argument("--config", type=str, required=True)
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed everywhere")

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = _override_seed(cfg, args.seed)
        handler = {
            "flops": cmd_flops, "train": cmd_train,
            "verify": cmd_verify, "eval": cmd_eval,
        }[args.command]
        return handler(cfg, args)
    except (ConfigError, CheckpointError, InfeasibleScheduleError,
            ScheduleInfeasibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _override_seed(cfg: RunConfig, seed: int) -> RunConfig:
    from .config import DataConfig
    data = DataConfig(spec=cfg.data.spec, eval_samples=cfg.data.eval_samples, seed=seed)
    cfg.data = data
    return cfg


if __name__ == "__main__":
    sys.exit(main())
