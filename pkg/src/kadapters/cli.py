"""Command-line surface: plan, verify, train, compare.

Every command is deterministic given its flags and seeds. Train and compare
runs write a manifest next to their outputs recording the command line,
seeds, version and output paths; the manifest is the only file carrying a
timestamp, so result files can be compared byte-for-byte across replays.

Exit codes: 0 success, 1 verification failure, 2 usage/configuration error,
3 diverged training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, analysis, backend, checkpoint, harness, planner
from .attention import GPT2_SMALL, ModelDims
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DivergedError,
    ShapeError,
    UnknownPlanError,
)

OUTDIR_ENV = "KADAPTERS_OUTDIR"

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _parse_dims(text: str) -> ModelDims:
    if text.strip().startswith("{"):
        try:
            spec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--dims: invalid JSON: {exc}") from exc
        return _dims_from_dict(spec)
    presets = {"gpt2-small": GPT2_SMALL, "toy": harness.toy_dims()}
    if text not in presets:
        raise ConfigError(
            f"--dims: unknown preset {text!r}; use one of {sorted(presets)} or inline JSON"
        )
    return presets[text]


def _dims_from_dict(spec: dict) -> ModelDims:
    try:
        n_layers = int(spec["n_layers"])
        n_heads = int(spec["n_heads"])
        head_dim = int(spec["head_dim"])
    except KeyError as exc:
        raise ConfigError(f"dims: missing field {exc}") from exc
    base = spec.get("base_param_total")
    if base is None:
        base = harness.attention_stack_param_count(n_layers, n_heads * head_dim)
    try:
        return ModelDims(n_layers, n_heads, head_dim, int(base))
    except ValueError as exc:
        raise ConfigError(f"dims: {exc}") from exc


def _resolve_outdir(value: str | None, required: bool) -> Path | None:
    chosen = value or os.environ.get(OUTDIR_ENV)
    if chosen is None:
        if required:
            raise ConfigError(f"--out is required (or set {OUTDIR_ENV})")
        return None
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(outdir: Path, command: str, args: argparse.Namespace,
                    seeds: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "argv": [f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "func"],
        "seeds": seeds,
        "tool_version": __version__,
        "backend": backend.current_backend(),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "outputs": sorted(outputs),
    }
    _dump_json(manifest, outdir / "manifest.json")


def _load_plan(value: str, dims: ModelDims) -> planner.BudgetPlan:
    if value.endswith(".json") or "/" in value or os.path.isfile(value):
        return planner.plan_from_dict(_load_json(value))
    return planner.builtin_plan(value, dims)


def _task_from_config(spec: dict) -> harness.ToyTask:
    dims = _dims_from_dict(spec["dims"]) if "dims" in spec else harness.toy_dims()
    kwargs = {}
    for fld in ("seq_len", "base_seed", "teacher_rank", "dataset_size"):
        if fld in spec:
            kwargs[fld] = int(spec[fld])
    if "teacher_scale" in spec:
        kwargs["teacher_scale"] = float(spec["teacher_scale"])
    if "teacher_kind" in spec:
        kwargs["teacher_kind"] = str(spec["teacher_kind"])
    if "targets" in spec:
        kwargs["targets"] = tuple(spec["targets"])
    return harness.ToyTask(dims=dims, **kwargs)


def _train_config_from(spec: dict) -> harness.TrainConfig:
    known = {
        "learning_rate": float, "batch_size": int, "warmup_steps": int,
        "total_steps": int, "weight_decay": float, "adam_beta1": float,
        "adam_beta2": float, "adam_eps": float, "seed": int,
    }
    unknown = set(spec) - set(known)
    if unknown:
        raise ConfigError(f"train config: unknown fields {sorted(unknown)}")
    return harness.TrainConfig(**{k: cast(spec[k]) for k, cast in known.items() if k in spec})


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def _format_plan_table(plan: planner.BudgetPlan, rep: planner.BudgetReport) -> str:
    dims = plan.dims
    lines = [
        f"plan: {plan.name}",
        f"dims: layers={dims.n_layers} heads={dims.n_heads} head_dim={dims.head_dim}"
        f" d={dims.model_dim} base={dims.base_param_total:,}",
        f"{'target':<8}{'scheme':<18}{'r_shared':>9}{'r_head':>8}{'params/layer':>14}",
    ]
    for target in plan.adapted_targets():
        scheme = plan.per_target[target]
        lines.append(
            f"{target:<8}{scheme.kind.value:<18}{scheme.rank_shared:>9}"
            f"{scheme.rank_head:>8}{rep.per_target_breakdown[target]:>14,}"
        )
    lines.append(f"per-layer total: {rep.params_per_layer:,}")
    lines.append(
        f"total: {rep.params_total:,} trainable parameters"
        f" = {rep.percent_of_base:.3f}% of base"
    )
    q, v, o = rep.ratio_q_v_o
    lines.append(f"q:v:o factor ratio: {q:g}:{v:g}:{o:g}")
    for note in rep.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines)


def cmd_plan(args: argparse.Namespace) -> int:
    if bool(args.preset) == bool(args.config):
        raise ConfigError("plan: give exactly one of --preset / --config")
    dims = _parse_dims(args.dims)
    if args.preset:
        plan = planner.builtin_plan(args.preset, dims)
    else:
        plan = planner.custom_plan(_load_json(args.config))
    rep = planner.report(plan)
    print(_format_plan_table(plan, rep))
    outdir = _resolve_outdir(args.out, required=False)
    if outdir is not None:
        _dump_json(planner.plan_to_dict(plan), outdir / "plan.json")
        _dump_json(rep.to_dict(), outdir / "report.json")
        _write_manifest(outdir, "plan", args, seeds={}, outputs=["plan.json", "report.json"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

SUITES = ("kernel", "rewrite", "grad", "rank", "all")


def _randomized_adapter(scheme, target, dims, seed):
    from .adapters import init_adapter, randomize_factors

    state = init_adapter(scheme, target, dims, seed=seed)
    return randomize_factors(state, seed=list(seed) + [99], std=0.3)


def _run_grad_suite(dims: ModelDims, seed: int) -> analysis.SuiteReport:
    """One model carrying all five schemes across q/v/o, audited factor by factor."""
    from .adapters import AdapterScheme, SchemeKind

    stack = harness.AttentionStack.random(dims, seed=[seed, 3])
    layer_plans = [
        {"q": AdapterScheme(SchemeKind.LORA, rank_shared=2),
         "v": AdapterScheme(SchemeKind.KERNEL_WISE, rank_head=1),
         "o": AdapterScheme(SchemeKind.KERNEL_WISE_LITE, rank_head=2)},
        {"q": AdapterScheme(SchemeKind.KERNEL_MIX, rank_shared=2, rank_head=1),
         "v": AdapterScheme(SchemeKind.KERNEL_MIX_LITE, rank_shared=1, rank_head=1),
         "o": AdapterScheme(SchemeKind.KERNEL_WISE, rank_head=1)},
    ]
    adapters: list[harness.LayerAdapters] = []
    for layer_idx in range(dims.n_layers):
        chosen = layer_plans[layer_idx % len(layer_plans)]
        layer = {
            target: _randomized_adapter(scheme, target, dims, [seed, layer_idx, i])
            for i, (target, scheme) in enumerate(chosen.items())
        }
        adapters.append(layer)
    rng = np.random.default_rng([seed, 5])
    batch = [(rng.standard_normal((4, dims.model_dim)),
              rng.standard_normal((4, dims.model_dim)))]
    report = analysis.grad_audit(stack, adapters, batch)
    return analysis.SuiteReport(
        suite="grad", passed=report.passed, trials=report.params_audited,
        tolerance=report.tolerance, worst=report.worst_rel_error,
        worst_case={"param": report.worst_param},
    )


def cmd_verify(args: argparse.Namespace) -> int:
    dims = _parse_dims(args.dims)
    wanted = SUITES[:-1] if args.suite == "all" else (args.suite,)
    reports: list[analysis.SuiteReport] = []
    for suite in wanted:
        if suite == "kernel":
            reports.append(analysis.verify_kernel_equivalence(dims, args.trials, args.seed))
        elif suite == "rewrite":
            reports.append(analysis.verify_rewrite_equivalence(dims, args.trials, args.seed))
        elif suite == "grad":
            reports.append(_run_grad_suite(dims, args.seed))
        elif suite == "rank":
            seeds = min(args.trials, 50)
            reports.append(analysis.verify_rank_structure(dims, seeds=seeds))
    all_passed = all(r.passed for r in reports)
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.suite:<8} trials={r.trials} worst={r.worst:.3e}"
              f" tolerance={r.tolerance:.0e}")
    if args.json:
        path = Path(args.json)
        path.parent.mkdir(parents=True, exist_ok=True)
        _dump_json({"passed": all_passed, "suites": [r.to_dict() for r in reports]}, path)
        _write_manifest(path.parent, "verify", args, seeds={"seed": args.seed},
                        outputs=[path.name])
    return EXIT_OK if all_passed else EXIT_VERIFY_FAILED


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _run_training(task: harness.ToyTask, plan: planner.BudgetPlan,
                  cfg: harness.TrainConfig, outdir: Path) -> tuple[harness.TrainLog, list[str]]:
    stack, _, dataset = harness.make_task(task)
    adapters = harness.init_plan_adapters(plan, seed=cfg.seed)
    log = harness.train(stack, adapters, dataset, cfg)
    outputs = []
    _dump_json(log.to_dict(), outdir / "train_log.json")
    outputs.append("train_log.json")
    (outdir / "loss.csv").write_text("\n".join(log.loss_csv_lines()) + "\n")
    outputs.append("loss.csv")
    ckpt_dir = outdir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for layer_idx, layer in enumerate(adapters):
        for target, state in layer.items():
            name = f"checkpoints/layer{layer_idx}_{target}.ckpt"
            checkpoint.save_adapter_state(outdir / name, state)
            outputs.append(name)
    return log, outputs


def cmd_train(args: argparse.Namespace) -> int:
    task = _task_from_config(_load_json(args.task)) if args.task else harness.ToyTask()
    cfg = _train_config_from(_load_json(args.train_config)) if args.train_config \
        else harness.TrainConfig()
    plan = _load_plan(args.plan, task.dims)
    if plan.dims != task.dims:
        plan = planner.BudgetPlan(
            name=plan.name, per_target=plan.per_target, dims=task.dims,
            include_bias=plan.include_bias, published_percent=plan.published_percent,
        )
    outdir = _resolve_outdir(args.out, required=True)
    log, outputs = _run_training(task, plan, cfg, outdir)
    _write_manifest(outdir, "train", args,
                    seeds={"task": task.base_seed, "train": cfg.seed}, outputs=outputs)
    print(f"trained {plan.name}: initial loss {log.losses[0]:.6g},"
          f" final loss {log.final_loss:.6g} ({len(log.losses)} steps)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def cmd_compare(args: argparse.Namespace) -> int:
    names: list[str] = []
    for chunk in args.plans:
        names.extend(p for p in chunk.split(",") if p)
    if len(names) < 2:
        raise ConfigError("compare: need at least two plans")
    task = _task_from_config(_load_json(args.task)) if args.task else harness.ToyTask()
    cfg = _train_config_from(_load_json(args.train_config)) if args.train_config \
        else harness.TrainConfig()
    plans = [_load_plan(name, task.dims) for name in names]
    outdir = _resolve_outdir(args.out, required=True)
    result = harness.compare_schemes(task, plans, cfg)
    _dump_json(result.to_dict(), outdir / "comparison.json")
    (outdir / "comparison.csv").write_text("\n".join(result.csv_lines()) + "\n")
    _write_manifest(outdir, "compare", args,
                    seeds={"task": task.base_seed, "train": cfg.seed},
                    outputs=["comparison.json", "comparison.csv"])
    for line in result.csv_lines():
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kadapters",
        description="Kernel-wise attention adapters: budget plans, verification, toy training.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print and export a budget plan report")
    p.add_argument("--preset", help="registered plan name")
    p.add_argument("--config", help="path to a custom plan JSON")
    p.add_argument("--dims", default="gpt2-small", help="dims preset or inline JSON")
    p.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV})")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", help="run verification suites")
    p.add_argument("--suite", choices=SUITES, default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="toy", help="dims preset or inline JSON")
    p.add_argument("--json", help="write the JSON report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train adapters on a toy task")
    p.add_argument("--task", help="ToyTask JSON path (defaults when omitted)")
    p.add_argument("--plan", required=True, help="preset name or plan JSON path")
    p.add_argument("--train-config", help="TrainConfig JSON path")
    p.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train several plans on one task")
    p.add_argument("--task", help="ToyTask JSON path")
    p.add_argument("--plans", action="append", required=True,
                   help="comma-separated plan names/paths (repeatable)")
    p.add_argument("--train-config", help="TrainConfig JSON path")
    p.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV})")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on usage errors and --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UnknownPlanError, ShapeError, ContractError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
