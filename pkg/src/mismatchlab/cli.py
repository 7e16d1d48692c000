"""Batch experiment runner.

Commands are non-interactive and fully seeded: train writes one JSONL
metrics row per iteration plus a summary document, schedule compares the
budget-partitioned scheduler against the single-pass baseline on shared
seeds, compounding runs the discrepancy-growth dynamics experiment, and
sweep compares masking-bound settings. Exit codes: 0 success, 2 config
error, 3 numeric failure, 4 tick cap exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ExperimentConfig, load_config
from .discrepancy import BiasMode, compounding_experiment, make_probes, sensitivity_sweep
from .errors import ConfigError, NumericError, TickCapError
from .objective import Algo, MaskingBounds, ObjectiveConfig
from .policy import Vocabulary, infer_engine, init_params
from .scheduler import BudgetConfig, SyntheticPromptSource, make_state, train_loop

METRICS_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_TICK_CAP = 4


def _json_value(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _dumps(obj) -> str:
    return json.dumps(obj, default=_json_value, allow_nan=False)


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _vocab(cfg: ExperimentConfig) -> Vocabulary:
    return Vocabulary(size=cfg.policy.vocab_size, eos_id=cfg.policy.eos_id)


def _objective_cfg(cfg: ExperimentConfig) -> ObjectiveConfig:
    return ObjectiveConfig(
        algo=Algo(cfg.objective.algo),
        clip_eps=cfg.objective.clip_eps,
        kl_coeff=cfg.objective.kl_coeff,
        group_size=cfg.objective.group_size,
        tis_cap=cfg.objective.tis_cap,
    )


def _budget_cfg(cfg: ExperimentConfig) -> BudgetConfig:
    b = cfg.budget
    return BudgetConfig(
        token_budget=b.token_budget,
        infer_capacity=b.infer_capacity,
        retention_threshold=b.retention_threshold,
        train_capacity=b.train_capacity,
        sync_cost_ticks=b.sync_cost_ticks,
        prompts_per_iteration=b.prompts_per_iteration,
        max_total_prompts=b.max_total_prompts,
        tick_cap=b.tick_cap,
    )


def _resolved_header(cfg: ExperimentConfig) -> dict:
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "kind": "header",
        "config": cfg.to_dict(),
    }


def _metrics_row(cfg: ExperimentConfig, report, loss, sample) -> dict:
    wall_ticks = report.rollout_ticks + cfg.budget.sync_cost_ticks
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "iteration": report.iteration,
        "algo": cfg.objective.algo,
        "reward_mean": _json_value(report.reward_mean),
        "grad_norm": loss.grad_norm,
        "delta": sample.delta,
        "max_token_gap": sample.max_token_gap,
        "clipped_fraction": loss.clipped_fraction,
        "rollout_ticks": report.rollout_ticks,
        "trained_tokens": report.trained_tokens,
        "stale_token_fraction": report.stale_token_fraction,
        "wall_ms": float(wall_ticks),
    }


def cmd_train(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    summary_path = out_dir / "summary.json"
    vocab = _vocab(cfg)
    infer = infer_engine(cfg.mismatch.scale, cfg.mismatch.seed)
    params = init_params(vocab, cfg.policy.n_features, cfg.policy.init_scale, cfg.seed)
    source = SyntheticPromptSource(vocab, max_len=cfg.tasks.max_len)
    state = make_state(cfg.seed, vocab, infer, source, cfg.policy.temperature)
    probes = make_probes(cfg.run.n_probes, vocab, cfg.seed)
    group_cfg = _objective_cfg(cfg)
    budget = _budget_cfg(cfg)
    bounds = MaskingBounds(cfg.objective.alpha, cfg.objective.beta)

    rows: list[dict] = []
    status = "ok"
    error_msg = None
    with metrics_path.open("w", encoding="utf-8") as fh:
        fh.write(_dumps(_resolved_header(cfg)) + "\n")

        def flush_row(report, loss, sample) -> None:
            row = _metrics_row(cfg, report, loss, sample)
            rows.append(row)
            fh.write(_dumps(row) + "\n")
            fh.flush()

        try:
            _, params = train_loop(
                cfg.run.n_iterations,
                state,
                params,
                budget,
                group_cfg,
                bounds,
                cfg.objective.learning_rate,
                probes=probes,
                optimizer=cfg.objective.optimizer,
                momentum_beta=cfg.objective.momentum,
                on_step=flush_row,
            )
        except NumericError as exc:
            status = "numeric_failure"
            error_msg = str(exc)

    summary = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "status": status,
        "config": cfg.to_dict(),
        "iterations_completed": len(rows),
        "final": rows[-1] if rows else None,
    }
    if status == "ok":
        summary["final_version"] = params.version_id
        summary["tick_clock"] = state.tick_clock
    else:
        summary["error"] = error_msg
    summary_path.write_text(_dumps(summary) + "\n", encoding="utf-8")
    if status != "ok":
        print(f"numeric failure: {error_msg}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _schedule_one_seed(cfg_dict: dict, seed: int) -> dict:
    """Budget-partitioned vs baseline run on one shared seed (picklable)."""
    cfg = load_config_dict(cfg_dict)
    assert cfg.schedule is not None
    sch = cfg.schedule
    vocab = _vocab(cfg)
    infer = infer_engine(cfg.mismatch.scale, cfg.mismatch.seed)
    group_cfg = _objective_cfg(cfg)
    budget = _budget_cfg(cfg)
    bounds = MaskingBounds(cfg.objective.alpha, cfg.objective.beta)
    probes = make_probes(cfg.run.n_probes, vocab, seed)

    totals = {}
    for mode in ("budget", "baseline"):
        source = SyntheticPromptSource(
            vocab,
            max_len=sch.max_len,
            length_model=sch.length_model,
            median=sch.median,
            sigma=sch.sigma,
        )
        state = make_state(seed, vocab, infer, source, cfg.policy.temperature)
        params = init_params(vocab, cfg.policy.n_features, cfg.policy.init_scale, seed)
        results, _ = train_loop(
            sch.n_iterations,
            state,
            params,
            budget,
            group_cfg,
            bounds,
            cfg.objective.learning_rate,
            probes=probes,
            baseline=(mode == "baseline"),
        )
        rollout_ticks = sum(r[0].rollout_ticks for r in results)
        trained = sum(r[0].trained_tokens for r in results)
        totals[mode] = {
            "rollout_ticks": rollout_ticks,
            "end_to_end_ticks": rollout_ticks + cfg.budget.sync_cost_ticks * len(results),
            "trained_tokens": trained,
            "iterations": len(results),
            "ticks_per_trained_token": rollout_ticks / trained if trained else math.inf,
        }
    b, c = totals["baseline"], totals["budget"]
    return {
        "seed": seed,
        "budget": c,
        "baseline": b,
        "speedup_rollout": (b["ticks_per_trained_token"] / c["ticks_per_trained_token"])
        if c["ticks_per_trained_token"] > 0
        else math.inf,
        "speedup_end_to_end": (
            (b["end_to_end_ticks"] / b["trained_tokens"])
            / (c["end_to_end_ticks"] / c["trained_tokens"])
        )
        if b["trained_tokens"] and c["trained_tokens"]
        else math.inf,
    }


def load_config_dict(data: dict) -> ExperimentConfig:
    from .config import config_from_dict

    return config_from_dict(data)


def cmd_schedule(cfg: ExperimentConfig, out_dir: Path, jobs: int = 1) -> int:
    if cfg.schedule is None:
        raise ConfigError("schedule command requires a schedule section (length-distribution spec)")
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = cfg.schedule.seeds
    cfg_dict = cfg.to_dict()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_schedule_one_seed, [cfg_dict] * len(seeds), seeds))
    else:
        per_seed = [_schedule_one_seed(cfg_dict, seed) for seed in seeds]
    report = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "config": cfg_dict,
        "per_seed": per_seed,
        "mean_speedup_rollout": sum(r["speedup_rollout"] for r in per_seed) / len(per_seed),
        "mean_speedup_end_to_end": sum(r["speedup_end_to_end"] for r in per_seed) / len(per_seed),
    }
    (out_dir / "schedule_report.json").write_text(
        _dumps(_sanitize(report)) + "\n", encoding="utf-8"
    )
    return EXIT_OK


def cmd_compounding(cfg: ExperimentConfig, out_dir: Path) -> int:
    if cfg.compounding is None:
        raise ConfigError("compounding command requires a compounding section")
    out_dir.mkdir(parents=True, exist_ok=True)
    comp = cfg.compounding
    vocab = _vocab(cfg)
    infer = infer_engine(cfg.mismatch.scale, cfg.mismatch.seed)
    params = init_params(vocab, cfg.policy.n_features, cfg.policy.init_scale, cfg.seed)
    probes = make_probes(cfg.run.n_probes, vocab, cfg.seed)
    samples, fit = compounding_experiment(
        params,
        comp.mu,
        comp.n_steps,
        BiasMode(comp.bias_mode),
        vocab,
        infer,
        probes,
        temperature=cfg.policy.temperature,
        align_target=comp.align_target,
        reward_seed=comp.reward_seed,
        rl_options={"seed": cfg.seed, "max_len": cfg.tasks.max_len},
    )
    with (out_dir / "compounding_trace.jsonl").open("w", encoding="utf-8") as fh:
        fh.write(_dumps(_resolved_header(cfg)) + "\n")
        for s in samples:
            fh.write(_dumps({"step": s.step, "delta": s.delta, "max_token_gap": s.max_token_gap}) + "\n")
    fit_doc = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "fit": _sanitize(dataclasses.asdict(fit)),
    }
    (out_dir / "compounding_fit.json").write_text(_dumps(fit_doc) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out_dir: Path) -> int:
    if cfg.sweep is None:
        raise ConfigError("sweep command requires a sweep section")
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = _vocab(cfg)
    infer = infer_engine(cfg.mismatch.scale, cfg.mismatch.seed)
    params = init_params(vocab, cfg.policy.n_features, cfg.policy.init_scale, cfg.seed)
    rows = sensitivity_sweep(
        [tuple(b) for b in cfg.sweep.bounds],
        cfg.seed,
        vocab,
        infer,
        params,
        cfg.sweep.n_iterations,
        _budget_cfg(cfg),
        _objective_cfg(cfg),
        cfg.objective.learning_rate,
        max_len=cfg.tasks.max_len,
        temperature=cfg.policy.temperature,
    )
    table = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "settings": _sanitize(rows),
    }
    (out_dir / "sweep_table.json").write_text(_dumps(table) + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mismatchlab",
        description="Desk-scale dual-engine RL laboratory: training runs, "
        "scheduler comparisons, discrepancy dynamics, masking sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "schedule", "compounding", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
        p.add_argument("--out", required=True, help="output directory for metrics/reports")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--iterations", type=int, default=None, help="override run.n_iterations")
        if name == "train":
            p.add_argument("--algo", choices=["icepop", "grpo", "tis"], default=None)
        if name == "schedule":
            p.add_argument("--jobs", type=int, default=1, help="parallel replicate seeds")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.iterations is not None:
            if args.iterations < 0:
                raise ConfigError("--iterations must be nonnegative")
            cfg.run.n_iterations = args.iterations
        if getattr(args, "algo", None):
            cfg.objective.algo = args.algo
        out_dir = Path(args.out)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "schedule":
            return cmd_schedule(cfg, out_dir, jobs=args.jobs)
        if args.command == "compounding":
            return cmd_compounding(cfg, out_dir)
        return cmd_sweep(cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TickCapError as exc:
        print(f"tick cap exceeded: {exc}", file=sys.stderr)
        return EXIT_TICK_CAP


if __name__ == "__main__":
    sys.exit(main())
