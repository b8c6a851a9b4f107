"""Command-line front end.

    ccem train        --config cfg.json --seeds 0,1,2 [--key=value ...]
    ccem eval         --run-dir runs/train/seed_0
    ccem ablate       --preset desk --seeds 0,1,2 --workers 3
    ccem plan-bench
    ccem oracle-check

Every command writes a metrics CSV, ``summary.json`` and, for runs, the
resolved configuration under ``--out-dir`` (default ``$CCEM_OUT`` or
``runs``). Any flag of the form ``--section.key=value`` overrides a config
key.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from ccem.config import DESK_PRESET, ENV_PRESETS, ConfigError, ExperimentConfig, load_config
from ccem.planner import Scoring

__all__ = ["main", "aggregate", "build_parser"]

log = logging.getLogger("ccem")

PRESETS = {"desk": DESK_PRESET}
VARIANTS = ("full", "non_contrastive", "non_ccem", "baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccem", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs: bool = True):
        p.add_argument("--out-dir", default=None, help="output directory (default: $CCEM_OUT or ./runs)")
        if not runs:
            return
        p.add_argument("--config", default=None, help="JSON file of dotted config keys")
        p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="named override bundle")
        p.add_argument("--env", choices=sorted(ENV_PRESETS), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", default=None, help="comma-separated seed list")
        p.add_argument("--scoring", choices=[s.value for s in Scoring], default=None)
        p.add_argument("--non-contrastive", action="store_true")
        p.add_argument("--non-ccem", action="store_true")
        p.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("train", help="train one or more seeds"))
    common(sub.add_parser("ablate", help="run the full / non_contrastive / non_ccem / baseline grid"))
    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--run-dir", required=True, help="directory written by train (one seed)")
    p.add_argument("--checkpoint", default=None, help="checkpoint stem; default is the latest")
    p.add_argument("--episodes", type=int, default=None)
    common(p, runs=False)
    p = sub.add_parser("plan-bench", help="planner against brute-force oracles")
    p.add_argument("--trials", type=int, default=20)
    common(p, runs=False)
    p = sub.add_parser("oracle-check", help="gradient, stop-gradient and identity suites")
    p.add_argument("--instances", type=int, default=20)
    common(p, runs=False)
    return parser


def parse_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r}; overrides look like --section.key=value")
        key, value = item[2:].split("=", 1)
        out[key] = value
    return out


def resolve_config(args, extra: list[str]) -> ExperimentConfig:
    flat: dict = {}
    if args.env:
        flat.update(ENV_PRESETS[args.env])
    if args.preset:
        flat.update(PRESETS[args.preset])
    cfg = load_config(None, flat) if flat else ExperimentConfig()
    cfg = load_config(args.config, None, base=cfg)
    flags: dict = {}
    if args.env:
        flags["env.name"] = args.env
    if args.scoring:
        flags["cem.scoring"] = args.scoring
    if args.non_contrastive:
        flags["train.non_contrastive"] = True
    if args.non_ccem:
        flags["train.non_ccem"] = True
    if args.seeds:
        flags["seeds"] = args.seeds
    elif args.seed is not None:
        flags["seeds"] = [args.seed]
    flags.update(parse_overrides(extra))
    return cfg.override(flags, "<command line>") if flags else cfg


def out_dir(args) -> Path:
    base = args.out_dir or os.environ.get("CCEM_OUT") or "runs"
    return Path(base)


def _mean_std(values) -> dict:
    vals = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=float)
    if vals.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}


def _median_first_success(steps) -> float:
    return float(np.median([math.inf if s is None else s for s in steps]))


def aggregate(summaries) -> dict:
    """Per-seed final returns and first-success steps with mean and std over seeds."""
    finals = [s.final_eval_return for s in summaries]
    firsts = [s.first_success_step for s in summaries]
    return {
        "per_seed": {
            str(s.seed): {"final_eval_return": s.final_eval_return, "first_success_step": s.first_success_step}
            for s in summaries
        },
        "final_eval_return": _mean_std(finals),
        "first_success_step_median": _json_float(_median_first_success(firsts)),
    }


def _json_float(x: float):
    return x if math.isfinite(x) else None


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")


def _run_variant(cfg: ExperimentConfig, dest: Path, workers: int):
    from ccem.trainer import run_many

    dest.mkdir(parents=True, exist_ok=True)
    cfg.save(dest / "resolved_config.json")
    results = run_many(cfg, cfg.seeds, dest, workers)
    summaries = [s for s, _ in results]
    return summaries


def cmd_train(args, extra) -> int:
    cfg = resolve_config(args, extra)
    dest = out_dir(args)
    summaries = _run_variant(cfg, dest, args.workers)
    summary = aggregate(summaries)
    _write_json(dest / "summary.json", summary)
    _write_rows(dest / "results.csv", [("train", s) for s in summaries])
    m = summary["final_eval_return"]
    print(f"final eval return {m['mean']} +/- {m['std']} over {m['n']} seeds")
    return 0


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "seed", "final_eval_return", "first_success_step"])
        for variant, s in rows:
            w.writerow([variant, s.seed, repr(s.final_eval_return), "" if s.first_success_step is None else s.first_success_step])


def cmd_ablate(args, extra) -> int:
    cfg = resolve_config(args, extra)
    dest = out_dir(args)
    dest.mkdir(parents=True, exist_ok=True)
    cfg.save(dest / "resolved_config.json")
    result, rows, finals = {}, [], {}
    for variant in VARIANTS:
        summaries = _run_variant(cfg.variant(variant), dest / variant, args.workers)
        result[variant] = aggregate(summaries)
        rows += [(variant, s) for s in summaries]
        finals[variant] = [s.final_eval_return for s in summaries]
    result["ordering"] = ablation_report(finals)
    _write_json(dest / "summary.json", result)
    _write_rows(dest / "results.csv", rows)
    print(json.dumps(result["ordering"], indent=2))
    return 0


def ablation_report(finals: dict[str, list[float]]) -> dict:
    """Mean-return ordering full >= non_contrastive >= baseline.

    Full and non_contrastive count as within noise of each other when their
    means differ by at most two standard errors of the difference.
    """
    stats = {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v)) for k, v in finals.items()}
    (mf, sf, nf), (mn, sn, nn), (mb, _, _) = stats["full"], stats["non_contrastive"], stats["baseline"]
    se = math.sqrt(sf**2 / nf + sn**2 / nn)
    within_noise = abs(mf - mn) <= 2.0 * se
    ordered = (mf >= mn or within_noise) and mn >= mb
    return {
        "means": {k: s[0] for k, s in stats.items()},
        "stds": {k: s[1] for k, s in stats.items()},
        "full_vs_non_contrastive_se": se,
        "full_non_contrastive_within_noise": bool(within_noise),
        "ordering_holds": bool(ordered and within_noise),
        "flag": None if ordered and within_noise else "ORDERING FAILED",
    }


def cmd_eval(args, extra) -> int:
    from ccem.told_model import WorldModel
    from ccem.trainer import Trainer

    if extra:
        parse_overrides(extra)
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "resolved_config.json")
    if args.episodes:
        cfg = cfg.override({"train.eval_episodes": args.episodes})
    seed = int(json.loads((run_dir / "summary.json").read_text())["seed"]) if (run_dir / "summary.json").exists() else 0
    stem = args.checkpoint
    if stem is None:
        stems = sorted((run_dir / "checkpoints").glob("step_*.manifest"))
        if not stems:
            raise ConfigError(f"{run_dir}: no checkpoints found")
        stem = str(stems[-1].with_suffix(""))
    trainer = Trainer(cfg, seed)
    trainer.model = WorldModel.load(trainer.model_cfg, stem)
    mean, returns = trainer.evaluate()
    dest = Path(args.out_dir) if args.out_dir else run_dir
    _write_json(dest / "eval_summary.json", {"checkpoint": stem, "returns": returns, "mean": mean, "std": float(np.std(returns))})
    print(f"mean eval return {mean}")
    return 0


def cmd_plan_bench(args, extra) -> int:
    from ccem.oracles import argmax_recovery_errors, multistep_planning_ratios, scoring_gaps

    dest = out_dir(args)
    errors = argmax_recovery_errors(args.trials)
    ratios = multistep_planning_ratios(args.trials)
    gaps = scoring_gaps(max(1, args.trials // 4))
    summary = {
        "argmax_recovery_linf": {"max": float(errors.max()), "mean": float(errors.mean()), "passed": bool(np.all(errors <= 0.05))},
        "multistep_ratio": {
            "min": float(ratios.min()),
            "mean": float(ratios.mean()),
            "n_at_least_0.95": int(np.sum(ratios >= 0.95)),
            "passed": bool(np.sum(ratios >= 0.95) >= math.ceil(0.9 * len(ratios))),
        },
        "grid_oracle_gap": {k: {"mean": float(np.mean(v)), "max": float(np.max(v))} for k, v in gaps.items()},
    }
    _write_json(dest / "summary.json", summary)
    with open(dest / "plan_bench.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["suite", "trial", "value"])
        w.writerows(("argmax_linf", i, repr(float(e))) for i, e in enumerate(errors))
        w.writerows(("multistep_ratio", i, repr(float(r))) for i, r in enumerate(ratios))
        for k, v in gaps.items():
            w.writerows((f"gap_{k}", i, repr(g)) for i, g in enumerate(v))
    print(json.dumps(summary, indent=2))
    return 0 if summary["argmax_recovery_linf"]["passed"] and summary["multistep_ratio"]["passed"] else 1


def identity_checks() -> dict[str, bool]:
    """Closed-form checks of the intrinsic reward, InfoNCE and EMA."""
    from ccem.curiosity import IntrinsicState, info_nce
    from ccem.nn_core import ema_update

    out = {}
    st = IntrinsicState(C=0.2, alpha=0.0, r_e_max=1.0, r_i_max=2.0)
    out["intrinsic_arithmetic"] = abs(st.decay(0) * 2.0 * (st.r_e_max / st.r_i_max) - 0.2) < 1e-12
    st = IntrinsicState(C=1.0, alpha=1e-5)
    out["intrinsic_decay_ratio_e"] = abs(st.decay(0) / st.decay(1e5) - math.e) < 1e-9
    out["infonce_uniform"] = all(abs(info_nce(np.zeros((n, n)))[0] - math.log(n)) < 1e-6 for n in (2, 16, 256))
    rng = np.random.default_rng(0)
    t, o = rng.standard_normal(50), rng.standard_normal(50)
    out["ema_identity"] = all(np.array_equal(ema_update(t, o, z), (1 - z) * t + z * o) for z in (0.0, 0.01, 1.0))
    return out


def cmd_oracle_check(args, extra) -> int:
    from ccem.oracles import gradient_suite, stop_gradient_suite

    dest = out_dir(args)
    grads = gradient_suite(args.instances)
    stops = stop_gradient_suite(args.instances)
    ids = identity_checks()
    summary = {
        "gradients": {
            k: {"max_rel_error": max(r.max_rel_error for r in v), "passed": all(r.passed for r in v), "instances": len(v)}
            for k, v in grads.items()
        },
        "stop_gradients": stops,
        "identities": ids,
    }
    ok = all(g["passed"] for g in summary["gradients"].values()) and all(stops.values()) and all(ids.values())
    summary["passed"] = ok
    _write_json(dest / "summary.json", summary)
    with open(dest / "oracle_check.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["check", "instance", "max_rel_error", "passed"])
        for k, v in grads.items():
            w.writerows((k, i, repr(r.max_rel_error), r.passed) for i, r in enumerate(v))
        w.writerows((k, "", "", v) for k, v in {**stops, **ids}.items())
    print(json.dumps(summary, indent=2))
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "plan-bench": cmd_plan_bench,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
