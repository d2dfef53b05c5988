"""Command-line pipeline orchestration.

Subcommands cover the whole workflow: generate expert and recovery datasets,
train the progress value model, label a mixed dataset, run the two policy
training phases, evaluate under the phase protocol, and run the scaling and
ablation suites.  Every subcommand accepts --config / --seed / --out; errors
exit nonzero with a machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench, datagen, labeling, policy as policy_mod, store, value as value_mod
from .config import Config, load_config
from .errors import RecoveryLabError
from .faults import ErrorKind, error_from_config, max_nominal_duration
from .store import EpisodeKind, HistoryMode, Outcome, read_dataset
from .world import EnvMode


def _env_mode(text: str) -> EnvMode:
    return EnvMode.CLEAN if text.lower() == "clean" else EnvMode.RANDOM


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--out", default="out", help="output directory or file")


def _dirs(text: str) -> list[Path]:
    return [Path(part) for part in text.split(",") if part]


def _load_episodes(dirs: list[Path]) -> list:
    episodes = []
    for d in dirs:
        episodes.extend(read_dataset(d))
    return episodes


def _policy_overrides(cfg: Config, args) -> Config:
    over = {}
    if getattr(args, "lam", None) is not None:
        over["lambda_recovery"] = args.lam
    if getattr(args, "sigma", None) is not None:
        over["sigma"] = args.sigma
    if getattr(args, "steps", None) is not None:
        over["bc_steps"] = args.steps
        over["refine_steps"] = args.steps
    if getattr(args, "lr", None) is not None:
        over["policy_lr"] = args.lr
    if getattr(args, "history_w", None) is not None:
        over["history_window"] = args.history_w
    return cfg.with_overrides(**over) if over else cfg


def _resolve_t_max(cfg: Config, args) -> int:
    if getattr(args, "t_max", None) is not None:
        return int(args.t_max)
    if getattr(args, "expert_data", None):
        return max_nominal_duration(_load_episodes(_dirs(args.expert_data)))
    return int(cfg.episode_max_steps)


def cmd_gen_nominal(args) -> int:
    cfg = load_config(args.config)
    stats = datagen.generate_nominal(
        cfg, args.task, _env_mode(args.mode), args.n, args.seed, args.out,
        action_noise=args.noise, keep_failures=args.keep_failures,
    )
    print(json.dumps(stats))
    return 0


def cmd_gen_recovery(args) -> int:
    cfg = load_config(args.config)
    error = error_from_config(cfg, ErrorKind(args.error))
    stats = datagen.generate_recovery(
        cfg, args.task, _env_mode(args.mode), error, args.n, args.seed, args.out,
        pure_failure=args.pure_failure,
    )
    print(json.dumps(stats))
    return 0


def cmd_collect_induced(args) -> int:
    cfg = load_config(args.config)
    pol = policy_mod.load_policy(args.policy)
    t_max = _resolve_t_max(cfg, args)
    stats = datagen.collect_policy_induced(
        cfg, pol, args.tasks.split(","), args.n, args.seed, args.out, t_max=t_max,
    )
    print(json.dumps(stats))
    return 0


def cmd_train_value(args) -> int:
    cfg = load_config(args.config)
    episodes = [
        e for e in _load_episodes(_dirs(args.data)) if e.kind is EpisodeKind.NOMINAL_SUCCESS
    ]
    model = value_mod.init_progress_model(cfg, seed=args.seed)
    losses = value_mod.train_alignment(model, episodes, cfg, seed=args.seed, steps=args.steps)
    cluster = value_mod.build_reference_cluster(model, episodes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    value_mod.save_progress_model(
        model, out, cluster=cluster,
        provenance={"episodes": len(episodes), "final_loss": losses[-1], "seed": args.seed},
    )
    print(json.dumps({"checkpoint": str(out), "episodes": len(episodes),
                      "initial_loss": losses[0], "final_loss": losses[-1]}))
    return 0


def cmd_label(args) -> int:
    cfg = load_config(args.config)
    model, cluster = value_mod.load_progress_model(cfg, args.value)
    if cluster is None:
        raise RecoveryLabError("value checkpoint has no reference cluster; re-run train-value")
    label_cfg = labeling.LabelConfig.from_config(cfg, alpha=args.alpha)
    summary = labeling.label_dataset(args.data, args.out, model, cluster, label_cfg)
    print(json.dumps(summary))
    return 0


def cmd_train_rai(args) -> int:
    cfg = _policy_overrides(load_config(args.config), args)
    expert = _load_episodes(_dirs(args.expert))
    pol = policy_mod.init_policy(cfg, seed=args.seed)
    expert_ds = policy_mod.build_frame_dataset(cfg, expert, pol.history_w, HistoryMode.RAW)
    rec_ds = None
    rec_seeds: set[int] = set()
    if args.recovery:
        recovery = [
            e for e in _load_episodes(_dirs(args.recovery))
            if e.kind is EpisodeKind.FAILURE_RECOVERY
        ]
        rec_seeds = {e.seed for e in recovery}
        if args.no_history_reset:
            rec_ds = policy_mod.build_frame_dataset(cfg, recovery, pol.history_w, HistoryMode.RAW)
        else:
            sliced = [store.slice_recovery_suffix(e) for e in recovery]
            rec_ds = policy_mod.build_frame_dataset(cfg, sliced, pol.history_w, HistoryMode.RESET)
    losses = policy_mod.train_bc(pol, expert_ds, rec_ds, cfg, seed=args.seed)
    pol.provenance["training_seeds"] = sorted(set(expert_ds.seeds) | rec_seeds)
    pol.provenance["phase"] = "imitation"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    policy_mod.save_policy(pol, out)
    print(json.dumps({"checkpoint": str(out), "initial_loss": losses[0], "final_loss": losses[-1]}))
    return 0


def cmd_train_vcr(args) -> int:
    cfg = _policy_overrides(load_config(args.config), args)
    labeled = _load_episodes(_dirs(args.data))
    pol = policy_mod.load_policy(args.init) if args.init else policy_mod.init_policy(cfg, seed=args.seed)
    ds = policy_mod.build_frame_dataset(cfg, labeled, pol.history_w, HistoryMode.RAW, require_labels=True)
    losses = policy_mod.train_value_conditioned(pol, ds, cfg, seed=args.seed)
    prior = set(pol.provenance.get("training_seeds", []))
    pol.provenance["training_seeds"] = sorted(prior | set(ds.seeds))
    pol.provenance["phase"] = "value-conditioned"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    policy_mod.save_policy(pol, out)
    print(json.dumps({"checkpoint": str(out), "initial_loss": losses[0], "final_loss": losses[-1]}))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    pol = policy_mod.load_policy(args.policy)
    error = error_from_config(cfg, ErrorKind(args.error)) if args.error else None
    t_max = _resolve_t_max(cfg, args)
    seeds = [args.seed + i for i in range(args.trials)]
    training_seeds = set(pol.provenance.get("training_seeds", []))
    report = bench.run_protocol(
        cfg, bench.policy_actor_factory(pol, v_fixed=args.v), args.task, error, seeds, t_max,
        training_seeds=training_seeds, env_mode=_env_mode(args.mode),
        dataset_provenance={"policy": str(args.policy), "training_seeds": sorted(training_seeds)},
    )
    paths = bench.write_report(report, args.out, name=args.name)
    print(json.dumps({"summary": report.summary_row(), "csv": str(paths["csv"]), "json": str(paths["json"])}))
    return 0


def _build_suite_data(cfg: Config, args, rec_counts: dict[str, int]):
    """Generate the expert pool, recovery tiers, and pure failures in memory."""
    from .faults import run_interception, run_nominal

    error = error_from_config(cfg, ErrorKind(args.error))
    expert = []
    seed = args.seed
    while len(expert) < args.expert_n and seed < args.seed + 4 * args.expert_n:
        ep = run_nominal(cfg, args.task, EnvMode.RANDOM, seed, action_noise=float(cfg.expert_action_noise))
        if ep.outcome is Outcome.SUCCESS:
            expert.append(ep)
        seed += 1
    tiers: dict[str, list] = {}
    next_seed = args.seed + 10_000
    for name, count in rec_counts.items():
        eps = []
        while len(eps) < count and next_seed < args.seed + 60_000:
            ep = run_interception(cfg, args.task, EnvMode.RANDOM, error, next_seed)
            next_seed += 1
            if ep.kind is EpisodeKind.FAILURE_RECOVERY:
                eps.append(ep)
        tiers[name] = eps
    fails = []
    fseed = args.seed + 70_000
    while len(fails) < args.failures_n and fseed < args.seed + 80_000:
        ep = run_interception(cfg, args.task, EnvMode.RANDOM, error, fseed, recover=False)
        fseed += 1
        if ep.kind is EpisodeKind.PURE_FAILURE and ep.provenance.get("adverse_verified"):
            fails.append(ep)
    return error, expert, tiers, fails


def cmd_scaling(args) -> int:
    cfg = load_config(args.config)
    error, expert, tiers, fails = _build_suite_data(
        cfg, args, {"1x": args.rec_base, "2x": 2 * args.rec_base, "4x": 4 * args.rec_base}
    )
    eval_seeds = [args.seed + 100_000 + i for i in range(args.trials)]
    result = bench.run_scaling(cfg, args.task, error, expert, tiers, fails, eval_seeds, train_seed=args.seed)
    out = bench.write_table(result["rows"], Path(args.out) / "scaling.csv")
    print(json.dumps({"rows": result["rows"], "csv": str(out)}))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    error, expert, tiers, fails = _build_suite_data(cfg, args, {"1x": args.rec_base})
    eval_seeds = [args.seed + 100_000 + i for i in range(args.trials)]
    result = bench.run_ablations(
        cfg, args.which, args.task, error, expert, tiers["1x"], fails, eval_seeds, train_seed=args.seed,
    )
    out = bench.write_table(result["rows"], Path(args.out) / f"ablation-{args.which}.csv")
    print(json.dumps({"rows": result["rows"], "csv": str(out)}))
    return 0


def cmd_stats(args) -> int:
    report = store.dataset_stats(args.data)
    print(report.table())
    return 0


def cmd_report(args) -> int:
    payload = json.loads(Path(args.input).read_text())
    rows = payload["trials"]
    out = bench.write_table(rows, Path(args.out) / "report.csv")
    print(json.dumps({"summary": payload.get("summary", {}), "csv": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recoverylab",
        description="failure injection, recovery-data generation, and value-conditioned policy training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-nominal", help="generate expert demonstration episodes")
    _add_common(p)
    p.add_argument("--task", default="pick-place")
    p.add_argument("--mode", choices=["clean", "random"], default="random")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--noise", type=float, default=None, help="collection action noise")
    p.add_argument("--keep-failures", action="store_true")
    p.set_defaults(fn=cmd_gen_nominal)

    p = sub.add_parser("gen-recovery", help="generate paired failure-recovery episodes")
    _add_common(p)
    p.add_argument("--task", default="pick-place")
    p.add_argument("--mode", choices=["clean", "random"], default="random")
    p.add_argument("--error", required=True, choices=[k.value for k in ErrorKind])
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--pure-failure", action="store_true", help="suppress recovery; store pure failures")
    p.set_defaults(fn=cmd_gen_recovery)

    p = sub.add_parser("collect-induced", help="collect policy-induced failures with planner takeover")
    _add_common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--tasks", default="pick-place")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--expert-data", default=None, help="dataset dir(s) used to derive the timeout")
    p.add_argument("--t-max", type=int, default=None)
    p.set_defaults(fn=cmd_collect_induced)

    p = sub.add_parser("train-value", help="train the progress value model")
    _add_common(p)
    p.add_argument("--data", required=True, help="comma-separated dataset dirs of successes")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train_value)

    p = sub.add_parser("label", help="write hindsight value labels over a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--value", required=True, help="progress-model checkpoint")
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("train-rai", help="phase-one imitation on expert plus reset-recovery data")
    _add_common(p)
    p.add_argument("--expert", required=True)
    p.add_argument("--recovery", default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--history-w", type=int, default=None)
    p.add_argument("--no-history-reset", action="store_true",
                   help="ablation: train on unsliced recovery episodes with raw histories")
    p.set_defaults(fn=cmd_train_rai)

    p = sub.add_parser("train-vcr", help="value-conditioned refinement on a labeled dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="phase-one checkpoint to fine-tune")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--history-w", type=int, default=None)
    p.set_defaults(fn=cmd_train_vcr)

    p = sub.add_parser("eval", help="phase-protocol evaluation of a policy checkpoint")
    _add_common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--task", default="pick-place")
    p.add_argument("--mode", choices=["clean", "random"], default="random")
    p.add_argument("--error", default=None, choices=[k.value for k in ErrorKind])
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--v", type=float, default=1.0, help="fixed value input at deployment")
    p.add_argument("--expert-data", default=None)
    p.add_argument("--t-max", type=int, default=None)
    p.add_argument("--name", default="eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("scaling", help="recovery-data scaling study (1x/2x/4x)")
    _add_common(p)
    p.add_argument("--task", default="pick-place")
    p.add_argument("--error", default="E2", choices=[k.value for k in ErrorKind])
    p.add_argument("--expert-n", type=int, default=40)
    p.add_argument("--rec-base", type=int, default=8)
    p.add_argument("--failures-n", type=int, default=8)
    p.add_argument("--trials", type=int, default=40)
    p.set_defaults(fn=cmd_scaling)

    p = sub.add_parser("ablate", help="component ablations")
    _add_common(p)
    p.add_argument("--which", required=True, choices=["history-reset", "value-guidance", "alpha"])
    p.add_argument("--task", default="pick-place")
    p.add_argument("--error", default="E2", choices=[k.value for k in ErrorKind])
    p.add_argument("--expert-n", type=int, default=40)
    p.add_argument("--rec-base", type=int, default=16)
    p.add_argument("--failures-n", type=int, default=8)
    p.add_argument("--trials", type=int, default=30)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("stats", help="dataset statistics table")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("report", help="re-render a stored evaluation report")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "trials", None) is None and args.command == "eval":
        cfg = load_config(args.config)
        args.trials = int(cfg.eval_trials)
    try:
        return args.fn(args)
    except RecoveryLabError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
