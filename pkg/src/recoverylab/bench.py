"""Phase-protocol evaluation harness and experiment suites.

Every trial runs the Nominal -> Error -> Recovery protocol: the policy
executes, a structured perturbation projects the scene into an adverse state
at a geometric trigger, and the policy continues without external retry
logic.  Recovery scoring is conditional on the adverse state actually
verifying; unverified trials are excluded from recovery denominators and
reported separately.  Reports serialize to CSV and JSON with stable
formatting so identical configs and seeds reproduce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .errors import PlanExhausted, PlanningError, UnrecoverableState, ValidationError
from .faults import ErrorType, max_nominal_duration
from .labeling import LabelConfig, label_episode
from .planner import PlanExecutor, plan_nominal, plan_recovery
from .policy import (
    Actor,
    FrameDataset,
    LearnedActor,
    Policy,
    action_from_vector,
    init_policy,
    rollout_actor,
    train_bc,
    train_value_conditioned,
)
from .store import Episode, HistoryMode, slice_recovery_suffix
from .value import build_reference_cluster, init_progress_model, train_alignment
from .world import ArmAction, BimanualAction, EnvMode, Observation, WorldState, success_check
from . import policy as policy_mod


@dataclass(frozen=True)
class TrialRecord:
    task_id: str
    env_mode: str
    seed: int
    error_type: str | None
    adverse_verified: bool
    phase_trace: list[str]
    outcome: str
    steps_used: int


@dataclass
class EvalReport:
    condition: str                 # Standard | Adversarial
    task_id: str
    error_type: str | None
    trials: list[TrialRecord]
    config_snapshot: dict
    dataset_provenance: dict = field(default_factory=dict)

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def n_success(self) -> int:
        return sum(t.outcome == "Success" for t in self.trials)

    @property
    def success_rate(self) -> float:
        return self.n_success / max(1, self.n_trials)

    @property
    def n_verified(self) -> int:
        return sum(t.adverse_verified for t in self.trials)

    @property
    def n_recovered(self) -> int:
        return sum(t.adverse_verified and t.outcome == "Success" for t in self.trials)

    @property
    def recovery_rate(self) -> float:
        """Successes among adverse-verified trials only (the protocol metric)."""
        return self.n_recovered / max(1, self.n_verified)

    @property
    def insufficient_verification(self) -> bool:
        return self.condition == "Adversarial" and self.n_verified == 0

    def summary_row(self) -> dict:
        return {
            "condition": self.condition,
            "task_id": self.task_id,
            "error_type": self.error_type or "",
            "trials": self.n_trials,
            "successes": self.n_success,
            "success_rate": f"{self.success_rate:.6f}",
            "verified": self.n_verified,
            "recovered": self.n_recovered,
            "recovery_rate": f"{self.recovery_rate:.6f}",
            "insufficient_verification": str(self.insufficient_verification),
        }


class RandomActor(Actor):
    """Uniform random workspace targets; the evaluation floor."""

    def __init__(self, seed: int):
        self._seed = seed
        self._rng = np.random.default_rng([seed, 0x8A])
        self._cfg: Config | None = None

    def begin(self, cfg, task_id, state, obs):
        self._cfg = cfg
        self._rng = np.random.default_rng([self._seed, 0x8A])

    def act(self, state, obs):
        cfg = self._cfg
        vec = np.concatenate([
            [
                self._rng.uniform(cfg.workspace_x_min, cfg.workspace_x_max),
                self._rng.uniform(cfg.workspace_y_min, cfg.workspace_y_max),
                self._rng.uniform(-0.5, 0.5),
                self._rng.uniform(0.0, 1.0),
            ]
            for _ in range(2)
        ])
        return action_from_vector(cfg, vec)


class OracleActor(Actor):
    """The scripted expert run closed-loop as a policy.

    Executes the nominal plan and self-monitors: a stalled phase or an
    exhausted plan without success triggers replanning from the live state
    via the recovery planner.  Bounds every learned policy from above.
    """

    def __init__(self, stall_budget: int = 60):
        self.stall_budget = stall_budget
        self._cfg: Config | None = None
        self._task: str = ""
        self._executor: PlanExecutor | None = None

    def begin(self, cfg, task_id, state, obs):
        self._cfg = cfg
        self._task = task_id
        self._executor = PlanExecutor(cfg, plan_nominal(cfg, task_id, state))

    def _replan(self, state: WorldState) -> bool:
        try:
            self._executor = PlanExecutor(self._cfg, plan_recovery(self._cfg, self._task, state))
            return True
        except (UnrecoverableState, PlanningError):
            return False

    def act(self, state: WorldState, obs: Observation) -> BimanualAction:
        try:
            if self._executor.steps_in_phase > self.stall_budget:
                self._replan(state)
            return self._executor.next_action(state)
        except PlanExhausted:
            if not success_check(self._cfg, self._task, state) and self._replan(state):
                return self._executor.next_action(state)
            # Hold in place: nothing left to do.
            return BimanualAction(
                left=ArmAction(target=state.arm_poses[0], grip=state.grips[0]),
                right=ArmAction(target=state.arm_poses[1], grip=state.grips[1]),
            )


def adversarial_horizon(cfg: Config, t_max: int, error: ErrorType) -> int:
    """Time budget for recovery trials: room for the nominal run, the injected
    window, and a recovery attempt."""
    return int(cfg.adversarial_budget_mult * t_max) + error.window_length


def run_protocol(
    cfg: Config,
    actor_factory,
    task_id: str,
    error: ErrorType | None,
    seeds: list[int],
    t_max: int,
    training_seeds: set[int] | None = None,
    env_mode: EnvMode = EnvMode.RANDOM,
    config_snapshot: dict | None = None,
    dataset_provenance: dict | None = None,
) -> EvalReport:
    """Evaluate an actor over seeds under the Standard or Adversarial condition.

    ``actor_factory(seed)`` builds a fresh actor per trial.  Evaluation seeds
    must be disjoint from the training seeds recorded in the policy/datasets;
    the overlap assertion runs here, at report time.
    """
    if training_seeds:
        overlap = set(seeds) & set(training_seeds)
        if overlap:
            raise ValidationError(f"evaluation seeds overlap training seeds: {sorted(overlap)[:5]}")
    trials: list[TrialRecord] = []
    for seed in seeds:
        horizon = adversarial_horizon(cfg, t_max, error) if error is not None else t_max
        episode = rollout_actor(
            cfg, actor_factory(seed), task_id, env_mode, seed,
            injection=error, t_max=horizon, episode_label="eval",
        )
        trials.append(
            TrialRecord(
                task_id=task_id,
                env_mode=env_mode.value,
                seed=seed,
                error_type=error.kind.value if error is not None else None,
                adverse_verified=bool(episode.provenance.get("adverse_verified", False)),
                phase_trace=[f.phase.value for f in episode.frames],
                outcome=episode.outcome.value,
                steps_used=len(episode.frames),
            )
        )
    return EvalReport(
        condition="Adversarial" if error is not None else "Standard",
        task_id=task_id,
        error_type=error.kind.value if error is not None else None,
        trials=trials,
        config_snapshot=config_snapshot or cfg.snapshot(),
        dataset_provenance=dataset_provenance or {},
    )


def policy_actor_factory(policy: Policy, v_fixed: float = 1.0):
    return lambda seed: LearnedActor(policy, v_fixed=v_fixed)


def write_report(report: EvalReport, out_dir: str | Path, name: str) -> dict[str, Path]:
    """Emit <name>.csv (per-trial rows plus a summary row) and <name>.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    json_path = out_dir / f"{name}.json"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["task_id", "env_mode", "seed", "error_type", "adverse_verified", "outcome", "steps_used"]
    )
    for t in report.trials:
        writer.writerow(
            [t.task_id, t.env_mode, t.seed, t.error_type or "", t.adverse_verified, t.outcome, t.steps_used]
        )
    summary = report.summary_row()
    writer.writerow([])
    writer.writerow(list(summary.keys()))
    writer.writerow(list(summary.values()))
    csv_path.write_text(buf.getvalue())

    payload = {
        "summary": summary,
        "trials": [
            {
                "task_id": t.task_id, "env_mode": t.env_mode, "seed": t.seed,
                "error_type": t.error_type, "adverse_verified": t.adverse_verified,
                "outcome": t.outcome, "steps_used": t.steps_used,
                "phase_trace": "".join(p[0] for p in t.phase_trace),
            }
            for t in report.trials
        ],
        "config_snapshot": report.config_snapshot,
        "dataset_provenance": report.dataset_provenance,
    }
    json_path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return {"csv": csv_path, "json": json_path}


# ---------------------------------------------------------------------------
# training pipelines shared by the experiment suites


@dataclass
class TrainedVariants:
    """Policies produced from one dataset bundle."""

    sft: Policy | None = None
    phase1: Policy | None = None
    full: Policy | None = None
    t_max: int = 0
    training_seeds: frozenset[int] = frozenset()


def train_variants(
    cfg: Config,
    expert_episodes: list[Episode],
    recovery_episodes: list[Episode],
    failure_episodes: list[Episode],
    seed: int = 0,
    which: tuple[str, ...] = ("sft", "phase1", "full"),
    history_reset: bool = True,
    alpha: float | None = None,
) -> TrainedVariants:
    """Train the SFT baseline, the phase-one policy, and the refined policy.

    ``history_reset=False`` is the ablation: phase one trains on the raw
    (unsliced) recovery episodes with raw histories instead of reset slices.
    """
    out = TrainedVariants(t_max=max_nominal_duration(expert_episodes))
    w = int(cfg.history_window)
    expert_ds = policy_mod.build_frame_dataset(cfg, expert_episodes, w, HistoryMode.RAW)

    rec_ds: FrameDataset | None = None
    if recovery_episodes:
        if history_reset:
            sliced = [slice_recovery_suffix(e) for e in recovery_episodes]
            rec_ds = policy_mod.build_frame_dataset(cfg, sliced, w, HistoryMode.RESET)
        else:
            rec_ds = policy_mod.build_frame_dataset(cfg, recovery_episodes, w, HistoryMode.RAW)

    seeds = {e.seed for e in expert_episodes + recovery_episodes + failure_episodes}
    out.training_seeds = frozenset(seeds)

    if "sft" in which:
        out.sft = init_policy(cfg, seed=seed)
        train_bc(out.sft, expert_ds, None, cfg, seed=seed)
        out.sft.provenance["training_seeds"] = sorted(seeds)
        out.sft.provenance["variant"] = "sft"

    phase1 = None
    if "phase1" in which or "full" in which:
        phase1 = init_policy(cfg, seed=seed)
        train_bc(phase1, expert_ds, rec_ds, cfg, seed=seed)
        phase1.provenance["training_seeds"] = sorted(seeds)
        phase1.provenance["variant"] = "phase1" + ("" if history_reset else "-noreset")
    if "phase1" in which:
        out.phase1 = phase1

    if "full" in which:
        model = init_progress_model(cfg, seed=seed)
        train_alignment(model, expert_episodes, cfg, seed=seed + 1)
        cluster = build_reference_cluster(model, expert_episodes)
        label_cfg = LabelConfig.from_config(cfg, alpha=alpha)
        labeled = [
            label_episode(e, model, cluster, label_cfg)
            for e in expert_episodes + recovery_episodes + failure_episodes
        ]
        full = phase1.clone()
        vcr_ds = policy_mod.build_frame_dataset(cfg, labeled, w, HistoryMode.RAW, require_labels=True)
        train_value_conditioned(full, vcr_ds, cfg, seed=seed)
        full.provenance["variant"] = "full" + ("" if history_reset else "-noreset")
        out.full = full
    return out


# ---------------------------------------------------------------------------
# experiment suites


def _eval_cell(cfg, policy, task_id, error, seeds, t_max, training_seeds, v_fixed=1.0) -> EvalReport:
    return run_protocol(
        cfg, policy_actor_factory(policy, v_fixed=v_fixed), task_id, error, seeds, t_max,
        training_seeds=training_seeds,
    )


def run_scaling(
    cfg: Config,
    task_id: str,
    error: ErrorType,
    expert_episodes: list[Episode],
    recovery_tiers: dict[str, list[Episode]],
    failure_episodes: list[Episode],
    eval_seeds: list[int],
    train_seed: int = 0,
) -> dict:
    """Recovery-data scaling: train the refined policy per tier, evaluate both
    conditions, and emit rows for {SFT baseline, Phase I, tier variants}."""
    rows: list[dict] = []
    tiers = sorted(recovery_tiers.items(), key=lambda kv: len(kv[1]))
    base = train_variants(
        cfg, expert_episodes, tiers[0][1], failure_episodes,
        seed=train_seed, which=("sft", "phase1"),
    )
    cells: dict[str, Policy] = {"baseline-sft": base.sft, "phase-1": base.phase1}
    for tier_name, tier_eps in tiers:
        variant = train_variants(
            cfg, expert_episodes, tier_eps, failure_episodes, seed=train_seed, which=("full",),
        )
        cells[f"full-{tier_name}"] = variant.full
    training_seeds = set(base.training_seeds) | {
        e.seed for eps in recovery_tiers.values() for e in eps
    }
    for name, pol in cells.items():
        std = _eval_cell(cfg, pol, task_id, None, eval_seeds, base.t_max, training_seeds)
        adv = _eval_cell(cfg, pol, task_id, error, eval_seeds, base.t_max, training_seeds)
        rows.append({
            "variant": name,
            "standard_success": f"{std.success_rate:.6f}",
            "adversarial_success": f"{adv.success_rate:.6f}",
            "recovery_rate": f"{adv.recovery_rate:.6f}",
            "verified": adv.n_verified,
            "trials": adv.n_trials,
        })
    return {"rows": rows, "t_max": base.t_max}


def run_ablations(
    cfg: Config,
    which: str,
    task_id: str,
    error: ErrorType,
    expert_episodes: list[Episode],
    recovery_episodes: list[Episode],
    failure_episodes: list[Episode],
    eval_seeds: list[int],
    train_seed: int = 0,
) -> dict:
    """Component ablations: history-reset on/off, value guidance v in {0, 1},
    and the reliability-decay exponent sweep."""
    rows: list[dict] = []
    if which == "history-reset":
        for reset_on in (True, False):
            var = train_variants(
                cfg, expert_episodes, recovery_episodes, failure_episodes,
                seed=train_seed, which=("phase1",), history_reset=reset_on,
            )
            adv = _eval_cell(cfg, var.phase1, task_id, error, eval_seeds, var.t_max, set(var.training_seeds))
            rows.append({
                "variant": "with-reset" if reset_on else "no-reset",
                "adversarial_success": f"{adv.success_rate:.6f}",
                "recovery_rate": f"{adv.recovery_rate:.6f}",
                "verified": adv.n_verified,
            })
    elif which == "value-guidance":
        var = train_variants(
            cfg, expert_episodes, recovery_episodes, failure_episodes,
            seed=train_seed, which=("full",),
        )
        for v in (1.0, 0.0):
            adv = _eval_cell(
                cfg, var.full, task_id, error, eval_seeds, var.t_max, set(var.training_seeds), v_fixed=v,
            )
            rows.append({
                "variant": f"v={v:.1f}",
                "adversarial_success": f"{adv.success_rate:.6f}",
                "recovery_rate": f"{adv.recovery_rate:.6f}",
                "verified": adv.n_verified,
            })
    elif which == "alpha":
        for alpha in (1.0, 3.0, 10.0):
            var = train_variants(
                cfg, expert_episodes, recovery_episodes, failure_episodes,
                seed=train_seed, which=("full",), alpha=alpha,
            )
            adv = _eval_cell(cfg, var.full, task_id, error, eval_seeds, var.t_max, set(var.training_seeds))
            rows.append({
                "variant": f"alpha={alpha:g}",
                "adversarial_success": f"{adv.success_rate:.6f}",
                "recovery_rate": f"{adv.recovery_rate:.6f}",
                "verified": adv.n_verified,
            })
    else:
        raise ValidationError(f"unknown ablation {which!r}")
    return {"ablation": which, "rows": rows}


def write_table(rows: list[dict], out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    out_path.write_text(buf.getvalue())
    return out_path
