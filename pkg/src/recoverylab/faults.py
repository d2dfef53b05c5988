"""Interception-based error injection and paired failure-recovery generation.

Four deterministic overrides can be spliced into a running episode:

  E1 premature_close        grip forced closed during approach
  E2 grasp_slip             grip forced open during lift (30-frame window)
  E3 position_offset        per-axis uniform offset added to grasp targets
  E4 orientation_mismatch   large rotation plus lateral offset on grasp targets

Windows are half-open [t_start, t_start + length): the slip window covers
exactly 30 frames.  Random draws (offsets, rotation) happen exactly once per
episode when the schedule resolves at its trigger phase, so every in-window
action sees the same perturbation.  Recovery scoring elsewhere is gated on
``verify_adverse``: the error must have left its physical signature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from .config import Config
from .errors import InputError, InsufficientData, PlanningError, PlanExhausted, SequencingError, UnrecoverableState
from .planner import (
    CORRECTIVE_PHASES,
    PlanExecutor,
    PlanPhase,
    plan_nominal,
    plan_recovery,
)
from .store import Episode, EpisodeKind, Frame, Outcome, PhaseTag, validate_episode
from .world import (
    ARM_NAMES,
    ArmAction,
    BimanualAction,
    EnvMode,
    GRIP_CLOSED,
    GRIP_OPEN,
    Pose2D,
    WorldState,
    get_task,
    observe,
    reset,
    step,
    success_check,
    wrap_angle,
)


class ErrorKind(Enum):
    E1_PREMATURE_CLOSE = "E1"
    E2_GRASP_SLIP = "E2"
    E3_POSITION_OFFSET = "E3"
    E4_ORIENTATION_MISMATCH = "E4"


@dataclass(frozen=True)
class ErrorType:
    """An error kind plus its numeric parameters."""

    kind: ErrorKind
    hold_steps: int = 0        # E1: forced-close window length
    window_steps: int = 0      # E2/E3/E4: override window length
    offset_max: float = 0.0    # E3: per-axis bound d of U(-d, d)
    dtheta_max: float = 0.0    # E4: rotation bound (draw magnitude in [max/2, max])
    lat_max: float = 0.0       # E4: lateral offset bound (same half-to-full rule)

    @property
    def window_length(self) -> int:
        return self.hold_steps if self.kind is ErrorKind.E1_PREMATURE_CLOSE else self.window_steps


TRIGGER_PHASE = {
    ErrorKind.E1_PREMATURE_CLOSE: PlanPhase.APPROACH,
    ErrorKind.E2_GRASP_SLIP: PlanPhase.LIFT,
    ErrorKind.E3_POSITION_OFFSET: PlanPhase.GRASP,
    ErrorKind.E4_ORIENTATION_MISMATCH: PlanPhase.GRASP,
}


def error_from_config(cfg: Config, kind: ErrorKind | str) -> ErrorType:
    kind = ErrorKind(kind) if isinstance(kind, str) else kind
    if kind is ErrorKind.E1_PREMATURE_CLOSE:
        return ErrorType(kind, hold_steps=int(cfg.e1_hold_steps))
    if kind is ErrorKind.E2_GRASP_SLIP:
        return ErrorType(kind, window_steps=int(cfg.e2_window_steps))
    if kind is ErrorKind.E3_POSITION_OFFSET:
        return ErrorType(kind, window_steps=int(cfg.e3_window_steps), offset_max=float(cfg.e3_offset_max))
    return ErrorType(
        kind,
        window_steps=int(cfg.e4_window_steps),
        dtheta_max=float(cfg.e4_dtheta_max),
        lat_max=float(cfg.e4_lat_max),
    )


@dataclass
class InjectionSchedule:
    """Trigger phase plus the window and draws resolved once per episode."""

    error: ErrorType
    trigger_phase: PlanPhase
    rng_seed: int
    t_start: int | None = None
    t_end: int | None = None
    arm: int | None = None
    object_index: int | None = None
    draws: dict = field(default_factory=dict)

    @property
    def resolved(self) -> bool:
        return self.t_start is not None

    def resolve(self, t: int, arm: int, object_index: int | None) -> None:
        if self.resolved:
            raise SequencingError("injection schedule already resolved")
        self.t_start = t
        self.t_end = t + self.error.window_length
        self.arm = arm
        self.object_index = object_index
        rng = np.random.default_rng([self.rng_seed & 0xFFFFFFFFFFFFFFF, 0xE44])
        kind = self.error.kind
        if kind is ErrorKind.E3_POSITION_OFFSET:
            d = self.error.offset_max
            dp = rng.uniform(-d, d, size=2)
            self.draws = {"dp": (float(dp[0]), float(dp[1]))}
        elif kind is ErrorKind.E4_ORIENTATION_MISMATCH:
            # Rotation magnitude in [max/2, max] guarantees a large mismatch;
            # lateral offset is perpendicular to the (vertical) approach.
            dth = float(rng.uniform(self.error.dtheta_max / 2.0, self.error.dtheta_max))
            dth *= 1.0 if rng.uniform() < 0.5 else -1.0
            lat = float(rng.uniform(self.error.lat_max / 2.0, self.error.lat_max))
            lat *= 1.0 if rng.uniform() < 0.5 else -1.0
            self.draws = {"dtheta": dth, "lat": (lat, 0.0)}

    def in_window(self, t: int) -> bool:
        return self.resolved and self.t_start <= t < self.t_end


def inject(action: BimanualAction, error: ErrorType, t: int, schedule: InjectionSchedule) -> BimanualAction:
    """Apply the error override to the designated arm inside the active window.

    Outside the window the action is returned untouched (the same object).
    """
    if not schedule.resolved:
        raise SequencingError("inject called before the schedule resolved")
    if not schedule.in_window(t):
        return action
    arm = schedule.arm
    original = action.arm(arm)
    kind = error.kind
    if kind is ErrorKind.E1_PREMATURE_CLOSE:
        overridden = ArmAction(target=original.target, grip=GRIP_CLOSED)
    elif kind is ErrorKind.E2_GRASP_SLIP:
        overridden = ArmAction(target=original.target, grip=GRIP_OPEN)
    elif kind is ErrorKind.E3_POSITION_OFFSET:
        dx, dy = schedule.draws["dp"]
        tgt = original.target
        overridden = ArmAction(target=Pose2D(tgt.x + dx, tgt.y + dy, tgt.theta), grip=original.grip)
    else:
        lx, ly = schedule.draws["lat"]
        dth = schedule.draws["dtheta"]
        tgt = original.target
        overridden = ArmAction(
            target=Pose2D(tgt.x + lx, tgt.y + ly, wrap_angle(tgt.theta + dth)), grip=original.grip
        )
    arms = [action.left, action.right]
    arms[arm] = overridden
    return BimanualAction(left=arms[0], right=arms[1])


def verify_adverse(cfg: Config, state: WorldState, error: ErrorType, schedule: InjectionSchedule) -> bool:
    """True iff the error left its physical signature on the state.

    E1/E3/E4: the designated object is not held by the designated arm after
    the grasp attempt.  E2: the object is detached and below carry height.
    """
    if not schedule.resolved:
        return False
    obj = state.objects[schedule.object_index or 0]
    if error.kind is ErrorKind.E2_GRASP_SLIP:
        return obj.held_by is None and obj.pose.y < cfg.lift_y - cfg.pos_tol
    return obj.held_by != schedule.arm


def success_durations(episodes: Iterable[Episode]) -> list[int]:
    return [len(ep.frames) for ep in episodes if ep.outcome is Outcome.SUCCESS]


def max_nominal_duration(episodes: Iterable[Episode]) -> int:
    """Timeout budget: the maximum duration among successful nominal episodes."""
    durations = success_durations(episodes)
    if not durations:
        raise InsufficientData("no successful nominal episodes to derive a timeout from")
    return max(durations)


def detect_failure(t: int, t_max: int) -> bool:
    """Timeout failure indicator: strictly t > t_max."""
    if t_max <= 0:
        raise InputError(f"t_max must be positive, got {t_max}")
    return t > t_max


# ---------------------------------------------------------------------------
# episode generation


def _hold_action(state: WorldState) -> BimanualAction:
    return BimanualAction(
        left=ArmAction(target=state.arm_poses[0], grip=state.grips[0]),
        right=ArmAction(target=state.arm_poses[1], grip=state.grips[1]),
    )


def _episode_id(task_id: str, env_mode: EnvMode, label: str, seed: int) -> str:
    return f"{task_id}-{env_mode.value.lower()}-{label}-s{seed:06d}"


@dataclass
class _Recorder:
    frames: list[Frame] = field(default_factory=list)

    def add(self, cfg: Config, state: WorldState, action: BimanualAction, tag: PhaseTag) -> None:
        self.frames.append(Frame(t=len(self.frames), obs=observe(cfg, state), action=action, phase=tag))

    def retag(self, start: int, tag: PhaseTag) -> None:
        for i in range(start, len(self.frames)):
            self.frames[i] = Frame(
                t=self.frames[i].t, obs=self.frames[i].obs, action=self.frames[i].action,
                phase=tag, v=self.frames[i].v,
            )


def _out_of_time(cfg: Config, n_frames: int, t_max: int | None) -> bool:
    if n_frames >= int(cfg.episode_max_steps):
        return True
    return t_max is not None and detect_failure(n_frames, t_max)


def _perturb_action(action: BimanualAction, rng: np.random.Generator, scale: float) -> BimanualAction:
    def arm(a: ArmAction) -> ArmAction:
        dx, dy = rng.normal(0.0, scale, size=2)
        dth = rng.normal(0.0, 2.0 * scale)
        return ArmAction(
            target=Pose2D(a.target.x + dx, a.target.y + dy, wrap_angle(a.target.theta + dth)),
            grip=a.grip,
        )

    return BimanualAction(left=arm(action.left), right=arm(action.right))


def run_nominal(
    cfg: Config,
    task_id: str,
    env_mode: EnvMode,
    seed: int,
    t_max: int | None = None,
    action_noise: float = 0.0,
) -> Episode:
    """Execute the expert plan with no injection; all frames tagged Nominal.

    ``action_noise`` perturbs the executed targets while the clean command is
    recorded as the label, so demonstrations cover a corrective tube around
    the nominal path instead of a single trajectory.
    """
    state = reset(cfg, task_id, env_mode, seed)
    spec = get_task(cfg, task_id)
    executor = PlanExecutor(cfg, plan_nominal(cfg, task_id, state))
    rng_noise = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFF, 0x401])
    rec = _Recorder()
    succeeded = False
    while not _out_of_time(cfg, len(rec.frames), t_max):
        try:
            action = executor.next_action(state)
        except PlanExhausted:
            break
        rec.add(cfg, state, action, PhaseTag.NOMINAL)
        applied = _perturb_action(action, rng_noise, action_noise) if action_noise > 0 else action
        state = step(cfg, state, applied)
        if executor.steps_in_phase > cfg.phase_stall_limit:
            break
        if success_check(cfg, task_id, state):
            succeeded = True
            break
    succeeded = succeeded or success_check(cfg, task_id, state)
    episode = Episode(
        episode_id=_episode_id(task_id, env_mode, "nom", seed),
        task_id=task_id,
        instruction_id=spec.instruction_id,
        env_mode=env_mode,
        seed=seed,
        error_type=None,
        t_rec=None,
        outcome=Outcome.SUCCESS if succeeded else Outcome.FAILURE,
        kind=EpisodeKind.NOMINAL_SUCCESS if succeeded else EpisodeKind.PURE_FAILURE,
        frames=tuple(rec.frames),
        provenance={"generator": "nominal", "action_noise": action_noise},
    )
    validate_episode(episode)
    return episode


def run_interception(
    cfg: Config,
    task_id: str,
    env_mode: EnvMode,
    error: ErrorType,
    seed: int,
    t_max: int | None = None,
    recover: bool = True,
) -> Episode:
    """Five-step interception: plan, monitor, override, verify, recover.

    The nominal plan executes until the error's trigger phase resolves the
    injection window; in-window actions pass through ``inject``.  When the
    window closes, ``verify_adverse`` decides the episode's fate: verified
    states hand control to the recovery planner (frames tagged Recovery until
    the corrective phases finish, Nominal afterwards), unverified injections
    leave the nominal run untouched and are flagged in provenance.  With
    ``recover=False``, or when recovery is impossible or the timeout fires,
    the episode is finalized as a pure failure with no Recovery tags.
    """
    state = reset(cfg, task_id, env_mode, seed)
    spec = get_task(cfg, task_id)
    executor = PlanExecutor(cfg, plan_nominal(cfg, task_id, state))
    schedule = InjectionSchedule(
        error=error, trigger_phase=TRIGGER_PHASE[error.kind], rng_seed=seed
    )
    rec = _Recorder()
    label = error.kind.value if recover else error.kind.value + "-pf"
    provenance: dict = {
        "generator": "interception",
        "e3_sampling": "per-axis-uniform",
        "adverse_verified": False,
    }

    t_rec: int | None = None
    error_onset: int | None = None
    in_recovery = False
    idle_holds = 0
    outcome = Outcome.FAILURE
    kind = EpisodeKind.PURE_FAILURE

    def finalize_pure_failure() -> None:
        nonlocal t_rec, kind, outcome
        if error_onset is not None:
            rec.retag(error_onset, PhaseTag.ERROR)
        t_rec = None
        kind = EpisodeKind.PURE_FAILURE
        outcome = Outcome.FAILURE

    while True:
        t = len(rec.frames)
        if _out_of_time(cfg, t, t_max):
            finalize_pure_failure()
            break

        # Resolve the schedule the first time the plan enters the trigger phase.
        if not schedule.resolved and not in_recovery:
            try:
                current = executor.current_step(state)
            except PlanExhausted:
                current = None
            if current is not None and current.phase is schedule.trigger_phase:
                schedule.resolve(t, current.arm, current.object_index)
                error_onset = t

        try:
            action = executor.next_action(state)
            exhausted = False
        except PlanExhausted:
            action = _hold_action(state)
            exhausted = True

        if schedule.resolved:
            action = inject(action, error, t, schedule)

        if in_recovery and not exhausted:
            phase = executor.plan.steps[executor.index].phase
            tag = PhaseTag.RECOVERY if phase in CORRECTIVE_PHASES else PhaseTag.NOMINAL
        elif schedule.in_window(t):
            tag = PhaseTag.ERROR
        else:
            tag = PhaseTag.NOMINAL
        rec.add(cfg, state, action, tag)
        state = step(cfg, state, action)

        if not exhausted and executor.steps_in_phase > cfg.phase_stall_limit:
            finalize_pure_failure()
            break

        # Window closes: verify the adverse state and branch.
        if schedule.resolved and len(rec.frames) == schedule.t_end and not in_recovery:
            verified = verify_adverse(cfg, state, error, schedule)
            provenance["adverse_verified"] = bool(verified)
            if verified:
                if not recover:
                    finalize_pure_failure()
                    break
                try:
                    recovery_plan = plan_recovery(cfg, task_id, state)
                except (UnrecoverableState, PlanningError) as exc:
                    provenance["recovery_failed"] = str(exc)
                    finalize_pure_failure()
                    break
                executor = PlanExecutor(cfg, recovery_plan)
                in_recovery = True
                t_rec = len(rec.frames)
            else:
                # Perturbation left no signature: the run stays nominal.
                rec.retag(error_onset, PhaseTag.NOMINAL)
                error_onset = None

        if success_check(cfg, task_id, state):
            if not in_recovery and error_onset is not None and not provenance["adverse_verified"]:
                # Succeeded with the window still open: no adverse state.
                rec.retag(error_onset, PhaseTag.NOMINAL)
                error_onset = None
            outcome = Outcome.SUCCESS
            kind = EpisodeKind.FAILURE_RECOVERY if in_recovery else EpisodeKind.NOMINAL_SUCCESS
            break

        # A finished plan that did not reach success has failed; keep holding
        # only while an open injection window still needs to run out.
        if exhausted:
            waiting_for_window = (
                schedule.resolved and not in_recovery and len(rec.frames) < schedule.t_end
            )
            if not waiting_for_window:
                idle_holds += 1
                if idle_holds > 3:
                    finalize_pure_failure()
                    break
        else:
            idle_holds = 0

    provenance["schedule"] = {
        "trigger_phase": schedule.trigger_phase.value,
        "window": [schedule.t_start, schedule.t_end] if schedule.resolved else None,
        "designated_arm": ARM_NAMES[schedule.arm] if schedule.arm is not None else None,
        "object_index": schedule.object_index,
        "draws": schedule.draws,
    }
    episode = Episode(
        episode_id=_episode_id(task_id, env_mode, label, seed),
        task_id=task_id,
        instruction_id=spec.instruction_id,
        env_mode=env_mode,
        seed=seed,
        error_type=error.kind.value,
        t_rec=t_rec,
        outcome=outcome,
        kind=kind,
        frames=tuple(rec.frames),
        provenance=provenance,
    )
    validate_episode(episode)
    return episode
