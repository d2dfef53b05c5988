"""Scripted expert planner.

Produces nominal reference plans for each task and corrective plans from
adverse mid-task states.  Plans are immutable sequences of single-arm phase
steps; a PlanExecutor walks them closed-loop, advancing a phase once its
completion predicate holds against the live state.

Recovery plans are built from the adverse state alone (never from how the
failure happened): the planner re-reads the object's live pose, re-opens an
erroneously closed gripper, re-grasps, and then resumes the remaining task
objectives with ordinary phases.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .config import Config
from .errors import PlanExhausted, PlanningError, UnrecoverableState
from .world import (
    ArmAction,
    BimanualAction,
    LEFT,
    Objective,
    Pose2D,
    RIGHT,
    GRIP_CLOSED,
    GRIP_OPEN,
    CLOSE_THRESHOLD,
    WorldState,
    get_task,
    in_reach,
    in_workspace,
    objective_satisfied,
)


class PlanPhase(Enum):
    APPROACH = "Approach"
    GRASP = "Grasp"
    LIFT = "Lift"
    TRANSPORT = "Transport"
    PLACE = "Place"
    RELEASE = "Release"
    REOPEN = "ReOpen"
    REPERCEIVE = "RePerceive"
    REAPPROACH = "ReApproach"
    REGRASP = "ReGrasp"


NOMINAL_PHASES = frozenset(
    {PlanPhase.APPROACH, PlanPhase.GRASP, PlanPhase.LIFT,
     PlanPhase.TRANSPORT, PlanPhase.PLACE, PlanPhase.RELEASE}
)
CORRECTIVE_PHASES = frozenset(
    {PlanPhase.REOPEN, PlanPhase.REPERCEIVE, PlanPhase.REAPPROACH, PlanPhase.REGRASP}
)


class Completion(Enum):
    REACH = "reach"          # arm pose within pos/ang tolerance of target
    HOLDING = "holding"      # designated object held by the step's arm
    RELEASED = "released"    # step's arm no longer holds anything
    GRIP_OPEN = "grip_open"  # arm grip state below the close threshold
    ONE_STEP = "one_step"    # completes after a single step


@dataclass(frozen=True)
class PlanStep:
    phase: PlanPhase
    arm: int
    target: Pose2D
    grip: float
    completion: Completion
    object_index: int | None = None


@dataclass(frozen=True)
class Plan:
    task_id: str
    steps: tuple[PlanStep, ...]

    def __len__(self) -> int:
        return len(self.steps)


def _pick_and_place_steps(
    cfg: Config,
    arm: int,
    object_index: int,
    object_pose: Pose2D,
    destination: Pose2D,
    corrective: bool,
    grip_closed_now: bool,
) -> list[PlanStep]:
    """Phase sequence moving one object to a destination with one arm.

    The approach goes through a standoff above the object before descending,
    and the grasp step dwells briefly open before closing (see PlanExecutor),
    so that closing happens where the commanded grasp target actually is.
    """
    lift_y = cfg.lift_y
    th = object_pose.theta
    standoff_y = min(object_pose.y + cfg.approach_standoff, cfg.workspace_y_max)
    steps: list[PlanStep] = []
    if corrective:
        if grip_closed_now:
            steps.append(PlanStep(PlanPhase.REOPEN, arm, object_pose, GRIP_OPEN, Completion.GRIP_OPEN))
        steps.append(PlanStep(PlanPhase.REPERCEIVE, arm, object_pose, GRIP_OPEN, Completion.ONE_STEP))
        approach, grasp = PlanPhase.REAPPROACH, PlanPhase.REGRASP
    else:
        approach, grasp = PlanPhase.APPROACH, PlanPhase.GRASP
    steps += [
        PlanStep(approach, arm, Pose2D(object_pose.x, standoff_y, th), GRIP_OPEN, Completion.REACH, object_index),
        PlanStep(approach, arm, object_pose, GRIP_OPEN, Completion.REACH, object_index),
        PlanStep(grasp, arm, object_pose, GRIP_CLOSED, Completion.HOLDING, object_index),
        PlanStep(PlanPhase.LIFT, arm, Pose2D(object_pose.x, lift_y, th), GRIP_CLOSED, Completion.REACH, object_index),
        PlanStep(PlanPhase.TRANSPORT, arm, Pose2D(destination.x, lift_y, th), GRIP_CLOSED, Completion.REACH, object_index),
        PlanStep(PlanPhase.PLACE, arm, Pose2D(destination.x, destination.y, th), GRIP_CLOSED, Completion.REACH, object_index),
        PlanStep(PlanPhase.RELEASE, arm, Pose2D(destination.x, destination.y, th), GRIP_OPEN, Completion.RELEASED, object_index),
    ]
    return steps


def _carry_on_steps(cfg: Config, arm: int, object_index: int, here: Pose2D, destination: Pose2D) -> list[PlanStep]:
    """Finish an objective whose object is already held by the right arm."""
    th = here.theta
    return [
        PlanStep(PlanPhase.LIFT, arm, Pose2D(here.x, cfg.lift_y, th), GRIP_CLOSED, Completion.REACH, object_index),
        PlanStep(PlanPhase.TRANSPORT, arm, Pose2D(destination.x, cfg.lift_y, th), GRIP_CLOSED, Completion.REACH, object_index),
        PlanStep(PlanPhase.PLACE, arm, Pose2D(destination.x, destination.y, th), GRIP_CLOSED, Completion.REACH, object_index),
        PlanStep(PlanPhase.RELEASE, arm, Pose2D(destination.x, destination.y, th), GRIP_OPEN, Completion.RELEASED, object_index),
    ]


def remaining_objectives(cfg: Config, task_id: str, state: WorldState) -> list[Objective]:
    spec = get_task(cfg, task_id)
    return [
        objective for objective in spec.objectives
        if not objective_satisfied(cfg, state.objects[objective.object_index], objective)
    ]


def _check_objective_feasible(cfg: Config, objective: Objective, object_pose: Pose2D) -> None:
    if not in_workspace(cfg, object_pose):
        raise PlanningError(
            f"object at ({object_pose.x:.3f}, {object_pose.y:.3f}) is outside the workspace"
        )
    if not in_reach(cfg, objective.arm, object_pose, slack=cfg.grasp_radius):
        raise PlanningError(
            f"object at ({object_pose.x:.3f}, {object_pose.y:.3f}) is out of reach "
            f"of the {('left', 'right')[objective.arm]} arm"
        )
    if not in_reach(cfg, objective.arm, objective.destination):
        raise PlanningError("objective destination out of reach")


def plan_task_from_state(cfg: Config, task_id: str, state: WorldState, corrective_first: bool = False) -> Plan:
    """Plan the remaining objectives of a task from an arbitrary valid state.

    With ``corrective_first`` the first unmet objective starts with the
    recovery phases (ReOpen if needed, RePerceive, ReApproach, ReGrasp)
    re-targeted to the object's current pose.
    """
    todo = remaining_objectives(cfg, task_id, state)
    if not todo:
        raise PlanningError("task already satisfied; nothing to plan")
    steps: list[PlanStep] = []
    # Later objectives see the pose each object will have after earlier
    # objectives have moved it.
    virtual_pose = {i: o.pose for i, o in enumerate(state.objects)}
    for k, objective in enumerate(todo):
        obj = state.objects[objective.object_index]
        pose = virtual_pose[objective.object_index]
        _check_objective_feasible(cfg, objective, pose)
        if k == 0 and obj.held_by is not None:
            if obj.held_by != objective.arm:
                raise PlanningError("object held by the wrong arm")
            steps += _carry_on_steps(cfg, objective.arm, objective.object_index, pose, objective.destination)
        else:
            steps += _pick_and_place_steps(
                cfg, objective.arm, objective.object_index, pose, objective.destination,
                corrective=(corrective_first and k == 0),
                grip_closed_now=state.grips[objective.arm] >= CLOSE_THRESHOLD,
            )
        virtual_pose[objective.object_index] = Pose2D(
            objective.destination.x, objective.destination.y, pose.theta
        )
    return Plan(task_id=task_id, steps=tuple(steps))


def plan_nominal(cfg: Config, task_id: str, state: WorldState) -> Plan:
    """Reference plan from a reset state; deterministic in (task, state)."""
    return plan_task_from_state(cfg, task_id, state, corrective_first=False)


def plan_recovery(cfg: Config, task_id: str, adverse_state: WorldState) -> Plan:
    """Corrective plan from a verified adverse state.

    Conditions only on the state itself: re-opens an erroneously closed
    gripper, re-reads the object's current pose, re-grasps it there, then
    resumes the ordinary task phases.  Raises UnrecoverableState when the
    object ended up where the designated arm cannot retrieve it.
    """
    todo = remaining_objectives(cfg, task_id, adverse_state)
    if not todo:
        raise PlanningError("state is not adverse; task already satisfied")
    first = todo[0]
    obj = adverse_state.objects[first.object_index]
    if not in_workspace(cfg, obj.pose) or not in_reach(cfg, first.arm, obj.pose, slack=cfg.grasp_radius):
        raise UnrecoverableState(
            f"object at ({obj.pose.x:.3f}, {obj.pose.y:.3f}) cannot be retrieved by the "
            f"{('left', 'right')[first.arm]} arm"
        )
    return plan_task_from_state(cfg, task_id, adverse_state, corrective_first=True)


class PlanExecutor:
    """Closed-loop executor: advances phases as completion predicates fire."""

    def __init__(self, cfg: Config, plan: Plan):
        self.cfg = cfg
        self.plan = plan
        self.index = 0
        self.steps_in_phase = 0

    def _complete(self, step: PlanStep, state: WorldState) -> bool:
        arm_pose = state.arm_poses[step.arm]
        if step.completion is Completion.REACH:
            return (arm_pose.distance(step.target) <= self.cfg.pos_tol
                    and arm_pose.angle_to(step.target) <= self.cfg.ang_tol)
        if step.completion is Completion.HOLDING:
            return state.objects[step.object_index].held_by == step.arm
        if step.completion is Completion.RELEASED:
            return all(o.held_by != step.arm for o in state.objects)
        if step.completion is Completion.GRIP_OPEN:
            return state.grips[step.arm] < CLOSE_THRESHOLD
        if step.completion is Completion.ONE_STEP:
            return self.steps_in_phase >= 1
        raise AssertionError(step.completion)

    def current_step(self, state: WorldState) -> PlanStep:
        """Skip completed phases and return the active one."""
        while self.index < len(self.plan.steps):
            step = self.plan.steps[self.index]
            if not self._complete(step, state):
                return step
            self.index += 1
            self.steps_in_phase = 0
        raise PlanExhausted("plan complete")

    def next_action(self, state: WorldState) -> BimanualAction:
        step = self.current_step(state)
        grip = step.grip
        if step.completion is Completion.HOLDING and self.steps_in_phase < self.cfg.grasp_settle_steps:
            # Dwell open so the close happens at the commanded grasp target,
            # not wherever the approach happened to end.
            grip = GRIP_OPEN
        self.steps_in_phase += 1
        actions: list[ArmAction] = []
        for arm in (LEFT, RIGHT):
            if arm == step.arm:
                actions.append(ArmAction(target=step.target, grip=grip))
            else:
                # Idle arm holds pose and grip so no accidental crossing occurs.
                actions.append(ArmAction(target=state.arm_poses[arm], grip=state.grips[arm]))
        return BimanualAction(left=actions[LEFT], right=actions[RIGHT])


def next_action(executor: PlanExecutor, state: WorldState) -> BimanualAction:
    """Module-level alias kept for symmetry with the other planner entry points."""
    return executor.next_action(state)
