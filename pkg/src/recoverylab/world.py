"""Deterministic 2D planar bimanual manipulation world.

The plane is a side view: x is horizontal, y is height.  Two point
end-effectors (left and right arm) move kinematically toward absolute
targets, clamped per axis by v_max*dt and per step by omega_max*dt in
angle.  Grippers are binary-threshold devices: an object attaches when the
grip command crosses closed (>= 0.5) while the object lies within
grasp_radius, and detaches (staying frozen at its current pose) when the
grip crosses open.  There is no gravity and no contact force; state is a
value and ``step``/``observe`` are pure functions of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache

import numpy as np

from .config import Config
from .errors import ConfigError, InputError

LEFT, RIGHT = 0, 1
ARM_NAMES = ("left", "right")
GRIP_CLOSED = 1.0
GRIP_OPEN = 0.0
CLOSE_THRESHOLD = 0.5

# Observation layout: 8 proprio dims + 2 object slots of 7 dims each.
NUM_OBJECT_SLOTS = 2
OBJECT_FEAT_DIM = 7  # present flag + (dx, dy, dtheta) relative to each gripper
PROPRIO_DIM = 8
OBS_DIM = PROPRIO_DIM + NUM_OBJECT_SLOTS * OBJECT_FEAT_DIM


def wrap_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise InputError(f"non-finite pose: {(self.x, self.y, self.theta)}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def distance(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def angle_to(self, other: "Pose2D") -> float:
        return abs(wrap_angle(self.theta - other.theta))


@dataclass(frozen=True)
class ArmAction:
    """Absolute end-effector target plus a grip command in [0, 1]."""

    target: Pose2D
    grip: float

    def __post_init__(self):
        if not math.isfinite(self.grip):
            raise InputError("non-finite grip command")
        object.__setattr__(self, "grip", min(1.0, max(0.0, float(self.grip))))


@dataclass(frozen=True)
class BimanualAction:
    left: ArmAction
    right: ArmAction

    def arm(self, index: int) -> ArmAction:
        return self.left if index == LEFT else self.right


@dataclass(frozen=True)
class ObjectState:
    object_id: str
    pose: Pose2D
    held_by: int | None = None  # LEFT, RIGHT or None


class EnvMode(Enum):
    CLEAN = "Clean"
    RANDOM = "Random"


@dataclass(frozen=True)
class WorldState:
    arm_poses: tuple[Pose2D, Pose2D]
    grips: tuple[float, float]
    objects: tuple[ObjectState, ...]
    t: int
    task_id: str
    rng_seed: int


@dataclass(frozen=True)
class Observation:
    """Policy-visible view of a state.

    ``proprio`` holds absolute arm poses and grips; ``object_feats`` holds
    object poses relative to each gripper plus a presence flag per slot, so
    object features are invariant to rigid translation of the whole scene.
    """

    proprio: tuple[float, ...]
    object_feats: tuple[float, ...]
    instruction_id: int

    def as_vector(self) -> np.ndarray:
        return np.asarray(self.proprio + self.object_feats, dtype=np.float64)


@dataclass(frozen=True)
class Objective:
    """One manipulation goal inside a task: arm moves object to destination.

    ``transfer`` objectives are satisfied as soon as the object becomes
    reachable by the next arm (the hand-off case); ``place`` objectives need
    the object resting within goal_radius of the destination.
    """

    arm: int
    object_index: int
    destination: Pose2D
    kind: str = "place"  # "place" | "transfer"


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction_id: int
    instruction: str
    canonical_objects: tuple[Pose2D, ...]
    random_x_ranges: tuple[tuple[float, float], ...]
    random_theta_range: tuple[float, float]
    goal: Pose2D
    objectives: tuple[Objective, ...]


@lru_cache(maxsize=8)
def _build_task_registry(ty: float) -> dict[str, TaskSpec]:
    return {
        "pick-place": TaskSpec(
            task_id="pick-place",
            instruction_id=0,
            instruction="move the block to the marked spot",
            canonical_objects=(Pose2D(0.34, ty, 0.0),),
            random_x_ranges=((0.18, 0.46),),
            random_theta_range=(-0.3, 0.3),
            goal=Pose2D(-0.06, ty, 0.0),
            objectives=(Objective(RIGHT, 0, Pose2D(-0.06, ty, 0.0)),),
        ),
        "stack-two": TaskSpec(
            task_id="stack-two",
            instruction_id=1,
            instruction="gather both blocks onto the target",
            canonical_objects=(Pose2D(-0.3, ty, 0.0), Pose2D(0.3, ty, 0.0)),
            random_x_ranges=((-0.44, -0.16), (0.16, 0.44)),
            random_theta_range=(-0.3, 0.3),
            goal=Pose2D(0.0, ty, 0.0),
            objectives=(
                Objective(LEFT, 0, Pose2D(0.0, ty, 0.0)),
                Objective(RIGHT, 1, Pose2D(0.0, ty, 0.0)),
            ),
        ),
        "bimanual-handover": TaskSpec(
            task_id="bimanual-handover",
            instruction_id=2,
            instruction="pass the block across and set it on the far spot",
            canonical_objects=(Pose2D(-0.34, ty, 0.0),),
            random_x_ranges=((-0.44, -0.2),),
            random_theta_range=(-0.3, 0.3),
            goal=Pose2D(0.34, ty, 0.0),
            objectives=(
                Objective(LEFT, 0, Pose2D(0.0, ty, 0.0), kind="transfer"),
                Objective(RIGHT, 0, Pose2D(0.34, ty, 0.0)),
            ),
        ),
    }


def task_registry(cfg: Config) -> dict[str, TaskSpec]:
    return _build_task_registry(float(cfg.table_y))


def get_task(cfg: Config, task_id: str) -> TaskSpec:
    registry = task_registry(cfg)
    if task_id not in registry:
        raise ConfigError(f"unknown task {task_id!r}; known: {sorted(registry)}")
    return registry[task_id]


def instruction_ids(cfg: Config) -> dict[str, int]:
    return {tid: spec.instruction_id for tid, spec in task_registry(cfg).items()}


def arm_reach(cfg: Config, arm: int) -> tuple[float, float, float, float]:
    """(x_min, x_max, y_min, y_max) rectangle the arm can occupy."""
    if arm == LEFT:
        return (cfg.workspace_x_min, cfg.left_reach_x_max, cfg.workspace_y_min, cfg.workspace_y_max)
    return (cfg.right_reach_x_min, cfg.workspace_x_max, cfg.workspace_y_min, cfg.workspace_y_max)


def in_reach(cfg: Config, arm: int, pose: Pose2D, slack: float = 0.0) -> bool:
    x_min, x_max, y_min, y_max = arm_reach(cfg, arm)
    return (x_min - slack <= pose.x <= x_max + slack) and (y_min - slack <= pose.y <= y_max + slack)


def in_workspace(cfg: Config, pose: Pose2D) -> bool:
    return (cfg.workspace_x_min <= pose.x <= cfg.workspace_x_max
            and cfg.workspace_y_min <= pose.y <= cfg.workspace_y_max)


_HOME = {LEFT: (-0.38, 0.34), RIGHT: (0.38, 0.34)}


def reset(cfg: Config, task_id: str, env_mode: EnvMode, seed: int) -> WorldState:
    """Instantiate a task. Clean mode is the canonical layout; Random mode
    samples object x positions and orientations inside task regions, fully
    determined by the seed."""
    spec = get_task(cfg, task_id)
    poses = list(spec.canonical_objects)
    if env_mode is EnvMode.RANDOM:
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFF, 0x51CE])
        lo, hi = spec.random_theta_range
        poses = [
            Pose2D(float(rng.uniform(*spec.random_x_ranges[i])), p.y, float(rng.uniform(lo, hi)))
            for i, p in enumerate(poses)
        ]
    objects = tuple(
        ObjectState(object_id=f"obj{i}", pose=p, held_by=None) for i, p in enumerate(poses)
    )
    arms = tuple(Pose2D(x, y, 0.0) for x, y in (_HOME[LEFT], _HOME[RIGHT]))
    return WorldState(
        arm_poses=arms, grips=(GRIP_OPEN, GRIP_OPEN), objects=objects,
        t=0, task_id=task_id, rng_seed=int(seed),
    )


def _move_toward(cfg: Config, arm: int, current: Pose2D, target: Pose2D) -> Pose2D:
    step_lin = cfg.v_max * cfg.dt
    step_ang = cfg.omega_max * cfg.dt
    nx = current.x + min(step_lin, max(-step_lin, target.x - current.x))
    ny = current.y + min(step_lin, max(-step_lin, target.y - current.y))
    dth = wrap_angle(target.theta - current.theta)
    nth = current.theta + min(step_ang, max(-step_ang, dth))
    x_min, x_max, y_min, y_max = arm_reach(cfg, arm)
    return Pose2D(min(x_max, max(x_min, nx)), min(y_max, max(y_min, ny)), nth)


def step(cfg: Config, state: WorldState, action: BimanualAction) -> WorldState:
    """Advance one timestep. Motion first, then grip-crossing resolution."""
    for arm in (LEFT, RIGHT):
        a = action.arm(arm)
        if not all(map(math.isfinite, (a.target.x, a.target.y, a.target.theta, a.grip))):
            raise InputError("non-finite action")

    new_arms = tuple(
        _move_toward(cfg, arm, state.arm_poses[arm], action.arm(arm).target)
        for arm in (LEFT, RIGHT)
    )
    new_grips = (action.left.grip, action.right.grip)

    objects = list(state.objects)
    # Open crossings release first: a dropped object keeps its pre-motion pose.
    for arm in (LEFT, RIGHT):
        if state.grips[arm] >= CLOSE_THRESHOLD and new_grips[arm] < CLOSE_THRESHOLD:
            for i, obj in enumerate(objects):
                if obj.held_by == arm:
                    objects[i] = replace(obj, held_by=None)

    # Objects still held track their holder exactly.
    for i, obj in enumerate(objects):
        if obj.held_by is not None:
            objects[i] = replace(obj, pose=new_arms[obj.held_by])

    # Close crossings attach the nearest unheld object inside grasp_radius.
    for arm in (LEFT, RIGHT):
        if state.grips[arm] < CLOSE_THRESHOLD and new_grips[arm] >= CLOSE_THRESHOLD:
            best, best_dist = None, cfg.grasp_radius
            for i, obj in enumerate(objects):
                if obj.held_by is not None:
                    continue
                d = obj.pose.distance(new_arms[arm])
                if d <= best_dist:
                    best, best_dist = i, d
            if best is not None:
                objects[best] = replace(objects[best], pose=new_arms[arm], held_by=arm)

    return replace(
        state, arm_poses=new_arms, grips=new_grips, objects=tuple(objects), t=state.t + 1
    )


def observe(cfg: Config, state: WorldState) -> Observation:
    """Pure projection of state onto the policy-visible observation."""
    spec = get_task(cfg, state.task_id)
    proprio: list[float] = []
    for arm in (LEFT, RIGHT):
        p = state.arm_poses[arm]
        proprio.extend((p.x, p.y, p.theta, state.grips[arm]))
    feats: list[float] = []
    for slot in range(NUM_OBJECT_SLOTS):
        if slot < len(state.objects):
            o = state.objects[slot].pose
            feats.append(1.0)
            for arm in (LEFT, RIGHT):
                g = state.arm_poses[arm]
                feats.extend((o.x - g.x, o.y - g.y, wrap_angle(o.theta - g.theta)))
        else:
            feats.extend([0.0] * OBJECT_FEAT_DIM)
    return Observation(
        proprio=tuple(proprio), object_feats=tuple(feats), instruction_id=spec.instruction_id
    )


def objective_satisfied(cfg: Config, obj_state: ObjectState, objective: Objective) -> bool:
    if objective.kind == "transfer":
        # Satisfied once the next arm can take over (object inside its reach,
        # with margin for the grasp radius), resting free.
        next_arm = RIGHT if objective.arm == LEFT else LEFT
        return obj_state.held_by is None and in_reach(
            cfg, next_arm, obj_state.pose, slack=-cfg.grasp_radius
        )
    return (
        obj_state.held_by is None
        and obj_state.pose.distance(objective.destination) <= cfg.goal_radius
    )


def success_check(cfg: Config, task_id: str, state: WorldState) -> bool:
    """True iff every place objective holds (objects resting at their goals)."""
    spec = get_task(cfg, task_id)
    for objective in spec.objectives:
        if objective.kind != "place":
            continue
        if not objective_satisfied(cfg, state.objects[objective.object_index], objective):
            return False
    return True
