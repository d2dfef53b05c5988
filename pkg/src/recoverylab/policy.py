"""Value-conditioned policy with explicit-gradient training.

The network maps [flattened observation history | current observation |
instruction embedding | value token] through one tanh hidden layer to an
8-dim bimanual action (absolute targets; grips squashed to [0, 1]).  The
value token is a tiny perceptron of the scalar v, so the same trunk can
express different action modes for the same observation at different
desired-progress levels.

Training treats actions as a fixed-variance Gaussian around the network
mean, so the negative log-likelihood is squared error over 2*sigma^2 plus a
constant; both the NLL and plain-MSE paths are exposed and differ exactly by
that factor.  Phase one imitates expert data (raw histories) mixed with
reset-recovery data (sliced histories) at weight lambda, with v pinned to
1.0.  The refinement phase trains on the labeled mixed dataset with raw
histories and per-frame v driving the token.  Deployment pins v = 1.0 and
uses the ordinary rolling history buffer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .errors import InputError, StorageError, TrainingError, ValidationError
from .faults import ErrorKind, ErrorType, InjectionSchedule, inject, verify_adverse
from .nets import Adam, Params, init_linear, init_mlp, mlp_backward, mlp_forward
from .store import (
    Episode,
    EpisodeKind,
    Frame,
    HistoryMode,
    Outcome,
    PhaseTag,
    build_history,
)
from .world import (
    ARM_NAMES,
    ArmAction,
    BimanualAction,
    EnvMode,
    LEFT,
    OBS_DIM,
    Observation,
    Pose2D,
    RIGHT,
    WorldState,
    get_task,
    instruction_ids,
    observe,
    reset,
    step,
    success_check,
    wrap_angle,
)

ACTION_DIM = 8
GRIP_DIMS = (3, 7)
# Pose dims of the action vector and the proprio dims they anchor to.
POSE_DIMS = (0, 1, 2, 4, 5, 6)
THETA_DIMS = (2, 6)
CHECKPOINT_SCHEMA = 1


def action_to_vector(action: BimanualAction) -> np.ndarray:
    vals = []
    for arm_action in (action.left, action.right):
        t = arm_action.target
        vals.extend((t.x, t.y, t.theta, arm_action.grip))
    return np.asarray(vals, dtype=np.float64)


def action_from_vector(cfg: Config, vec: np.ndarray) -> BimanualAction:
    """Clamp raw network output into a valid workspace action."""
    def arm(offset: int) -> ArmAction:
        x = float(np.clip(vec[offset + 0], cfg.workspace_x_min, cfg.workspace_x_max))
        y = float(np.clip(vec[offset + 1], cfg.workspace_y_min, cfg.workspace_y_max))
        theta = wrap_angle(float(vec[offset + 2]))
        grip = float(np.clip(vec[offset + 3], 0.0, 1.0))
        return ArmAction(target=Pose2D(x, y, theta), grip=grip)

    return BimanualAction(left=arm(0), right=arm(4))


@dataclass
class Policy:
    """Network parameters plus the shape/config metadata they assume.

    Observations are standardized with per-dim stats fitted on the first
    training set the policy sees; the stats ride along in the checkpoint so
    deployment uses the exact training-time scaling.
    """

    params: Params
    history_w: int
    obs_dim: int
    n_instructions: int
    value_token_dim: int
    instr_embed_dim: int
    hidden_dim: int
    sigma: float
    obs_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    obs_std: np.ndarray = field(default_factory=lambda: np.ones(0))
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.obs_mean.size == 0:
            self.obs_mean = np.zeros(self.obs_dim)
        if self.obs_std.size == 0:
            self.obs_std = np.ones(self.obs_dim)

    @property
    def trunk_in_dim(self) -> int:
        return self.history_w * self.obs_dim + self.obs_dim + self.instr_embed_dim + self.value_token_dim

    def clone(self) -> "Policy":
        return Policy(
            params={k: v.copy() for k, v in self.params.items()},
            history_w=self.history_w, obs_dim=self.obs_dim,
            n_instructions=self.n_instructions, value_token_dim=self.value_token_dim,
            instr_embed_dim=self.instr_embed_dim, hidden_dim=self.hidden_dim,
            sigma=self.sigma, obs_mean=self.obs_mean.copy(), obs_std=self.obs_std.copy(),
            provenance=dict(self.provenance),
        )


def fit_normalizer(policy: Policy, dataset: "FrameDataset") -> None:
    """Fit per-dim observation stats once, on the first dataset trained on.

    The std floor is a physical scale (5 cm / 0.05 rad / 0.05 grip), so dims
    that happen to be near-constant in training (an idle arm's grip, say)
    cannot blow small deploy-time deviations into off-manifold input spikes.
    """
    policy.obs_mean = dataset.obs.mean(axis=0)
    policy.obs_std = np.maximum(dataset.obs.std(axis=0), 0.05)
    policy.provenance["normalizer_fitted"] = True


def init_policy(cfg: Config, seed: int = 0) -> Policy:
    rng = np.random.default_rng([int(seed), 0xB0])
    n_instr = len(instruction_ids(cfg))
    w = int(cfg.history_window)
    vdim = int(cfg.value_token_dim)
    edim = int(cfg.instr_embed_dim)
    hidden = int(cfg.policy_hidden)
    params: Params = {}
    val_w, val_b = init_linear(rng, 1, vdim)
    params["val_w"], params["val_b"] = val_w, val_b
    params["instr"] = rng.normal(0.0, 0.5, size=(n_instr, edim))
    trunk_in = w * OBS_DIM + OBS_DIM + edim + vdim
    params.update(init_mlp(rng, "trunk", trunk_in, hidden, ACTION_DIM))
    return Policy(
        params=params, history_w=w, obs_dim=OBS_DIM, n_instructions=n_instr,
        value_token_dim=vdim, instr_embed_dim=edim, hidden_dim=hidden,
        sigma=float(cfg.sigma),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _forward_batch(policy: Policy, hist: np.ndarray, obs: np.ndarray, instr: np.ndarray, v: np.ndarray):
    """Mean actions for a batch; returns (mu, cache) for backprop."""
    p = policy.params
    batch = obs.shape[0]
    mean, std = policy.obs_mean, policy.obs_std
    obs_n = (obs - mean) / std
    hist_rows = hist.reshape(batch, policy.history_w, policy.obs_dim)
    # Padding rows are all-zero by construction; keep them zero after
    # normalization so padding stays a neutral input, not a -mean/std outlier.
    pad = np.all(hist_rows == 0.0, axis=2, keepdims=True)
    hist_n = np.where(pad, 0.0, (hist_rows - mean) / std).reshape(batch, -1)
    e_val = np.tanh(v[:, None] @ p["val_w"] + p["val_b"])
    instr_e = p["instr"][instr]
    x = np.concatenate([hist_n, obs_n, instr_e, e_val], axis=1)
    out, trunk_cache = mlp_forward(p, "trunk", x)
    mu = out.copy()
    for g in GRIP_DIMS:
        mu[:, g] = _sigmoid(out[:, g])
    for d in POSE_DIMS:
        mu[:, d] = out[:, d] + obs[:, d]  # anchored: head predicts pose displacement
    return mu, (x, trunk_cache, e_val, instr, v, mu)


def forward(policy: Policy, cfg: Config, obs: Observation, history: np.ndarray, instruction_id: int, v: float) -> BimanualAction:
    """Deterministic mean action for one observation; grips squashed to [0, 1]."""
    if not (0.0 <= v <= 1.0):
        raise InputError(f"v must lie in [0, 1], got {v}")
    obs_vec = obs.as_vector()
    if history.shape != (policy.history_w, policy.obs_dim) or obs_vec.shape[0] != policy.obs_dim:
        raise InputError(
            f"dimension mismatch: history {history.shape}, obs {obs_vec.shape}, "
            f"expected ({policy.history_w}, {policy.obs_dim})"
        )
    mu, _ = _forward_batch(
        policy,
        history.reshape(1, -1),
        obs_vec[None, :],
        np.array([instruction_id]),
        np.array([float(v)]),
    )
    return action_from_vector(cfg, mu[0])


def loss_and_grads(
    policy: Policy,
    hist: np.ndarray,
    obs: np.ndarray,
    instr: np.ndarray,
    v: np.ndarray,
    targets: np.ndarray,
    loss_kind: str = "nll",
) -> tuple[float, Params]:
    """Batch-mean loss and analytic gradients.

    ``nll`` is the Gaussian negative log-likelihood sum (a - mu)^2 / (2 sigma^2)
    per frame; ``mse`` drops the 1/(2 sigma^2) factor.  Gradients of the two
    differ by exactly that constant.
    """
    p = policy.params
    mu, cache = _forward_batch(policy, hist, obs, instr, v)
    x, trunk_cache, e_val, instr_idx, v_in, _ = cache
    diff = mu - targets
    batch = mu.shape[0]
    if loss_kind == "nll":
        scale = 1.0 / (2.0 * policy.sigma ** 2)
    elif loss_kind == "mse":
        scale = 1.0
    else:
        raise InputError(f"unknown loss_kind {loss_kind!r}")
    loss = float(scale * np.sum(diff * diff) / batch)

    dmu = (2.0 * scale / batch) * diff
    dout = dmu.copy()
    for g in GRIP_DIMS:
        dout[:, g] = dmu[:, g] * mu[:, g] * (1.0 - mu[:, g])
    grads: Params = {}
    dx = mlp_backward(p, "trunk", trunk_cache, dout, grads)

    w = policy.history_w * policy.obs_dim
    o = policy.obs_dim
    e = policy.instr_embed_dim
    d_instr = dx[:, w + o: w + o + e]
    d_eval = dx[:, w + o + e:]

    grads["instr"] = np.zeros_like(p["instr"])
    np.add.at(grads["instr"], instr_idx, d_instr)

    dpre_val = d_eval * (1.0 - e_val * e_val)
    grads["val_w"] = v_in[None, :] @ dpre_val
    grads["val_b"] = dpre_val.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# frame datasets


@dataclass
class FrameDataset:
    """Flattened (history, obs, instruction, action, value) training arrays.

    ``sample_pool`` repeats grip-transition-adjacent frame indices so batches
    concentrate on the decision boundary where grasp timing is learned.
    """

    hist: np.ndarray      # (N, W * obs_dim)
    obs: np.ndarray       # (N, obs_dim)
    instr: np.ndarray     # (N,)
    actions: np.ndarray   # (N, ACTION_DIM)
    values: np.ndarray    # (N,)
    history_mode: HistoryMode
    seeds: frozenset[int]
    sample_pool: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.sample_pool.size == 0:
            self.sample_pool = np.arange(self.obs.shape[0], dtype=np.int64)

    def __len__(self) -> int:
        return self.obs.shape[0]


def local_waypoint(cfg: Config, obs_vec: np.ndarray, action_vec: np.ndarray) -> np.ndarray:
    """Replace a far target with the dynamically equivalent one-step waypoint.

    The simulator clamps motion per axis at v_max*dt (omega_max*dt in angle),
    so any target along the clamped direction produces identical motion; the
    nearest such target keeps regression labels within one step of the arm
    and makes the fit scale with the step size instead of the workspace.
    """
    step_lin = cfg.v_max * cfg.dt
    step_ang = cfg.omega_max * cfg.dt
    wp = action_vec.copy()
    for d in POSE_DIMS:
        anchor = obs_vec[d]
        if d in THETA_DIMS:
            diff = wrap_angle(action_vec[d] - anchor)
            wp[d] = anchor + np.clip(diff, -step_ang, step_ang)
        else:
            wp[d] = anchor + np.clip(action_vec[d] - anchor, -step_lin, step_lin)
    return wp


def build_frame_dataset(
    cfg: Config,
    episodes: list[Episode],
    w: int,
    mode: HistoryMode,
    require_labels: bool = False,
    pinned_value: float = 1.0,
) -> FrameDataset:
    if not episodes:
        raise TrainingError("cannot build a dataset from zero episodes")
    hists, obs_rows, instr_rows, act_rows, val_rows = [], [], [], [], []
    boundary: list[int] = []
    row = 0
    for ep in episodes:
        flips = [
            f.t for prev, f in zip(ep.frames, ep.frames[1:])
            if (action_to_vector(prev.action)[list(GRIP_DIMS)] >= 0.5).tolist()
            != (action_to_vector(f.action)[list(GRIP_DIMS)] >= 0.5).tolist()
        ]
        for frame in ep.frames:
            if require_labels and frame.v is None:
                raise ValidationError(f"{ep.episode_id}: frame {frame.t} is unlabeled")
            window = build_history(ep, frame.t, w, mode)
            obs_vec = frame.obs.as_vector()
            hists.append(window.entries.ravel())
            obs_rows.append(obs_vec)
            instr_rows.append(ep.instruction_id)
            act_rows.append(local_waypoint(cfg, obs_vec, action_to_vector(frame.action)))
            val_rows.append(pinned_value if frame.v is None else frame.v)
            if any(abs(frame.t - ft) <= 2 for ft in flips):
                boundary.append(row)
            row += 1
    n = row
    pool = np.concatenate([np.arange(n, dtype=np.int64)] + [np.asarray(boundary, dtype=np.int64)] * 3) \
        if boundary else np.arange(n, dtype=np.int64)
    return FrameDataset(
        hist=np.stack(hists),
        obs=np.stack(obs_rows),
        instr=np.asarray(instr_rows, dtype=np.int64),
        actions=np.stack(act_rows),
        values=np.asarray(val_rows, dtype=np.float64),
        history_mode=mode,
        seeds=frozenset(ep.seed for ep in episodes),
        sample_pool=pool,
    )


def _jitter_mask() -> np.ndarray:
    """Pose-like observation dims; grip states and presence flags stay exact."""
    mask = np.ones(OBS_DIM)
    mask[3] = mask[7] = 0.0  # proprio grips
    mask[8] = mask[15] = 0.0  # object-slot presence flags
    return mask


_JITTER_MASK = _jitter_mask()


def _batch(ds: FrameDataset, idx: np.ndarray, pin_value: float | None,
           rng: np.random.Generator | None = None, jitter: float = 0.0):
    v = np.full(len(idx), pin_value) if pin_value is not None else ds.values[idx]
    hist, obs = ds.hist[idx], ds.obs[idx]
    if rng is not None and jitter > 0.0:
        # Jitter pose inputs (not labels): smooths the learned function
        # against the small state deviations closed-loop execution produces.
        # Grip states, presence flags, and padding rows stay exact.
        pad = np.all(hist.reshape(len(idx), -1, obs.shape[1]) == 0.0, axis=2)
        hist = hist + rng.normal(0.0, jitter, size=hist.shape) * np.tile(_JITTER_MASK, hist.shape[1] // OBS_DIM)
        hist.reshape(len(idx), -1, obs.shape[1])[pad] = 0.0
        obs = obs + rng.normal(0.0, jitter, size=obs.shape) * _JITTER_MASK
    return hist, obs, ds.instr[idx], v, ds.actions[idx]


def _merge_grads(base: Params, extra: Params, weight: float) -> Params:
    out = dict(base)
    for k, g in extra.items():
        out[k] = out.get(k, 0.0) + weight * g
    return out


def train_bc(
    policy: Policy,
    expert: FrameDataset,
    reset_recovery: FrameDataset | None,
    cfg: Config,
    seed: int = 0,
    steps: int | None = None,
    lam: float | None = None,
) -> list[float]:
    """Phase-one imitation: expert plus lambda-weighted reset-recovery data.

    The value input is pinned to 1.0 for every sample so the later refinement
    phase is a strict fine-tune of the same architecture.  Expert batches use
    raw histories; recovery batches come from sliced episodes whose histories
    pad at the reset marker.
    """
    lam = float(cfg.lambda_recovery) if lam is None else float(lam)
    n_steps = int(cfg.bc_steps) if steps is None else int(steps)
    batch = int(cfg.policy_batch)
    if not policy.provenance.get("normalizer_fitted"):
        fit_normalizer(policy, expert)
    jitter = float(cfg.input_noise)
    rng_e = np.random.default_rng([int(seed), 0xE])
    rng_r = np.random.default_rng([int(seed), 0xF])
    rng_aug = np.random.default_rng([int(seed), 0xA6])
    optimizer = Adam(policy.params, lr=float(cfg.policy_lr), total_steps=n_steps)
    losses: list[float] = []
    for _ in range(n_steps):
        idx = expert.sample_pool[rng_e.integers(0, len(expert.sample_pool), size=batch)]
        loss, grads = loss_and_grads(policy, *_batch(expert, idx, 1.0, rng_aug, jitter))
        if reset_recovery is not None and lam > 0.0:
            ridx = reset_recovery.sample_pool[rng_r.integers(0, len(reset_recovery.sample_pool), size=batch)]
            r_loss, r_grads = loss_and_grads(policy, *_batch(reset_recovery, ridx, 1.0, rng_aug, jitter))
            loss += lam * r_loss
            grads = _merge_grads(grads, r_grads, lam)
        if not np.isfinite(loss):
            raise TrainingError(f"imitation loss diverged at step {len(losses)}")
        optimizer.step(policy.params, grads)
        losses.append(loss)
    return losses


def train_value_conditioned(
    policy: Policy,
    labeled: FrameDataset,
    cfg: Config,
    seed: int = 0,
    steps: int | None = None,
) -> list[float]:
    """Refinement on the labeled mixed dataset with per-frame value tokens.

    Histories must have been built in Raw mode: recovery frames keep their
    failure prefix in view and the label disambiguates drift from correction.
    """
    if np.any(np.isnan(labeled.values)):
        raise ValidationError("refinement dataset contains unlabeled frames")
    n_steps = int(cfg.refine_steps) if steps is None else int(steps)
    batch = int(cfg.policy_batch)
    if not policy.provenance.get("normalizer_fitted"):
        fit_normalizer(policy, labeled)
    jitter = float(cfg.input_noise)
    rng = np.random.default_rng([int(seed), 0xC])
    rng_aug = np.random.default_rng([int(seed), 0xA7])
    optimizer = Adam(policy.params, lr=float(cfg.policy_lr), total_steps=n_steps)
    losses: list[float] = []
    for _ in range(n_steps):
        idx = labeled.sample_pool[rng.integers(0, len(labeled.sample_pool), size=batch)]
        loss, grads = loss_and_grads(policy, *_batch(labeled, idx, None, rng_aug, jitter))
        if not np.isfinite(loss):
            raise TrainingError(f"refinement loss diverged at step {len(losses)}")
        optimizer.step(policy.params, grads)
        losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# rollouts


class Actor:
    """Protocol for closed-loop controllers driven by the rollout engine."""

    def begin(self, cfg: Config, task_id: str, state: WorldState, obs: Observation) -> None:
        raise NotImplementedError

    def act(self, state: WorldState, obs: Observation) -> BimanualAction:
        raise NotImplementedError


class LearnedActor(Actor):
    """Wraps a Policy; sees observations only, with a raw rolling history."""

    def __init__(self, policy: Policy, v_fixed: float = 1.0):
        self.policy = policy
        self.v_fixed = float(v_fixed)
        self._history: list[np.ndarray] = []
        self._instruction = 0
        self._cfg: Config | None = None

    def begin(self, cfg, task_id, state, obs):
        self._cfg = cfg
        self._instruction = obs.instruction_id
        self._history = []

    def act(self, state, obs):
        w, d = self.policy.history_w, self.policy.obs_dim
        window = np.zeros((w, d))
        for k in range(min(w, len(self._history))):
            window[k] = self._history[-1 - k]
        action = forward(self.policy, self._cfg, obs, window, self._instruction, self.v_fixed)
        self._history.append(obs.as_vector())
        return action


def _geometric_trigger(cfg: Config, state: WorldState, kind: ErrorKind) -> tuple[int, int] | None:
    """Policy rollouts have no plan phases; trigger on scene geometry instead.

    E2 fires on the first frame an object is held (lift beginning); E3/E4 on
    first entry within grasp_radius (grasp initiation); E1 on entry within the
    approach standoff, early enough that the forced close precedes contact.
    """
    if kind is ErrorKind.E2_GRASP_SLIP:
        for i, obj in enumerate(state.objects):
            if obj.held_by is not None:
                return obj.held_by, i
        return None
    radius = cfg.approach_standoff if kind is ErrorKind.E1_PREMATURE_CLOSE else cfg.grasp_radius
    for arm in (LEFT, RIGHT):
        for i, obj in enumerate(state.objects):
            if obj.held_by is None and obj.pose.distance(state.arm_poses[arm]) <= radius:
                return arm, i
    return None


def rollout_actor(
    cfg: Config,
    actor: Actor,
    task_id: str,
    env_mode: EnvMode,
    seed: int,
    max_steps: int | None = None,
    injection: ErrorType | None = None,
    t_max: int | None = None,
    episode_label: str = "roll",
) -> Episode:
    """Closed-loop episode under an actor, with optional mid-rollout injection.

    With injection, frames inside the override window are tagged Error and
    the post-window continuation is tagged Recovery (the protocol's recovery
    phase).  The adverse state is verified when the window closes and the
    result recorded in provenance; unverified injections are retagged Nominal.
    Failed episodes are finalized as pure failures (Error from onset).
    """
    state = reset(cfg, task_id, env_mode, seed)
    spec = get_task(cfg, task_id)
    obs = observe(cfg, state)
    actor.begin(cfg, task_id, state, obs)
    hard_cap = int(max_steps) if max_steps is not None else int(cfg.episode_max_steps)
    if hard_cap <= 0:
        raise InputError("max_steps must be positive")

    schedule: InjectionSchedule | None = None
    if injection is not None:
        schedule = InjectionSchedule(error=injection, trigger_phase=None, rng_seed=seed)
    verified: bool | None = None
    onset: int | None = None
    frames: list[Frame] = []
    outcome = Outcome.FAILURE

    while True:
        t = len(frames)
        if t >= hard_cap or (t_max is not None and t > t_max):
            break
        if schedule is not None and not schedule.resolved:
            hit = _geometric_trigger(cfg, state, injection.kind)
            if hit is not None:
                schedule.resolve(t, hit[0], hit[1])
                onset = t
        action = actor.act(state, obs)
        if schedule is not None and schedule.resolved:
            action = inject(action, injection, t, schedule)
        if schedule is not None and schedule.in_window(t):
            tag = PhaseTag.ERROR
        elif verified:
            tag = PhaseTag.RECOVERY
        else:
            tag = PhaseTag.NOMINAL
        frames.append(Frame(t=t, obs=obs, action=action, phase=tag))
        state = step(cfg, state, action)
        obs = observe(cfg, state)
        if schedule is not None and schedule.resolved and len(frames) == schedule.t_end:
            verified = verify_adverse(cfg, state, injection, schedule)
        if success_check(cfg, task_id, state):
            outcome = Outcome.SUCCESS
            break

    def retag(start: int, tag: PhaseTag) -> None:
        for i in range(start, len(frames)):
            frames[i] = Frame(t=frames[i].t, obs=frames[i].obs, action=frames[i].action, phase=tag)

    t_rec: int | None = None
    if schedule is not None and schedule.resolved:
        window_closed = len(frames) >= schedule.t_end
        if verified and outcome is Outcome.SUCCESS and len(frames) > schedule.t_end:
            kind = EpisodeKind.FAILURE_RECOVERY
            t_rec = schedule.t_end
        elif verified and outcome is Outcome.FAILURE:
            retag(onset, PhaseTag.ERROR)
            kind = EpisodeKind.PURE_FAILURE
        else:
            # Unverified (or resolved too late to matter): a nominal run.
            retag(onset, PhaseTag.NOMINAL)
            kind = EpisodeKind.NOMINAL_SUCCESS if outcome is Outcome.SUCCESS else EpisodeKind.PURE_FAILURE
        provenance = {
            "generator": "rollout",
            "adverse_verified": bool(verified),
            "window_closed": window_closed,
            "schedule": {
                "window": [schedule.t_start, schedule.t_end],
                "designated_arm": ARM_NAMES[schedule.arm],
                "object_index": schedule.object_index,
                "draws": schedule.draws,
            },
        }
    else:
        kind = EpisodeKind.NOMINAL_SUCCESS if outcome is Outcome.SUCCESS else EpisodeKind.PURE_FAILURE
        provenance = {"generator": "rollout", "adverse_verified": False,
                      "triggered": schedule is not None and schedule.resolved}
    error_name = injection.kind.value if injection is not None else None
    episode = Episode(
        episode_id=f"{task_id}-{env_mode.value.lower()}-{episode_label}-s{seed:06d}",
        task_id=task_id,
        instruction_id=spec.instruction_id,
        env_mode=env_mode,
        seed=seed,
        error_type=error_name,
        t_rec=t_rec,
        outcome=outcome,
        kind=kind,
        frames=tuple(frames),
        provenance=provenance,
    )
    return episode


def rollout(
    policy: Policy,
    cfg: Config,
    task_id: str,
    env_mode: EnvMode,
    seed: int,
    v_fixed: float = 1.0,
    max_steps: int | None = None,
    injection: ErrorType | None = None,
    t_max: int | None = None,
) -> Episode:
    """Deploy the policy closed-loop: raw rolling history, fixed value input."""
    label = f"pol-{injection.kind.value}" if injection is not None else "pol"
    return rollout_actor(
        cfg, LearnedActor(policy, v_fixed=v_fixed), task_id, env_mode, seed,
        max_steps=max_steps, injection=injection, t_max=t_max, episode_label=label,
    )


# ---------------------------------------------------------------------------
# checkpointing


def save_policy(policy: Policy, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": "policy",
        "history_w": policy.history_w,
        "obs_dim": policy.obs_dim,
        "n_instructions": policy.n_instructions,
        "value_token_dim": policy.value_token_dim,
        "instr_embed_dim": policy.instr_embed_dim,
        "hidden_dim": policy.hidden_dim,
        "sigma": policy.sigma,
        "obs_mean": policy.obs_mean.tolist(),
        "obs_std": policy.obs_std.tolist(),
        "params": {k: v.tolist() for k, v in sorted(policy.params.items())},
        "provenance": policy.provenance,
    }
    path.write_text(json.dumps(payload, sort_keys=True))
    return path


def load_policy(path: str | Path) -> Policy:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"cannot load policy from {path}: {exc}") from exc
    if payload.get("schema_version") != CHECKPOINT_SCHEMA or payload.get("kind") != "policy":
        raise StorageError(f"{path}: not a supported policy checkpoint")
    return Policy(
        params={k: np.asarray(v, dtype=np.float64) for k, v in payload["params"].items()},
        history_w=payload["history_w"],
        obs_dim=payload["obs_dim"],
        n_instructions=payload["n_instructions"],
        value_token_dim=payload["value_token_dim"],
        instr_embed_dim=payload["instr_embed_dim"],
        hidden_dim=payload["hidden_dim"],
        sigma=payload["sigma"],
        obs_mean=np.asarray(payload["obs_mean"], dtype=np.float64),
        obs_std=np.asarray(payload["obs_std"], dtype=np.float64),
        provenance=payload.get("provenance", {}),
    )
