"""Progress-aware hindsight labeling.

Assigns the dense per-frame value landscape over a mixed-quality dataset:
successful episodes get v=1 everywhere, recovery episodes get v=0 on their
error segment and v=1 elsewhere, and pure failures decay from an estimated
progress score V down to zero,

    v_t = V * (1 - t/T) ** alpha,

so early useful motion is kept while frames near the irreversible breakdown
are driven to zero.  T is the last frame index, making v_T exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .config import Config
from .errors import ValidationError
from .store import (
    Episode,
    EpisodeKind,
    PhaseTag,
    read_dataset,
    write_episode,
)
from .value import ProgressModel, ReferenceCluster, estimate_progress


@dataclass(frozen=True)
class LabelConfig:
    alpha: float = 3.0
    clamp_min: float = 0.0
    clamp_max: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")

    @staticmethod
    def from_config(cfg: Config, alpha: float | None = None) -> "LabelConfig":
        return LabelConfig(
            alpha=float(cfg.alpha if alpha is None else alpha),
            clamp_min=float(cfg.clamp_min),
            clamp_max=float(cfg.clamp_max),
        )

    def clamp(self, v: float) -> float:
        return min(self.clamp_max, max(self.clamp_min, v))


def _with_labels(episode: Episode, labels: list[float]) -> Episode:
    frames = tuple(replace(f, v=v) for f, v in zip(episode.frames, labels))
    return replace(episode, frames=frames)


def label_success(episode: Episode) -> Episode:
    """Successful trajectories: every frame v = 1.0."""
    if episode.kind is not EpisodeKind.NOMINAL_SUCCESS:
        raise ValidationError(f"{episode.episode_id}: label_success needs a NominalSuccess episode")
    return _with_labels(episode, [1.0] * len(episode.frames))


def label_recovery(episode: Episode) -> Episode:
    """Recovery episodes: error segments v = 0.0, everything else v = 1.0.

    The clean approach before the fault behaves like success data and keeps
    v = 1.0; only the frames that drift into the adverse state are zeroed.
    """
    if episode.kind is not EpisodeKind.FAILURE_RECOVERY or episode.t_rec is None:
        raise ValidationError(f"{episode.episode_id}: label_recovery needs FailureRecovery with t_rec")
    sliced = episode.provenance.get("history_reset_at") == 0
    has_error = any(f.phase is PhaseTag.ERROR for f in episode.frames)
    if not has_error and not sliced:
        raise ValidationError(f"{episode.episode_id}: recovery episode carries no Error frames")
    labels = [0.0 if f.phase is PhaseTag.ERROR else 1.0 for f in episode.frames]
    return _with_labels(episode, labels)


def label_failure(episode: Episode, progress: float, config: LabelConfig) -> Episode:
    """Pure failures: reliability decay v_t = V * (1 - t/T)^alpha.

    Endpoints are exact: v_0 = V and v_T = 0.
    """
    if episode.kind is not EpisodeKind.PURE_FAILURE:
        raise ValidationError(f"{episode.episode_id}: label_failure needs a PureFailure episode")
    if not (0.0 <= progress <= 1.0):
        raise ValidationError(f"progress estimate {progress} outside [0, 1]; clamp before labeling")
    horizon = len(episode.frames) - 1
    if horizon < 1:
        raise ValidationError(f"{episode.episode_id}: degenerate single-frame failure episode")
    labels = [
        config.clamp(progress * (1.0 - t / horizon) ** config.alpha)
        for t in range(len(episode.frames))
    ]
    return _with_labels(episode, labels)


def label_episode(
    episode: Episode, model: ProgressModel, cluster: ReferenceCluster, config: LabelConfig
) -> Episode:
    """Dispatch on episode kind; pure failures consult the progress model."""
    if episode.kind is EpisodeKind.NOMINAL_SUCCESS:
        return label_success(episode)
    if episode.kind is EpisodeKind.FAILURE_RECOVERY:
        return label_recovery(episode)
    raw = estimate_progress(model, cluster, episode)
    return label_failure(episode, config.clamp(raw), config)


def label_dataset(
    dataset_dir: str | Path,
    out_dir: str | Path,
    model: ProgressModel,
    cluster: ReferenceCluster,
    config: LabelConfig,
) -> dict:
    """Label every episode of a dataset into ``out_dir``; returns a summary.

    Re-running with identical inputs produces identical labeled files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = read_dataset(dataset_dir)
    histogram = {"0.0": 0, "(0,1)": 0, "1.0": 0}
    counts: dict[str, int] = {}
    for episode in episodes:
        labeled = label_episode(episode, model, cluster, config)
        provenance = dict(labeled.provenance)
        provenance["labeler"] = {"alpha": config.alpha, "rule": labeled.kind.value}
        labeled = replace(labeled, provenance=provenance)
        write_episode(labeled, out_dir)
        counts[labeled.kind.value] = counts.get(labeled.kind.value, 0) + 1
        for f in labeled.frames:
            if f.v == 0.0:
                histogram["0.0"] += 1
            elif f.v == 1.0:
                histogram["1.0"] += 1
            else:
                histogram["(0,1)"] += 1
    return {"episodes": counts, "label_histogram": histogram, "out_dir": str(out_dir)}
