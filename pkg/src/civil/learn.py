"""Two-phase training, baselines, rollouts, and evaluation.

Phase 1 trains encoders, policy, action head, and marker head jointly on
demonstrations.  The full method consumes masked images and minimizes the
action loss plus the explicit (marker-reconstruction) loss; the two
single-channel ablations drop one ingredient each (``explicit_only`` keeps
the marker loss but trains on raw images, ``implicit_only`` trains on masked
images without the marker loss), and ``bc`` is plain behavior cloning on raw
images.

Phase 2 freezes everything from phase 1 and trains the two causal encoders
to reproduce, from raw images, the features the frozen encoders compute on
masked images.  The feature-matching objective runs on demonstrations plus
play records; the full method additionally supervises the causal explicit
slice with marker readings.  Selection in both phases follows validation
action error (phase 2 measures it through the causal encoders on raw
images, the deployment condition), lowest value wins, earliest epoch on
ties.

At evaluation time the policy runs from raw images only.  A sentinel audit
can wrap rollouts to prove that nothing touches markers, prompts, masks, or
boxes.

Training is deterministic given (dataset, config): batch order derives from
the seed and epoch index, all math is single-threaded CPU torch, and resume
from a checkpoint reproduces the remaining loss curve exactly.
"""

from __future__ import annotations

import copy
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import model as model_mod
from . import pipeline, world
from .model import ModelBundle, ModelConfig
from .pipeline import Dataset
from .world import ActionCommand, AgentState, SceneSpec

__all__ = [
    "METHODS",
    "TrainConfig",
    "TrainReport",
    "EvalReport",
    "TrainingData",
    "GuidanceAccessError",
    "loss_policy",
    "loss_explicit",
    "loss_causal",
    "train_phase1",
    "train_phase2",
    "train_bc",
    "train_method",
    "ExpertOracle",
    "PolicyActor",
    "rollout",
    "evaluate",
    "guidance_sentinel",
]

logger = logging.getLogger(__name__)

METHODS = ("civil", "bc", "explicit_only", "implicit_only")
# Which phase-1 variants consume masked images / carry the marker loss.
MASKED_INPUT_METHODS = ("civil", "implicit_only")
EXPLICIT_LOSS_METHODS = ("civil", "explicit_only")
# Which methods get a causal phase (the others already train on raw images).
PHASE2_METHODS = ("civil", "implicit_only")

EVAL_HORIZON = 150   # ~10x a scripted-expert episode; generous but bounded


@dataclass(frozen=True)
class TrainConfig:
    method: str = "civil"
    epochs: int = 500
    learning_rate: float = 1e-4
    lr_halving_period: int = 100
    batch_size: int = 128
    validation_fraction: float = 0.1
    seed: int = 0
    explicit_weight: float = 1.0
    causal_epochs: Optional[int] = None      # phase-2 epochs; defaults to `epochs`
    causal_init_from_encoders: bool = True
    # "all" lets phase-2 marker supervision see play frames too; "demos"
    # restricts it to demonstration frames.
    phase2_explicit_source: str = "all"
    # Relative weight of one play frame against one demonstration frame in
    # the phase-2 objective.  Demonstrations outnumber play frames several
    # times over, and only play scenes break the confound correlation, so
    # upweighting them keeps the shortcut from paying off on average.
    play_weight: float = 1.0
    # Positive-class weight on the gripper-toggle cross entropy.
    toggle_pos_weight: float = 1.0
    # Phase-1 translation augmentation for masked-input methods: each epoch
    # every training episode is shifted rigidly by up to this many table
    # units (0 disables).  Zeroed backgrounds make the shifted image the
    # exact masked render of the translated scene, so velocities, toggles,
    # and the state/marker tuple stay valid after shifting them alongside.
    # Raw-image methods cannot use this: shifting an unmasked frame would
    # move the table boundary and fabricate object layouts never rendered.
    translate_augment: float = 0.3

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_halving_period < 1:
            raise ValueError("epochs, batch_size, lr_halving_period must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.causal_epochs is not None and self.causal_epochs < 1:
            raise ValueError("causal_epochs must be positive when given")
        if self.phase2_explicit_source not in ("all", "demos"):
            raise ValueError("phase2_explicit_source must be 'all' or 'demos'")
        if self.explicit_weight < 0:
            raise ValueError("explicit_weight must be non-negative")
        if self.play_weight <= 0:
            raise ValueError("play_weight must be positive")
        if self.translate_augment < 0:
            raise ValueError("translate_augment must be non-negative")


@dataclass
class TrainReport:
    method: str
    phase: int
    epochs_run: int
    selected_epoch: int
    selection_metric: str
    history: List[dict]
    wall_time: float
    no_marker_frames: bool = False
    checkpoint_path: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    task: str
    method: str
    n_rollouts: int
    success_rate_seen: float
    success_rate_unseen: float
    outcomes: List[dict]
    horizon: int
    n_demos: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


class GuidanceAccessError(RuntimeError):
    """Raised by the sentinel when evaluation code touches guidance data."""


# --------------------------------------------------------------------------
# Tensorized dataset views


@dataclass
class EpisodeTensors:
    static: torch.Tensor          # (T, 3, H, W) float32 in [0, 1]
    ego: torch.Tensor
    masked_static: torch.Tensor
    masked_ego: torch.Tensor
    states: torch.Tensor          # (T, 3)
    actions: torch.Tensor         # (T, 3)
    marker_present: torch.Tensor  # (T,) bool
    marker_values: torch.Tensor   # (T, d_b)
    shift_bounds: Optional[Tuple[int, int, int, int]] = None  # cached, see _shift_bounds

    @property
    def length(self) -> int:
        return int(self.states.shape[0])


@dataclass
class PlayTensors:
    static: torch.Tensor
    ego: torch.Tensor
    masked_static: torch.Tensor
    masked_ego: torch.Tensor
    marker_present: torch.Tensor
    marker_values: torch.Tensor

    @property
    def length(self) -> int:
        return int(self.static.shape[0])


def _episode_tensors(record) -> EpisodeTensors:
    return EpisodeTensors(
        static=model_mod.images_to_tensor(record.static),
        ego=model_mod.images_to_tensor(record.ego),
        masked_static=model_mod.images_to_tensor(record.masked_static),
        masked_ego=model_mod.images_to_tensor(record.masked_ego),
        states=torch.from_numpy(np.asarray(record.states, dtype=np.float32)),
        actions=torch.from_numpy(np.asarray(record.actions, dtype=np.float32)),
        marker_present=torch.from_numpy(np.asarray(record.marker_present, dtype=bool)),
        marker_values=torch.from_numpy(np.asarray(record.marker_values, dtype=np.float32)),
    )


def _play_tensors(record) -> PlayTensors:
    return PlayTensors(
        static=model_mod.images_to_tensor(record.static),
        ego=model_mod.images_to_tensor(record.ego),
        masked_static=model_mod.images_to_tensor(record.masked_static),
        masked_ego=model_mod.images_to_tensor(record.masked_ego),
        marker_present=torch.from_numpy(np.asarray(record.marker_present, dtype=bool)),
        marker_values=torch.from_numpy(np.asarray(record.marker_values, dtype=np.float32)),
    )


class TrainingData:
    """Dataset converted to tensors once, with a fixed train/val split."""

    def __init__(self, dataset: Dataset, validation_fraction: Optional[float] = None):
        if not dataset.episodes:
            raise ValueError("dataset has no episodes")
        self.dataset = dataset
        self.episodes = [_episode_tensors(ep) for ep in dataset.episodes]
        self.play = [_play_tensors(p) for p in dataset.play]
        self.train_idx, self.val_idx = pipeline.validation_split(
            dataset, validation_fraction
        )
        self.marker_dim = dataset.marker_dim

    @property
    def task(self) -> str:
        return self.dataset.task


# --------------------------------------------------------------------------
# Losses (shared verbatim by training and the derivative tests)


def loss_policy(
    raw_pred: torch.Tensor,
    target_actions: torch.Tensor,
    toggle_pos_weight: float = 1.0,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Action loss: squared velocity error plus gripper cross-entropy.

    Velocity error is the squared euclidean distance between the decoded
    (tanh) velocity and the demonstrated one, averaged over the batch.  The
    gripper toggle is a Bernoulli logit; a zero network yields exactly ln 2
    on that term.  Toggle frames are rare (one or two per episode), so
    toggle_pos_weight > 1 trades some false-positive margin for recall.
    """
    velocity, logit = model_mod.ActionHead.decode(raw_pred)
    vel_term = ((velocity - target_actions[..., :2]) ** 2).sum(dim=-1).mean()
    pos_weight = None
    if toggle_pos_weight != 1.0:
        pos_weight = logit.new_tensor(toggle_pos_weight)
    grip_term = nn.functional.binary_cross_entropy_with_logits(
        logit, target_actions[..., 2], pos_weight=pos_weight
    )
    total = vel_term + grip_term
    return total, {"velocity": vel_term, "gripper": grip_term}


def loss_explicit(
    bundle: ModelBundle,
    static_features: torch.Tensor,
    marker_present: torch.Tensor,
    marker_values: torch.Tensor,
    weights: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, int]:
    """Marker reconstruction from the explicit slice, dropout frames excluded.

    Mean over marker-bearing frames and components of the squared gap
    between head(explicit slice) and the recorded reading.  Optional
    per-frame weights reweight that mean exactly as in loss_causal; the
    shortcut-breaking argument for upweighting play frames applies to this
    term as much as to feature matching.  Returns the number of
    contributing frames; zero frames yield a constant 0 that contributes
    no gradient.
    """
    present = marker_present.bool()
    count = int(present.sum())
    if count == 0:
        return static_features.new_zeros(()), 0
    predicted = bundle.marker_head(bundle.explicit_slice(static_features[present]))
    gap = ((predicted - marker_values[present]) ** 2).mean(dim=-1)
    if weights is None:
        return gap.mean(), count
    scale = weights[present] / weights[present].sum()
    return (scale * gap).sum(), count


def loss_causal(
    frozen_static: torch.Tensor,
    causal_static: torch.Tensor,
    frozen_ego: torch.Tensor,
    causal_ego: torch.Tensor,
    weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Feature-matching loss: batch-mean squared distance, summed over cameras.

    Optional per-frame weights reweight the mean; demonstrations and play
    scenes can then contribute on equal footing even when one pool has far
    more frames than the other.
    """
    gap_s = ((frozen_static - causal_static) ** 2).sum(dim=-1)
    gap_e = ((frozen_ego - causal_ego) ** 2).sum(dim=-1)
    if weights is None:
        return gap_s.mean() + gap_e.mean()
    scale = weights / weights.sum()
    return (scale * gap_s).sum() + (scale * gap_e).sum()


# --------------------------------------------------------------------------
# Batch plumbing


def _window_index(lengths: Sequence[int], history: int) -> torch.Tensor:
    """Flat gather indices turning per-frame features into sliding windows.

    Episode starts are padded by repeating the first frame, so every frame
    is the head of exactly one window and windows never cross episodes.
    """
    rows, base = [], 0
    offsets = torch.arange(-history, 1)
    for length in lengths:
        t = torch.arange(length)[:, None] + offsets[None, :]
        rows.append(t.clamp(min=0) + base)
        base += length
    return torch.cat(rows, dim=0)


def _policy_forward(
    bundle: ModelBundle, episodes: Sequence[EpisodeTensors], masked: bool, use_causal: bool
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Encode all frames of the given episodes once and run the policy.

    Returns (raw action predictions, target actions, static features); the
    static features are per frame, for the explicit loss.  Encoding each
    unique frame once and assembling windows by indexing is what keeps an
    epoch cheap: a window of 5 steps reuses 4 already-encoded frames.
    """
    if masked:
        imgs_s = torch.cat([ep.masked_static for ep in episodes])
        imgs_e = torch.cat([ep.masked_ego for ep in episodes])
    else:
        imgs_s = torch.cat([ep.static for ep in episodes])
        imgs_e = torch.cat([ep.ego for ep in episodes])
    encoder_s = bundle.causal_static if use_causal else bundle.static_encoder
    encoder_e = bundle.causal_ego if use_causal else bundle.ego_encoder
    feats_s = encoder_s(imgs_s)
    feats_e = encoder_e(imgs_e)
    states = torch.cat([ep.states for ep in episodes])
    actions = torch.cat([ep.actions for ep in episodes])
    win = _window_index([ep.length for ep in episodes], bundle.config.history)
    summary = bundle.policy(states[win], feats_s[win], feats_e[win])
    raw = bundle.action_head(summary)
    return raw, actions, feats_s


def _shift_bounds(ep: EpisodeTensors) -> Tuple[int, int, int, int]:
    """Feasible rigid pixel shifts (dr_min, dr_max, dc_min, dc_max).

    A shift is feasible when every unmasked pixel of every frame stays
    inside the static view and the agent track stays on the table, so the
    shifted episode is one the simulator could have produced.
    """
    if ep.shift_bounds is not None:
        return ep.shift_bounds
    res = world.STATIC_RES
    content = (ep.masked_static.sum(dim=1) > 0).any(dim=0)  # (H, W)
    rows = torch.nonzero(content.any(dim=1)).ravel()
    cols = torch.nonzero(content.any(dim=0)).ravel()
    if len(rows) == 0:
        bounds = (0, 0, 0, 0)
    else:
        dr_lo, dr_hi = -int(rows[0]), res - 1 - int(rows[-1])
        dc_lo, dc_hi = -int(cols[0]), res - 1 - int(cols[-1])
        margin = world.AGENT_MARGIN
        x_lo, x_hi = float(ep.states[:, 0].min()), float(ep.states[:, 0].max())
        y_lo, y_hi = float(ep.states[:, 1].min()), float(ep.states[:, 1].max())
        dc_lo = max(dc_lo, int(np.ceil((margin - x_lo) * res)))
        dc_hi = min(dc_hi, int(np.floor((1.0 - margin - x_hi) * res)))
        # +y is up but +row is down, so the row bounds take the negated range.
        dr_lo = max(dr_lo, int(np.ceil(-(1.0 - margin - y_hi) * res)))
        dr_hi = min(dr_hi, int(np.floor(-(margin - y_lo) * res)))
        bounds = (dr_lo, dr_hi, dc_lo, dc_hi)
    ep.shift_bounds = bounds
    return bounds


def _translate_episode(
    ep: EpisodeTensors, rng: np.random.Generator, max_px: int
) -> EpisodeTensors:
    """Rigidly shift one episode by a random feasible pixel offset.

    Only masked-input fields move: the masked static image (zero fill is
    exact because masked backgrounds are zero), the agent state, and the
    marker readings.  The ego view is agent-centered and thus invariant;
    actions are invariant because expert control depends only on relative
    geometry.
    """
    dr_lo, dr_hi, dc_lo, dc_hi = _shift_bounds(ep)
    dr_lo, dr_hi = max(dr_lo, -max_px), min(dr_hi, max_px)
    dc_lo, dc_hi = max(dc_lo, -max_px), min(dc_hi, max_px)
    dr = int(rng.integers(dr_lo, dr_hi + 1)) if dr_lo < dr_hi else 0
    dc = int(rng.integers(dc_lo, dc_hi + 1)) if dc_lo < dc_hi else 0
    if dr == 0 and dc == 0:
        return ep
    res = world.STATIC_RES
    shifted = torch.zeros_like(ep.masked_static)
    src = ep.masked_static[
        ..., max(0, -dr) : min(res, res - dr), max(0, -dc) : min(res, res - dc)
    ]
    shifted[..., max(0, dr) : min(res, res + dr), max(0, dc) : min(res, res + dc)] = src
    dx, dy = dc / res, -dr / res
    states = ep.states.clone()
    states[:, 0] += dx
    states[:, 1] += dy
    values = ep.marker_values.clone()
    if values.shape[1]:
        pairs = values.view(values.shape[0], -1, 2)
        pairs[ep.marker_present] += torch.tensor([dx, dy], dtype=pairs.dtype)
    return EpisodeTensors(
        static=ep.static,
        ego=ep.ego,
        masked_static=shifted,
        masked_ego=ep.masked_ego,
        states=states,
        actions=ep.actions,
        marker_present=ep.marker_present,
        marker_values=values,
        shift_bounds=ep.shift_bounds,
    )


# Table background in image units, for filling pixels a shifted raw static
# frame vacates.  The static camera sees exactly the unit table, so filling
# with this color reproduces what rendering the translated scene would show.
_BG_FILL = torch.tensor([c / 255.0 for c in world.BACKGROUND], dtype=torch.float32)


def _shift_frames(
    imgs: torch.Tensor,
    dr: np.ndarray,
    dc: np.ndarray,
    fill: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Translate each (C, H, W) frame by its own pixel offset.

    Vacated pixels take ``fill`` (a per-channel color) or zero.  Content
    pushed past the view edge is dropped, which matches how the renderer
    clips an object straddling the table boundary.
    """
    res = imgs.shape[-1]
    if fill is None:
        out = torch.zeros_like(imgs)
    else:
        out = fill.view(1, -1, 1, 1).expand_as(imgs).clone()
    for i in range(imgs.shape[0]):
        r, c = int(dr[i]), int(dc[i])
        src = imgs[i, :, max(0, -r) : min(res, res - r), max(0, -c) : min(res, res - c)]
        out[i, :, max(0, r) : min(res, res + r), max(0, c) : min(res, res + c)] = src
    return out


def _episode_batches(
    indices: Sequence[int],
    lengths: Dict[int, int],
    batch_size: int,
    rng: np.random.Generator,
) -> List[List[int]]:
    """Shuffle episodes, then group until each batch holds >= batch_size frames."""
    order = [indices[i] for i in rng.permutation(len(indices))]
    batches, current, count = [], [], 0
    for index in order:
        current.append(index)
        count += lengths[index]
        if count >= batch_size:
            batches.append(current)
            current, count = [], 0
    if current:
        batches.append(current)
    return batches


def _action_error(
    bundle: ModelBundle,
    data: TrainingData,
    indices: Sequence[int],
    masked: bool,
    use_causal: bool,
) -> float:
    """Validation action error: MSE over (vx, vy, gripper probability)."""
    if not indices:
        raise ValueError("no episodes to validate on")
    errors, total = 0.0, 0
    with torch.no_grad():
        episodes = [data.episodes[i] for i in indices]
        raw, actions, _ = _policy_forward(bundle, episodes, masked, use_causal)
        velocity, logit = model_mod.ActionHead.decode(raw)
        predicted = torch.cat([velocity, torch.sigmoid(logit)[:, None]], dim=1)
        errors = float(((predicted - actions) ** 2).mean())
        total = actions.shape[0]
    assert total > 0
    return errors


def _epoch_rng(seed: int, phase: int, epoch: int) -> np.random.Generator:
    # Batch order is a pure function of (seed, phase, epoch): resuming at
    # epoch e reproduces exactly the batches an uninterrupted run saw.
    return np.random.default_rng(np.random.SeedSequence((seed, phase, epoch)))


def _snapshot(modules: Dict[str, nn.Module]) -> Dict[str, dict]:
    return {
        name: {k: v.detach().clone() for k, v in module.state_dict().items()}
        for name, module in modules.items()
    }


def _restore(modules: Dict[str, nn.Module], snapshot: Dict[str, dict]) -> None:
    for name, module in modules.items():
        module.load_state_dict(snapshot[name])


# --------------------------------------------------------------------------
# Phase 1


def train_phase1(
    data: TrainingData,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    resume_state: Optional[dict] = None,
) -> Tuple[ModelBundle, TrainReport]:
    """Joint training of encoders, policy, action head, and marker head.

    Accepts every phase-1 style method: the full method and the masking-only
    ablation consume masked images, the marker-only ablation and behavior
    cloning consume raw ones; the marker loss is active for the full method
    and the marker-only ablation.  Model selection tracks validation action
    error; the returned bundle carries the best epoch's weights.
    """
    method = config.method
    start = time.time()
    if model_config is None:
        model_config = ModelConfig(marker_dim=data.marker_dim)
    if model_config.marker_dim != data.marker_dim:
        raise ValueError(
            f"model marker_dim {model_config.marker_dim} != dataset {data.marker_dim}"
        )

    masked = method in MASKED_INPUT_METHODS
    use_explicit = method in EXPLICIT_LOSS_METHODS

    bundle = model_mod.build_bundle(model_config, config.seed)
    trained = dict(bundle.phase1_modules())
    if not use_explicit:
        trained.pop("marker_head")
    params = [p for m in trained.values() for p in m.parameters()]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=config.lr_halving_period, gamma=0.5
    )

    history: List[dict] = []
    best_metric, best_epoch, best_weights = float("inf"), -1, None
    start_epoch = 0
    if resume_state is not None:
        _restore(bundle.phase1_modules(), resume_state["modules"])
        optimizer.load_state_dict(resume_state["optimizer"])
        scheduler.load_state_dict(resume_state["scheduler"])
        history = list(resume_state["history"])
        best_metric = resume_state["best_metric"]
        best_epoch = resume_state["best_epoch"]
        best_weights = resume_state["best_weights"]
        start_epoch = resume_state["epochs_done"]

    lengths = {i: data.episodes[i].length for i in range(len(data.episodes))}
    any_markers = False
    augment_px = int(round(config.translate_augment * world.STATIC_RES)) if masked else 0

    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(config.seed, 1, epoch)
        batches = _episode_batches(data.train_idx, lengths, config.batch_size, rng)
        pol_sum, pol_n = 0.0, 0
        exp_sum, exp_n = 0.0, 0
        for batch in batches:
            episodes = [data.episodes[i] for i in batch]
            if augment_px:
                episodes = [_translate_episode(ep, rng, augment_px) for ep in episodes]
            raw, actions, feats_s = _policy_forward(bundle, episodes, masked, False)
            l_pol, _ = loss_policy(raw, actions, config.toggle_pos_weight)
            total = l_pol
            if use_explicit:
                present = torch.cat([ep.marker_present for ep in episodes])
                values = torch.cat([ep.marker_values for ep in episodes])
                l_exp, n_frames = loss_explicit(bundle, feats_s, present, values)
                if n_frames > 0:
                    total = total + config.explicit_weight * l_exp
                    exp_sum += l_exp.item() * n_frames
                    exp_n += n_frames
                    any_markers = True
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            n_windows = actions.shape[0]
            pol_sum += l_pol.item() * n_windows
            pol_n += n_windows
        scheduler.step()

        entry = {
            "epoch": epoch,
            "lr": optimizer.param_groups[0]["lr"],
            "policy": pol_sum / max(pol_n, 1),
        }
        if use_explicit:
            entry["explicit"] = exp_sum / exp_n if exp_n else 0.0
            entry["total"] = entry["policy"] + config.explicit_weight * entry["explicit"]
        else:
            entry["total"] = entry["policy"]
        if data.val_idx:
            entry["val_action_error"] = _action_error(
                bundle, data, data.val_idx, masked, False
            )
            metric = entry["val_action_error"]
        else:
            metric = entry["total"]
        history.append(entry)
        if metric < best_metric:
            best_metric, best_epoch = metric, epoch
            best_weights = _snapshot(bundle.phase1_modules())

    resume = {
        "modules": _snapshot(bundle.phase1_modules()),
        "optimizer": optimizer.state_dict(),
        "scheduler": scheduler.state_dict(),
        "history": list(history),
        "best_metric": best_metric,
        "best_epoch": best_epoch,
        "best_weights": best_weights,
        "epochs_done": config.epochs,
    }
    if best_weights is not None:
        _restore(bundle.phase1_modules(), best_weights)
    bundle.marker_head.check_invertible()

    report = TrainReport(
        method=method,
        phase=1,
        epochs_run=config.epochs,
        selected_epoch=best_epoch,
        selection_metric="val_action_error" if data.val_idx else "train_total",
        history=history,
        wall_time=time.time() - start,
        no_marker_frames=use_explicit and not any_markers,
    )
    report.resume_state = resume  # type: ignore[attr-defined]
    return bundle, report


def train_bc(
    data: TrainingData,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    resume_state: Optional[dict] = None,
) -> Tuple[ModelBundle, TrainReport]:
    """Behavior cloning: raw images, action loss only, no causal phase."""
    if config.method != "bc":
        raise ValueError("train_bc expects method 'bc'")
    return train_phase1(data, config, model_config, resume_state)


# --------------------------------------------------------------------------
# Phase 2


class _FrameBank:
    """All phase-2 frames (demos + play) as flat tensors."""

    def __init__(self, data: TrainingData, indices: Sequence[int], include_play: bool):
        sources = [data.episodes[i] for i in indices]
        demo_flags = [torch.ones(ep.length, dtype=torch.bool) for ep in sources]
        if include_play:
            sources += list(data.play)
            demo_flags += [torch.zeros(p.length, dtype=torch.bool) for p in data.play]
        if not sources:
            raise ValueError("phase 2 has no frames to train on")
        self.static = torch.cat([s.static for s in sources])
        self.ego = torch.cat([s.ego for s in sources])
        self.masked_static = torch.cat([s.masked_static for s in sources])
        self.masked_ego = torch.cat([s.masked_ego for s in sources])
        self.marker_present = torch.cat([s.marker_present for s in sources])
        self.marker_values = torch.cat([s.marker_values for s in sources])
        self.is_demo = torch.cat(demo_flags)
        self._shift_bounds: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return int(self.static.shape[0])

    def shift_bounds(self) -> torch.Tensor:
        """Per-frame (dr_lo, dr_hi, dc_lo, dc_hi) keeping masked content in view.

        Unlike the episode-level variant, frames here are matched one at a
        time, so each frame gets its own range and no agent-track constraint
        applies (the agent state is not an input to this stage).
        """
        if self._shift_bounds is None:
            res = world.STATIC_RES
            content = self.masked_static.sum(dim=1) > 0  # (N, H, W)
            rows, cols = content.any(dim=2), content.any(dim=1)
            idx = torch.arange(res)
            bounds = []
            for mask in (rows, cols):
                first = torch.where(mask, idx, torch.full_like(idx, res)).min(dim=1).values
                last = torch.where(mask, idx, torch.full_like(idx, -1)).max(dim=1).values
                lo = torch.where(first < res, -first, torch.zeros_like(first))
                hi = torch.where(first < res, res - 1 - last, torch.zeros_like(last))
                bounds += [lo, hi]
            self._shift_bounds = torch.stack(bounds, dim=1)
        return self._shift_bounds


def train_phase2(
    data: TrainingData,
    bundle: ModelBundle,
    config: TrainConfig,
    resume_state: Optional[dict] = None,
) -> Tuple[ModelBundle, TrainReport]:
    """Causal-encoder training on demonstrations plus play records.

    Everything from phase 1 is frozen; only the two causal encoders move.
    They are supervised to match the frozen encoders' masked-image features
    from raw images, and (full method only) to place marker readings in
    their explicit slice.  Selection follows validation action error
    measured through the causal encoders on raw images.
    """
    if config.method not in PHASE2_METHODS:
        raise ValueError(
            f"phase 2 applies to methods {PHASE2_METHODS}, got {config.method!r}"
        )
    start = time.time()
    bundle.freeze_phase1()
    use_explicit = config.method == "civil"
    epochs = config.causal_epochs if config.causal_epochs is not None else config.epochs

    if resume_state is None and config.causal_init_from_encoders:
        bundle.init_causal_from_encoders()

    params = [p for m in bundle.causal_modules().values() for p in m.parameters()]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=config.lr_halving_period, gamma=0.5
    )

    history: List[dict] = []
    best_metric, best_epoch, best_weights = float("inf"), -1, None
    start_epoch = 0
    if resume_state is not None:
        _restore(bundle.causal_modules(), resume_state["modules"])
        optimizer.load_state_dict(resume_state["optimizer"])
        scheduler.load_state_dict(resume_state["scheduler"])
        history = list(resume_state["history"])
        best_metric = resume_state["best_metric"]
        best_epoch = resume_state["best_epoch"]
        best_weights = resume_state["best_weights"]
        start_epoch = resume_state["epochs_done"]

    bank = _FrameBank(data, data.train_idx, include_play=True)
    n_frames = len(bank)
    augment_px = int(round(config.translate_augment * world.STATIC_RES))
    frame_bounds = bank.shift_bounds().numpy() if augment_px else None

    for epoch in range(start_epoch, epochs):
        rng = _epoch_rng(config.seed, 2, epoch)
        order = torch.from_numpy(rng.permutation(n_frames))
        causal_sum, exp_sum, exp_n, seen = 0.0, 0.0, 0, 0
        for chunk_start in range(0, n_frames, config.batch_size):
            chunk = order[chunk_start : chunk_start + config.batch_size]
            masked_s, raw_s = bank.masked_static[chunk], bank.static[chunk]
            values = bank.marker_values[chunk]
            if augment_px:
                # Same per-frame offset for the raw input and its masked
                # target; the pair then depicts one translated scene, and the
                # explicit readings move with it.
                b = frame_bounds[chunk.numpy()]
                dr = rng.integers(np.maximum(b[:, 0], -augment_px), np.minimum(b[:, 1], augment_px) + 1)
                dc = rng.integers(np.maximum(b[:, 2], -augment_px), np.minimum(b[:, 3], augment_px) + 1)
                masked_s = _shift_frames(masked_s, dr, dc)
                raw_s = _shift_frames(raw_s, dr, dc, fill=_BG_FILL)
                if values.shape[1]:
                    present = bank.marker_present[chunk]
                    delta = torch.stack(
                        [
                            torch.from_numpy(dc / world.STATIC_RES),
                            torch.from_numpy(-dr / world.STATIC_RES),
                        ],
                        dim=1,
                    ).to(values.dtype)
                    values = values.clone()
                    pairs = values.view(len(chunk), -1, 2)
                    pairs[present] += delta[present][:, None, :]
            with torch.no_grad():
                frozen_s = bundle.static_encoder(masked_s)
                frozen_e = bundle.ego_encoder(bank.masked_ego[chunk])
            causal_s = bundle.causal_static(raw_s)
            causal_e = bundle.causal_ego(bank.ego[chunk])
            weights = None
            if config.play_weight != 1.0:
                weights = torch.where(
                    bank.is_demo[chunk],
                    torch.tensor(1.0),
                    torch.tensor(config.play_weight),
                )
            l_causal = loss_causal(frozen_s, causal_s, frozen_e, causal_e, weights)
            total = l_causal
            if use_explicit:
                present = bank.marker_present[chunk]
                if config.phase2_explicit_source == "demos":
                    present = present & bank.is_demo[chunk]
                l_exp, count = loss_explicit(bundle, causal_s, present, values, weights)
                if count > 0:
                    total = total + config.explicit_weight * l_exp
                    exp_sum += l_exp.item() * count
                    exp_n += count
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            causal_sum += l_causal.item() * len(chunk)
            seen += len(chunk)
        scheduler.step()

        entry = {
            "epoch": epoch,
            "lr": optimizer.param_groups[0]["lr"],
            "causal": causal_sum / seen,
        }
        if use_explicit:
            entry["explicit"] = exp_sum / exp_n if exp_n else 0.0
            entry["total"] = entry["causal"] + config.explicit_weight * entry["explicit"]
        else:
            entry["total"] = entry["causal"]
        if data.val_idx:
            entry["val_action_error"] = _action_error(
                bundle, data, data.val_idx, masked=False, use_causal=True
            )
            metric = entry["val_action_error"]
        else:
            metric = entry["total"]
        history.append(entry)
        if metric < best_metric:
            best_metric, best_epoch = metric, epoch
            best_weights = _snapshot(bundle.causal_modules())

    resume = {
        "modules": _snapshot(bundle.causal_modules()),
        "optimizer": optimizer.state_dict(),
        "scheduler": scheduler.state_dict(),
        "history": list(history),
        "best_metric": best_metric,
        "best_epoch": best_epoch,
        "best_weights": best_weights,
        "epochs_done": epochs,
    }
    if best_weights is not None:
        _restore(bundle.causal_modules(), best_weights)
    bundle.causal_trained = True

    report = TrainReport(
        method=config.method,
        phase=2,
        epochs_run=epochs,
        selected_epoch=best_epoch,
        selection_metric="val_action_error" if data.val_idx else "train_total",
        history=history,
        wall_time=time.time() - start,
    )
    report.resume_state = resume  # type: ignore[attr-defined]
    return bundle, report


def train_method(
    data: TrainingData,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
) -> Tuple[ModelBundle, List[TrainReport]]:
    """Run the full recipe for the configured method (one or two phases)."""
    if config.method == "bc":
        bundle, report = train_bc(data, config, model_config)
        return bundle, [report]
    bundle, report1 = train_phase1(data, config, model_config)
    if config.method not in PHASE2_METHODS:
        return bundle, [report1]
    bundle, report2 = train_phase2(data, bundle, config)
    return bundle, [report1, report2]


# --------------------------------------------------------------------------
# Rollout and evaluation


class ExpertOracle:
    """Stands in for a trained bundle; acts with the scripted expert.

    Reads privileged scene state, so it is only a harness for validating the
    evaluation bookkeeping, never a learner.
    """


class PolicyActor:
    """Wraps a trained bundle for step-by-step action selection.

    Methods whose encoders saw masked images must deploy through their
    trained causal encoders; behavior cloning and the marker-only ablation
    trained on raw images and deploy their own encoders.  Velocities are the
    decoded means; the gripper toggles when its probability crosses 0.5.
    """

    def __init__(self, bundle: ModelBundle, method: str):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        self.bundle = bundle
        if bundle.causal_trained:
            self.encoder_s, self.encoder_e = bundle.causal_static, bundle.causal_ego
        elif method in ("bc", "explicit_only"):
            self.encoder_s, self.encoder_e = bundle.static_encoder, bundle.ego_encoder
        else:
            raise ValueError(
                f"method {method!r} deploys causal encoders, but phase 2 never ran"
            )
        bundle.eval()
        self._history: List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = []

    def reset(self) -> None:
        self._history.clear()

    def act(self, state: np.ndarray, static_img: np.ndarray, ego_img: np.ndarray) -> ActionCommand:
        with torch.no_grad():
            feats_s = self.encoder_s(model_mod.images_to_tensor(static_img[None]))
            feats_e = self.encoder_e(model_mod.images_to_tensor(ego_img[None]))
            entry = (torch.from_numpy(state[None].astype(np.float32)), feats_s, feats_e)
            self._history.append(entry)
            window = self.bundle.config.window
            recent = self._history[-window:]
            while len(recent) < window:
                recent = [recent[0]] + recent
            states = torch.cat([r[0] for r in recent])[None]
            f_s = torch.cat([r[1] for r in recent])[None]
            f_e = torch.cat([r[2] for r in recent])[None]
            raw = self.bundle.action_head(self.bundle.policy(states, f_s, f_e))
            velocity, logit = model_mod.ActionHead.decode(raw)
        return ActionCommand(
            velocity=velocity[0].numpy().astype(float),
            gripper_toggle=bool(torch.sigmoid(logit[0]) > 0.5),
        )


@dataclass
class RolloutResult:
    success: bool
    failed: bool
    steps: int
    trajectory: List[dict]


def rollout(
    bundle,
    scene: SceneSpec,
    method: str = "civil",
    horizon: int = EVAL_HORIZON,
    keep_trajectory: bool = False,
) -> RolloutResult:
    """Run one episode from raw images only.  Mutates the given scene.

    No markers, no prompts, no boxes, no masks: the policy sees exactly what
    a deployed agent would.  Pass an ExpertOracle instead of a bundle to
    exercise the bookkeeping with the scripted expert.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    oracle = isinstance(bundle, ExpertOracle)
    actor = None if oracle else PolicyActor(bundle, method)
    agent = world.initial_agent_state(scene)
    trajectory: List[dict] = []
    steps = 0
    for _ in range(horizon):
        if oracle:
            action = world.expert_action(scene, agent)
        else:
            static_img = world.render(scene, agent, "static")
            ego_img = world.render(scene, agent, "ego")
            action = actor.act(agent.as_vector(), static_img, ego_img)
        if keep_trajectory:
            trajectory.append(
                {"state": agent.to_dict(), "action": action.as_vector().tolist()}
            )
        agent = world.step(scene, agent, action)
        steps += 1
        if world.success(scene, agent) or world.failed(scene, agent):
            break
    return RolloutResult(
        success=world.success(scene, agent),
        failed=world.failed(scene, agent),
        steps=steps,
        trajectory=trajectory,
    )


def evaluate(
    bundle,
    task: str,
    method: str = "civil",
    n_seen: int = 20,
    n_unseen: int = 20,
    seed: int = 0,
    horizon: int = EVAL_HORIZON,
    audit: bool = True,
    n_demos: Optional[int] = None,
) -> EvalReport:
    """Success rates on fresh decorrelated scenes, seen and unseen regions.

    Scenes alternate between the two demonstrated regions for the seen
    bucket and sit in the never-demonstrated center band for the unseen
    one.  With ``audit`` on, the guidance sentinel arms for the duration:
    any touch of markers, prompts, masks, or boxes aborts the evaluation.
    """
    if n_seen + n_unseen == 0:
        raise ValueError("no rollouts requested")
    outcomes: List[dict] = []

    def _run(region: str, kind: str, scene_seed: int) -> None:
        scene = world.sample_scene(task, "test_decorrelated", region, scene_seed)
        result = rollout(bundle, scene, method, horizon)
        outcomes.append(
            {
                "kind": kind,
                "region": region,
                "scene_seed": scene_seed,
                "success": result.success,
                "steps": result.steps,
            }
        )

    def _run_all() -> None:
        for i in range(n_seen):
            _run(world.SEEN_REGIONS[i % 2], "seen", seed * 100_000 + i)
        for i in range(n_unseen):
            _run(world.UNSEEN_REGION, "unseen", seed * 100_000 + 50_000 + i)

    if audit:
        with guidance_sentinel():
            _run_all()
    else:
        _run_all()

    seen = [o for o in outcomes if o["kind"] == "seen"]
    unseen = [o for o in outcomes if o["kind"] == "unseen"]
    return EvalReport(
        task=task,
        method=method,
        n_rollouts=len(outcomes),
        success_rate_seen=(
            sum(o["success"] for o in seen) / len(seen) if seen else float("nan")
        ),
        success_rate_unseen=(
            sum(o["success"] for o in unseen) / len(unseen) if unseen else float("nan")
        ),
        outcomes=outcomes,
        horizon=horizon,
        n_demos=n_demos,
    )


@contextmanager
def guidance_sentinel():
    """Forbid all guidance access for the duration of the context.

    Marker readings, ground-truth boxes, prompt resolution, masking, and
    marker-bearing rendering all raise GuidanceAccessError while armed.
    Evaluation wraps rollouts with this to prove the deployed policy needs
    none of the teacher's apparatus.
    """
    real_render = world.render

    def _forbid(name):
        def _raise(*args, **kwargs):
            raise GuidanceAccessError(f"evaluation rollout accessed {name}")

        return _raise

    def _guarded_render(scene, agent, camera="static", markers=None):
        if markers:
            raise GuidanceAccessError("evaluation rollout rendered marker glyphs")
        return real_render(scene, agent, camera, None)

    patches = {
        (world, "marker_readings"): _forbid("world.marker_readings"),
        (world, "ground_truth_boxes"): _forbid("world.ground_truth_boxes"),
        (world, "render"): _guarded_render,
        (pipeline, "resolve_prompt"): _forbid("pipeline.resolve_prompt"),
        (pipeline, "mask_observation"): _forbid("pipeline.mask_observation"),
    }
    saved = {key: getattr(*key) for key in patches}
    for (module, name), replacement in patches.items():
        setattr(module, name, replacement)
    try:
        yield
    finally:
        for (module, name), original in saved.items():
            setattr(module, name, original)
