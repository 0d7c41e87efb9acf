"""Demonstration recording, prompt grounding, masking, and storage.

An episode is recorded as a sequence of frames, each carrying the raw
marker-free renders of both cameras, the agent state, the expert (or teleop)
action, the numeric marker reading when detection fired, and per-object
bounding boxes.  After the episode ends, the teacher's guidance is compiled
into a set of relevant object ids: hosts of the attached markers, unioned
with every object whose alias matches a spoken prompt.  Masked copies of all
frames, with everything outside the relevant boxes set to zero, are stored
alongside the raw ones.

Prompts are grounded with a bag-of-words cosine over unique tokens,
|A & B| / sqrt(|A| |B|), scored against a per-class alias library; 0.5 or
above counts as a match.  Short imperative phrases resolve cleanly, long
rambling ones fail closed with UnresolvedPrompt.

Datasets persist as one directory per episode (compressed arrays plus a JSON
sidecar) under a manifest that pins a format version and a sha256 checksum
for every file, so tampering, truncation, and version drift are told apart
at load time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import world
from .world import (
    ActionCommand,
    AgentState,
    Marker,
    SceneSpec,
)

__all__ = [
    "FORMAT_VERSION",
    "DEFAULT_ALIAS_LIBRARY",
    "UnresolvedPrompt",
    "EpisodeDiscarded",
    "DatasetError",
    "DatasetVersionError",
    "DatasetMissingFiles",
    "DatasetChecksumError",
    "EpisodeRecord",
    "PlayRecord",
    "Dataset",
    "tokenize",
    "token_cosine",
    "resolve_prompt",
    "mask_observation",
    "capture_frame",
    "assemble_episode",
    "record_episode",
    "record_play_scene",
    "build_dataset",
    "save_dataset",
    "load_dataset",
    "append_episode",
    "validation_split",
]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MATCH_THRESHOLD = 0.5

# Class label -> phrases a teacher might use for it.  Aliases are scored
# individually and the best one wins, so adding synonyms never hurts.
DEFAULT_ALIAS_LIBRARY: Dict[str, Tuple[str, ...]] = {
    "red block": ("red block", "the red block", "red cube", "crimson block"),
    "green block": ("green block", "green cube"),
    "blue block": ("blue block", "blue base"),
    "pink block": ("pink block", "pink base"),
    "blue bowl": ("blue bowl",),
    "green bowl": ("green bowl",),
    "yellow cup": ("yellow cup",),
    "white cup": ("white cup",),
    "purple ball": ("purple ball",),
    "blue pad": ("blue pad", "left pad"),
    "pink pad": ("pink pad", "right pad"),
    "light": ("light", "the light", "lamp", "signal light"),
}


class UnresolvedPrompt(Exception):
    """No scene object matched the prompt at the acceptance threshold."""


class EpisodeDiscarded(Exception):
    """The episode cannot enter the dataset (failed task, no guidance)."""


class DatasetError(Exception):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetMissingFiles(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


# --------------------------------------------------------------------------
# Prompt grounding

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


def token_cosine(a: str, b: str) -> float:
    """Cosine similarity between unique-token sets of two phrases."""
    ta, tb = set(tokenize(a)), set(tokenize(b))
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / (len(ta) ** 0.5 * len(tb) ** 0.5)


def resolve_prompt(
    prompt: str,
    scene: SceneSpec,
    library: Optional[Dict[str, Tuple[str, ...]]] = None,
) -> List[int]:
    """Object ids whose alias entry matches the prompt (score >= 0.5).

    Every object whose class has a matching alias is returned, sorted by id.
    Raises UnresolvedPrompt when nothing clears the threshold, so callers
    decide whether a dud prompt is a warning or an error.
    """
    if library is None:
        library = DEFAULT_ALIAS_LIBRARY
    matched = []
    for obj in scene.objects:
        aliases = library.get(obj.class_label, (obj.class_label,))
        score = max(token_cosine(prompt, alias) for alias in aliases)
        if score >= MATCH_THRESHOLD:
            matched.append(obj.id)
    if not matched:
        raise UnresolvedPrompt(f"prompt {prompt!r} matched no object in the scene")
    return sorted(matched)


# --------------------------------------------------------------------------
# Masking


def mask_observation(
    image: np.ndarray, boxes: Iterable[Tuple[int, int, int, int]]
) -> np.ndarray:
    """Zero every pixel outside the union of the given pixel boxes.

    Boxes are (row0, col0, row1, col1), half-open.  Pixels inside any box
    keep their exact value, so applying the same mask twice is a no-op.
    """
    image = np.asarray(image)
    keep = np.zeros(image.shape[:2], dtype=bool)
    for row0, col0, row1, col1 in boxes:
        if row1 > row0 and col1 > col0:
            keep[row0:row1, col0:col1] = True
    masked = np.zeros_like(image)
    masked[keep] = image[keep]
    return masked


# --------------------------------------------------------------------------
# Frame capture and episode assembly
#
# The scripted recorder and the teleoperation service share these two
# helpers, which keeps their stored episodes byte-compatible in schema.


def capture_frame(
    scene: SceneSpec,
    agent: AgentState,
    markers: Sequence[Marker],
    noise_std: float = 0.0,
    dropout_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Snapshot everything observable about the current instant.

    Stored images never contain marker glyphs; the marker signal enters only
    through the numeric reading, which may be absent on dropped frames.
    """
    reading = world.marker_readings(scene, markers, noise_std, dropout_prob, rng)
    d_b = 2 * len(markers)
    return {
        "static": world.render(scene, agent, "static"),
        "ego": world.render(scene, agent, "ego"),
        "state": agent.as_vector(),
        "boxes_static": world.ground_truth_boxes(scene, agent, "static"),
        "boxes_ego": world.ground_truth_boxes(scene, agent, "ego"),
        "marker_present": reading is not None,
        "marker_values": reading if reading is not None else np.zeros(d_b, dtype=np.float32),
    }


@dataclass
class EpisodeRecord:
    """One stored demonstration.  Arrays are stacked over the T frames."""

    task: str
    scene: dict                      # initial SceneSpec, serialized
    prompts: List[str]
    markers: List[Marker]
    resolved_ids: List[int]          # union of marker hosts and prompt matches
    static: np.ndarray               # (T, 64, 64, 3) uint8, marker-free
    ego: np.ndarray                  # (T, 32, 32, 3) uint8, marker-free
    masked_static: np.ndarray        # same shapes, zeros outside relevant boxes
    masked_ego: np.ndarray
    states: np.ndarray               # (T, 3) float32: x, y, gripper
    actions: np.ndarray              # (T, 3) float32: vx, vy, gripper toggle
    marker_present: np.ndarray       # (T,) bool
    marker_values: np.ndarray        # (T, d_b) float32, zeros where absent
    box_keys: np.ndarray             # (K,) int32 object ids, AGENT_BOX_KEY last
    boxes_static: np.ndarray         # (T, K, 4) int32
    boxes_ego: np.ndarray            # (T, K, 4) int32
    mode: str = "train_correlated"
    region: str = "seen_left"
    seed: int = 0
    success: bool = True

    @property
    def length(self) -> int:
        return int(self.states.shape[0])

    @property
    def marker_dim(self) -> int:
        return int(self.marker_values.shape[1])


@dataclass
class PlayRecord:
    """Unlabeled observations of one scene: frames but no actions."""

    task: str
    scene: dict
    prompts: List[str]
    markers: List[Marker]
    resolved_ids: List[int]
    static: np.ndarray
    ego: np.ndarray
    masked_static: np.ndarray
    masked_ego: np.ndarray
    states: np.ndarray
    marker_present: np.ndarray
    marker_values: np.ndarray
    box_keys: np.ndarray
    boxes_static: np.ndarray
    boxes_ego: np.ndarray
    mode: str = "test_decorrelated"
    region: str = "seen_left"
    seed: int = 0

    @property
    def length(self) -> int:
        return int(self.states.shape[0])


@dataclass
class Dataset:
    task: str
    seed: int
    marker_dim: int
    noise_std: float
    dropout_prob: float
    validation_fraction: float
    action_noise: float = 0.0
    episodes: List[EpisodeRecord] = field(default_factory=list)
    play: List[PlayRecord] = field(default_factory=list)


def _resolve_guidance(
    scene: SceneSpec,
    prompts: Sequence[str],
    markers: Sequence[Marker],
    library: Optional[Dict[str, Tuple[str, ...]]],
) -> List[int]:
    resolved = {m.object_id for m in markers}
    for prompt in prompts:
        try:
            resolved.update(resolve_prompt(prompt, scene, library))
        except UnresolvedPrompt:
            logger.warning("ignoring prompt with no match: %r", prompt)
    if not resolved:
        raise EpisodeDiscarded("no markers and no resolvable prompt; nothing is relevant")
    return sorted(resolved)


def _stack_boxes(
    box_dicts: Sequence[Dict[int, Tuple[int, int, int, int]]], box_keys: Sequence[int]
) -> np.ndarray:
    out = np.zeros((len(box_dicts), len(box_keys), 4), dtype=np.int32)
    for t, boxes in enumerate(box_dicts):
        for k, key in enumerate(box_keys):
            out[t, k] = boxes[key]
    return out


def assemble_episode(
    task: str,
    initial_scene: dict,
    frames: Sequence[dict],
    actions: Sequence[ActionCommand],
    prompts: Sequence[str],
    markers: Sequence[Marker],
    mode: str,
    region: str,
    seed: int,
    library: Optional[Dict[str, Tuple[str, ...]]] = None,
) -> EpisodeRecord:
    """Compile captured frames and guidance into a stored episode.

    Resolution is episode-level: the relevant set is the union over prompts
    and marker hosts, then each frame is masked with that set's boxes for
    that frame (objects can move, so boxes are per-frame).
    """
    if len(frames) == 0 or len(frames) != len(actions):
        raise ValueError("need one action per captured frame")
    scene0 = SceneSpec.from_dict(initial_scene)
    resolved = _resolve_guidance(scene0, prompts, markers, library)

    box_keys = sorted(frames[0]["boxes_static"].keys())
    static = np.stack([f["static"] for f in frames])
    ego = np.stack([f["ego"] for f in frames])
    masked_static = np.stack(
        [
            mask_observation(f["static"], [f["boxes_static"][i] for i in resolved])
            for f in frames
        ]
    )
    masked_ego = np.stack(
        [mask_observation(f["ego"], [f["boxes_ego"][i] for i in resolved]) for f in frames]
    )
    return EpisodeRecord(
        task=task,
        scene=initial_scene,
        prompts=list(prompts),
        markers=list(markers),
        resolved_ids=resolved,
        static=static,
        ego=ego,
        masked_static=masked_static,
        masked_ego=masked_ego,
        states=np.stack([f["state"] for f in frames]).astype(np.float32),
        actions=np.stack([a.as_vector() for a in actions]).astype(np.float32),
        marker_present=np.array([f["marker_present"] for f in frames], dtype=bool),
        marker_values=np.stack([f["marker_values"] for f in frames]).astype(np.float32),
        box_keys=np.array(box_keys, dtype=np.int32),
        boxes_static=_stack_boxes([f["boxes_static"] for f in frames], box_keys),
        boxes_ego=_stack_boxes([f["boxes_ego"] for f in frames], box_keys),
        mode=mode,
        region=region,
        seed=seed,
        success=True,
    )


def record_episode(
    scene: SceneSpec,
    markers: Optional[Sequence[Marker]] = None,
    prompts: Optional[Sequence[str]] = None,
    noise_std: float = 0.0,
    dropout_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    horizon: int = world.MAX_STEPS,
    action_noise: float = 0.0,
    library: Optional[Dict[str, Tuple[str, ...]]] = None,
) -> EpisodeRecord:
    """Run the scripted expert on a scene and record the demonstration.

    With action_noise > 0 the executed velocity is jittered while the clean
    expert command is what gets stored, so the dataset covers states slightly
    off the expert's own path with labels that steer back onto it.  Raises
    EpisodeDiscarded if the expert does not succeed within the horizon; only
    successful demonstrations enter datasets.  The scene is mutated (held
    objects move); pass a copy to keep the original.
    """
    if rng is None and action_noise > 0:
        rng = np.random.default_rng(scene.seed)
    if markers is None:
        markers = world.markers_for(scene)
    if prompts is None:
        prompts = [world.prompt_for(scene, rng)]
    initial = scene.to_dict()
    agent = world.initial_agent_state(scene)
    frames, actions = [], []
    done = False
    for _ in range(horizon):
        frames.append(capture_frame(scene, agent, markers, noise_std, dropout_prob, rng))
        action = world.expert_action(scene, agent)
        actions.append(action)
        executed = action
        if action_noise > 0:
            executed = world.ActionCommand(
                velocity=action.velocity + rng.normal(0.0, action_noise, size=2),
                gripper_toggle=action.gripper_toggle,
            )
        agent = world.step(scene, agent, executed)
        if world.failed(scene, agent):
            raise EpisodeDiscarded("expert run hit a failure condition")
        if world.success(scene, agent):
            done = True
            break
    if not done:
        raise EpisodeDiscarded("expert run exceeded the horizon")
    return assemble_episode(
        task=scene.task,
        initial_scene=initial,
        frames=frames,
        actions=actions,
        prompts=prompts,
        markers=markers,
        mode=scene.mode,
        region=scene.region,
        seed=scene.seed,
        library=library,
    )


def record_play_scene(
    scene: SceneSpec,
    observations: int = 3,
    markers: Optional[Sequence[Marker]] = None,
    prompts: Optional[Sequence[str]] = None,
    noise_std: float = 0.0,
    dropout_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    library: Optional[Dict[str, Tuple[str, ...]]] = None,
) -> PlayRecord:
    """Photograph a scene from a few random agent poses, without acting.

    Play scenes are cheap: no demonstration, just observations with the same
    guidance annotations as real episodes.  They exist to decorrelate the
    visual statistics the second training phase sees.
    """
    if rng is None:
        rng = np.random.default_rng(scene.seed)
    if markers is None:
        markers = world.markers_for(scene)
    if prompts is None:
        prompts = [world.prompt_for(scene, rng)]
    scene0 = scene.to_dict()
    resolved = _resolve_guidance(scene, prompts, markers, library)
    frames = []
    for _ in range(observations):
        agent = AgentState(position=rng.uniform(0.08, 0.92, size=2))
        frames.append(capture_frame(scene, agent, markers, noise_std, dropout_prob, rng))
    box_keys = sorted(frames[0]["boxes_static"].keys())
    masked_static = np.stack(
        [
            mask_observation(f["static"], [f["boxes_static"][i] for i in resolved])
            for f in frames
        ]
    )
    masked_ego = np.stack(
        [mask_observation(f["ego"], [f["boxes_ego"][i] for i in resolved]) for f in frames]
    )
    return PlayRecord(
        task=scene.task,
        scene=scene0,
        prompts=list(prompts),
        markers=list(markers),
        resolved_ids=resolved,
        static=np.stack([f["static"] for f in frames]),
        ego=np.stack([f["ego"] for f in frames]),
        masked_static=masked_static,
        masked_ego=masked_ego,
        states=np.stack([f["state"] for f in frames]).astype(np.float32),
        marker_present=np.array([f["marker_present"] for f in frames], dtype=bool),
        marker_values=np.stack([f["marker_values"] for f in frames]).astype(np.float32),
        box_keys=np.array(box_keys, dtype=np.int32),
        boxes_static=_stack_boxes([f["boxes_static"] for f in frames], box_keys),
        boxes_ego=_stack_boxes([f["boxes_ego"] for f in frames], box_keys),
        mode=scene.mode,
        region=scene.region,
        seed=scene.seed,
    )


def build_dataset(
    task: str,
    n_demos: int = 40,
    n_play: int = 40,
    seed: int = 0,
    noise_std: float = 0.0,
    dropout_prob: float = 0.0,
    validation_fraction: float = 0.1,
    play_observations: int = 3,
    action_noise: float = 0.1,
) -> Dataset:
    """Scripted data collection for one task.

    Demonstrations come from correlated training scenes alternating between
    the two seen regions.  Play scenes cycle through all three regions with
    the confound decorrelated, covering layouts the demonstrations never
    visit.  Scene seeds derive from the dataset seed, so the whole dataset
    is a pure function of its arguments.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    dataset = Dataset(
        task=task,
        seed=seed,
        marker_dim=world.marker_dim(task),
        noise_std=noise_std,
        dropout_prob=dropout_prob,
        validation_fraction=validation_fraction,
        action_noise=action_noise,
    )
    scene_seed = seed * 100_000
    demos = 0
    while demos < n_demos:
        region = world.SEEN_REGIONS[demos % 2]
        scene = world.sample_scene(task, "train_correlated", region, scene_seed)
        scene_seed += 1
        try:
            episode = record_episode(
                scene,
                noise_std=noise_std,
                dropout_prob=dropout_prob,
                rng=rng,
                action_noise=action_noise,
            )
        except EpisodeDiscarded as exc:
            logger.warning("discarding demo scene %s: %s", scene.seed, exc)
            continue
        dataset.episodes.append(episode)
        demos += 1

    regions = list(world.SEEN_REGIONS) + [world.UNSEEN_REGION]
    for i in range(n_play):
        scene = world.sample_scene(task, "test_decorrelated", regions[i % 3], scene_seed)
        scene_seed += 1
        dataset.play.append(
            record_play_scene(
                scene,
                observations=play_observations,
                noise_std=noise_std,
                dropout_prob=dropout_prob,
                rng=rng,
            )
        )
    return dataset


# --------------------------------------------------------------------------
# Persistence

_EPISODE_ARRAYS = (
    "static",
    "ego",
    "masked_static",
    "masked_ego",
    "states",
    "actions",
    "marker_present",
    "marker_values",
    "box_keys",
    "boxes_static",
    "boxes_ego",
)
_PLAY_ARRAYS = tuple(a for a in _EPISODE_ARRAYS if a != "actions")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_record(root: Path, subdir: str, record, array_names) -> List[str]:
    directory = root / subdir
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {name: getattr(record, name) for name in array_names}
    np.savez_compressed(directory / "arrays.npz", **arrays)
    sidecar = {
        "task": record.task,
        "scene": record.scene,
        "prompts": record.prompts,
        "markers": [[m.marker_id, m.object_id] for m in record.markers],
        "resolved_ids": [int(i) for i in record.resolved_ids],
        "mode": record.mode,
        "region": record.region,
        "seed": record.seed,
        "frames": record.length,
    }
    if hasattr(record, "success"):
        sidecar["success"] = record.success
    with open(directory / "meta.json", "w") as handle:
        json.dump(sidecar, handle, indent=1)
    return [f"{subdir}/arrays.npz", f"{subdir}/meta.json"]


def _read_record(root: Path, subdir: str, cls, array_names):
    directory = root / subdir
    with open(directory / "meta.json") as handle:
        sidecar = json.load(handle)
    with np.load(directory / "arrays.npz") as npz:
        arrays = {name: npz[name] for name in array_names}
    kwargs = dict(
        task=sidecar["task"],
        scene=sidecar["scene"],
        prompts=list(sidecar["prompts"]),
        markers=[Marker(int(m[0]), int(m[1])) for m in sidecar["markers"]],
        resolved_ids=[int(i) for i in sidecar["resolved_ids"]],
        mode=sidecar["mode"],
        region=sidecar["region"],
        seed=int(sidecar["seed"]),
        **arrays,
    )
    if cls is EpisodeRecord:
        kwargs["success"] = bool(sidecar.get("success", True))
    return cls(**kwargs)


def save_dataset(dataset: Dataset, root) -> None:
    """Write the dataset under ``root`` with a checksummed manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files: List[str] = []
    episode_dirs, play_dirs = [], []
    for i, episode in enumerate(dataset.episodes):
        subdir = f"episodes/ep_{i:04d}"
        files.extend(_write_record(root, subdir, episode, _EPISODE_ARRAYS))
        episode_dirs.append(subdir)
    for i, play in enumerate(dataset.play):
        subdir = f"play/play_{i:04d}"
        files.extend(_write_record(root, subdir, play, _PLAY_ARRAYS))
        play_dirs.append(subdir)
    manifest = {
        "format_version": FORMAT_VERSION,
        "task": dataset.task,
        "seed": dataset.seed,
        "marker_dim": dataset.marker_dim,
        "noise_std": dataset.noise_std,
        "action_noise": dataset.action_noise,
        "dropout_prob": dataset.dropout_prob,
        "validation_fraction": dataset.validation_fraction,
        "episodes": episode_dirs,
        "play": play_dirs,
        "checksums": {rel: _sha256(root / rel) for rel in files},
    }
    with open(root / "manifest.json", "w") as handle:
        json.dump(manifest, handle, indent=1)


def load_dataset(root) -> Dataset:
    """Load and verify a dataset directory.

    Raises DatasetVersionError on a format mismatch, DatasetMissingFiles
    listing what is absent, and DatasetChecksumError naming the first file
    whose bytes changed since save.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetMissingFiles(f"no manifest at {manifest_path}")
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"dataset format {version!r} != supported {FORMAT_VERSION}"
        )
    missing = [rel for rel in manifest["checksums"] if not (root / rel).exists()]
    if missing:
        raise DatasetMissingFiles(f"missing dataset files: {missing}")
    for rel, expected in manifest["checksums"].items():
        actual = _sha256(root / rel)
        if actual != expected:
            raise DatasetChecksumError(f"checksum mismatch in {rel}")

    dataset = Dataset(
        task=manifest["task"],
        seed=int(manifest["seed"]),
        marker_dim=int(manifest["marker_dim"]),
        noise_std=float(manifest["noise_std"]),
        action_noise=float(manifest.get("action_noise", 0.0)),
        dropout_prob=float(manifest["dropout_prob"]),
        validation_fraction=float(manifest["validation_fraction"]),
    )
    for subdir in manifest["episodes"]:
        dataset.episodes.append(_read_record(root, subdir, EpisodeRecord, _EPISODE_ARRAYS))
    for subdir in manifest["play"]:
        dataset.play.append(_read_record(root, subdir, PlayRecord, _PLAY_ARRAYS))
    return dataset


def append_episode(root, episode: EpisodeRecord) -> int:
    """Add one episode to an existing (or fresh) dataset directory.

    Used by the teleoperation service.  Returns the episode's index.  The
    manifest is rewritten with updated checksums; concurrent writers must
    serialize externally.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as handle:
            manifest = json.load(handle)
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetVersionError("cannot append to a different format version")
        if manifest["task"] != episode.task:
            raise DatasetError(
                f"dataset holds task {manifest['task']!r}, episode is {episode.task!r}"
            )
    else:
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": FORMAT_VERSION,
            "task": episode.task,
            "seed": episode.seed,
            "marker_dim": episode.marker_dim,
            "noise_std": 0.0,
            "dropout_prob": 0.0,
            "validation_fraction": 0.1,
            "episodes": [],
            "play": [],
            "checksums": {},
        }
    index = len(manifest["episodes"])
    subdir = f"episodes/ep_{index:04d}"
    files = _write_record(root, subdir, episode, _EPISODE_ARRAYS)
    manifest["episodes"].append(subdir)
    for rel in files:
        manifest["checksums"][rel] = _sha256(root / rel)
    with open(manifest_path, "w") as handle:
        json.dump(manifest, handle, indent=1)
    return index


def validation_split(
    dataset: Dataset, fraction: Optional[float] = None
) -> Tuple[List[int], List[int]]:
    """Deterministic episode-level split driven by the dataset seed.

    The same dataset always yields the same held-out episodes, so validation
    metrics are comparable across runs and resumes.  ``fraction`` overrides
    the dataset's stored validation fraction when given.
    """
    n = len(dataset.episodes)
    if n == 0:
        raise ValueError("dataset has no episodes")
    frac = dataset.validation_fraction if fraction is None else fraction
    n_val = max(1, round(n * frac)) if n > 1 else 0
    order = np.random.default_rng(np.random.SeedSequence((dataset.seed, 29))).permutation(n)
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    return train, val
