"""Deterministic 2-D tabletop simulator.

The table is the unit square with y pointing up; row 0 of a rendered image is
the top edge (y = 1).  Two cameras observe it: a fixed overhead camera at
64x64 covering the whole table, and an agent-centered camera at 32x32
covering a 0.25-unit window.  Rendering is a pure function of scene and agent
state and produces uint8 arrays whose colors are drawn from a fixed palette,
so images survive storage round trips exactly.

Scenes are sampled in one of two modes.  In ``train_correlated`` a designated
confound object is placed deterministically relative to the task's true cause
(offset for position cues, side-switched for the light cue), so the confound
is as predictive as the cause on training data.  In ``test_decorrelated`` the
confound is placed independently, which is what exposes shortcut policies.

Physical markers are small checkerboard glyphs attached to scene objects.
They exist only at data-collection time: rendering draws them only when a
marker list is passed in, and marker readings are separate numeric outputs
with optional per-frame dropout and gaussian noise.
"""

from __future__ import annotations

import copy as _copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "DT",
    "MAX_STEPS",
    "MAX_SPEED",
    "GRASP_RADIUS",
    "GOAL_RADIUS",
    "CONFOUND_OFFSET",
    "STATIC_RES",
    "EGO_RES",
    "EGO_HALF",
    "REGIONS",
    "SEEN_REGIONS",
    "UNSEEN_REGION",
    "AGENT_BOX_KEY",
    "TASK_NAMES",
    "SceneObject",
    "SceneSpec",
    "AgentState",
    "ActionCommand",
    "Marker",
    "sample_scene",
    "initial_agent_state",
    "step",
    "render",
    "view_rect",
    "marker_readings",
    "ground_truth_boxes",
    "markers_for",
    "prompt_for",
    "expert_action",
    "success",
    "failed",
    "marker_dim",
]

# Simulation constants.
DT = 0.1                     # seconds per step
MAX_STEPS = 400              # hard episode cap
MAX_SPEED = 1.0              # table units per second, euclidean clip
APPROACH_FLOOR = 0.3         # scripted teachers never creep slower than this
GRASP_RADIUS = 0.03          # gripper-to-object distance for a grab
GOAL_RADIUS = 0.05           # proximity that counts as reaching a goal
CONFOUND_OFFSET = (0.12, 0.0)
AGENT_MARGIN = 0.02          # agent position clipped to [margin, 1-margin]
LIFT_LINE = 0.88             # picking succeeds when holding target above this

# Cameras.
STATIC_RES = 64
EGO_RES = 32
EGO_HALF = 0.125             # half-width of the agent-centered view

# Horizontal bands used to place the task's true cause.  The unseen band is
# disjoint from both seen bands, so test scenes there are genuinely novel.
REGIONS: Dict[str, Tuple[float, float]] = {
    "seen_left": (0.08, 0.30),
    "seen_right": (0.70, 0.84),
    "unseen_center": (0.36, 0.64),
}
SEEN_REGIONS = ("seen_left", "seen_right")
UNSEEN_REGION = "unseen_center"

MODES = ("train_correlated", "test_decorrelated")

AGENT_BOX_KEY = -1           # key for the agent entry in ground-truth boxes

# Palette (uint8).  Keeping every color an exact byte triple makes renders
# reproducible across save/load without any tolerance.
BACKGROUND = (214, 214, 208)
VOID = (15, 15, 18)          # outside the table, visible in edge ego views
AGENT_OPEN = (40, 40, 45)
AGENT_CLOSED = (16, 92, 160)
MARKER_DARK = (0, 0, 0)
MARKER_LIGHT = (255, 255, 255)
LIGHT_ON = (255, 214, 40)
LIGHT_OFF = (110, 110, 112)

AGENT_ARM = 0.035            # half-length of the agent plus-glyph
AGENT_THICK = 0.009          # half-thickness of the glyph strokes
MARKER_CELL = 1.0 / STATIC_RES   # marker checker cell, one overhead pixel
BOX_PAD_PX = 2               # padding added around tight boxes


@dataclass
class SceneObject:
    """One object on the table.

    ``shape`` is derived from the class label at construction: block-like
    labels render as axis-aligned squares, the light as a fixed patch, and
    everything else as a circle.  ``relevant`` is ground truth about whether
    the object causally matters for the task; it is never exposed to
    learners, only to evaluation and masking code.
    """

    id: int
    class_label: str
    position: np.ndarray
    radius: float
    color: Tuple[int, int, int]
    graspable: bool = False
    relevant: bool = False
    state: Dict[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float).reshape(2)

    @property
    def shape(self) -> str:
        label = self.class_label
        if "light" in label:
            return "patch"
        if "block" in label or "box" in label or "cube" in label:
            return "square"
        return "circle"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "class_label": self.class_label,
            "position": [float(self.position[0]), float(self.position[1])],
            "radius": self.radius,
            "color": list(self.color),
            "graspable": self.graspable,
            "relevant": self.relevant,
            "state": dict(self.state),
        }

    @staticmethod
    def from_dict(data: dict) -> "SceneObject":
        return SceneObject(
            id=int(data["id"]),
            class_label=data["class_label"],
            position=np.array(data["position"], dtype=float),
            radius=float(data["radius"]),
            color=tuple(int(c) for c in data["color"]),
            graspable=bool(data["graspable"]),
            relevant=bool(data["relevant"]),
            state={k: bool(v) for k, v in data.get("state", {}).items()},
        )


@dataclass
class SceneSpec:
    """Full description of one sampled episode setup."""

    task: str
    mode: str
    region: str
    objects: List[SceneObject]
    agent_start: np.ndarray
    light_on: Optional[bool] = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.agent_start = np.asarray(self.agent_start, dtype=float).reshape(2)

    def object_by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(f"no object with id {object_id}")

    def object_by_label(self, label: str) -> SceneObject:
        for obj in self.objects:
            if obj.class_label == label:
                return obj
        raise KeyError(f"no object labelled {label!r}")

    def copy(self) -> "SceneSpec":
        return _copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "mode": self.mode,
            "region": self.region,
            "objects": [o.to_dict() for o in self.objects],
            "agent_start": [float(self.agent_start[0]), float(self.agent_start[1])],
            "light_on": self.light_on,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(data: dict) -> "SceneSpec":
        return SceneSpec(
            task=data["task"],
            mode=data["mode"],
            region=data["region"],
            objects=[SceneObject.from_dict(o) for o in data["objects"]],
            agent_start=np.array(data["agent_start"], dtype=float),
            light_on=data.get("light_on"),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class AgentState:
    position: np.ndarray
    gripper_closed: bool = False
    held_object_id: Optional[int] = None

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float).reshape(2)

    def as_vector(self) -> np.ndarray:
        """Numeric form fed to the policy: (x, y, gripper flag)."""
        return np.array(
            [self.position[0], self.position[1], 1.0 if self.gripper_closed else 0.0],
            dtype=np.float32,
        )

    def to_dict(self) -> dict:
        return {
            "position": [float(self.position[0]), float(self.position[1])],
            "gripper_closed": self.gripper_closed,
            "held_object_id": self.held_object_id,
        }


@dataclass
class ActionCommand:
    velocity: np.ndarray
    gripper_toggle: bool = False

    def __post_init__(self) -> None:
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(2)

    def as_vector(self) -> np.ndarray:
        """(vx, vy, toggle flag) as trained and stored."""
        return np.array(
            [self.velocity[0], self.velocity[1], 1.0 if self.gripper_toggle else 0.0],
            dtype=np.float32,
        )


@dataclass(frozen=True)
class Marker:
    """Physical marker attached to a host object, identified by `marker_id`.

    Readings are ordered by marker id, so the id fixes which slice of the
    marker vector the host occupies.
    """

    marker_id: int
    object_id: int


# --------------------------------------------------------------------------
# Dynamics


def initial_agent_state(scene: SceneSpec) -> AgentState:
    if scene.task == "conditional_stack":
        held = scene.object_by_label("red block")
        return AgentState(
            position=scene.agent_start.copy(), gripper_closed=True, held_object_id=held.id
        )
    return AgentState(position=scene.agent_start.copy())


def step(scene: SceneSpec, agent: AgentState, action: ActionCommand) -> AgentState:
    """Advance one tick.  Mutates the held object's position inside `scene`.

    Velocity is clipped to MAX_SPEED euclidean; position is clipped to the
    table with a small margin.  A gripper toggle while open grabs the nearest
    graspable object within GRASP_RADIUS (if any); a toggle while closed
    releases.  Dynamics contain no randomness.
    """
    velocity = np.asarray(action.velocity, dtype=float).reshape(2)
    speed = float(np.linalg.norm(velocity))
    if speed > MAX_SPEED:
        velocity = velocity * (MAX_SPEED / speed)
    new_position = np.clip(
        agent.position + velocity * DT, AGENT_MARGIN, 1.0 - AGENT_MARGIN
    )

    gripper_closed = agent.gripper_closed
    held = agent.held_object_id
    if action.gripper_toggle:
        if gripper_closed:
            gripper_closed = False
            held = None
        else:
            gripper_closed = True
            nearest, nearest_dist = None, GRASP_RADIUS
            for obj in scene.objects:
                if not obj.graspable:
                    continue
                dist = float(np.linalg.norm(obj.position - new_position))
                if dist <= nearest_dist:
                    nearest, nearest_dist = obj, dist
            held = nearest.id if nearest is not None else None

    if held is not None:
        scene.object_by_id(held).position = new_position.copy()

    return AgentState(position=new_position, gripper_closed=gripper_closed, held_object_id=held)


# --------------------------------------------------------------------------
# Rendering


def view_rect(camera: str, agent: Optional[AgentState] = None):
    """(x0, y0, x1, y1, resolution) of a camera's world window."""
    if camera == "static":
        return 0.0, 0.0, 1.0, 1.0, STATIC_RES
    if camera == "ego":
        if agent is None:
            raise ValueError("ego view needs the agent state")
        ax, ay = float(agent.position[0]), float(agent.position[1])
        return ax - EGO_HALF, ay - EGO_HALF, ax + EGO_HALF, ay + EGO_HALF, EGO_RES
    raise ValueError(f"unknown camera {camera!r}")


def _pixel_centers(x0, y0, x1, y1, res):
    # Pixel (row, col) centers in world coordinates; row 0 is the top.
    span = x1 - x0
    cols = x0 + (np.arange(res) + 0.5) * span / res
    rows = y1 - (np.arange(res) + 0.5) * (y1 - y0) / res
    return np.meshgrid(cols, rows)  # each (res, res)


def _paint_object(canvas, xc, yc, obj: SceneObject) -> None:
    ox, oy = float(obj.position[0]), float(obj.position[1])
    if obj.shape == "circle":
        mask = (xc - ox) ** 2 + (yc - oy) ** 2 <= obj.radius**2
    else:  # square and patch share axis-aligned box geometry
        mask = (np.abs(xc - ox) <= obj.radius) & (np.abs(yc - oy) <= obj.radius)
    color = obj.color
    if obj.shape == "patch":
        color = LIGHT_ON if obj.state.get("on") else LIGHT_OFF
    canvas[mask] = color


def _paint_marker(canvas, xc, yc, host: SceneObject) -> None:
    # 3x3 checkerboard glyph centered on the host, cell = one overhead pixel.
    ox, oy = float(host.position[0]), float(host.position[1])
    ci = np.floor((xc - ox) / MARKER_CELL + 1.5)
    cj = np.floor((oy - yc) / MARKER_CELL + 1.5)
    inside = (ci >= 0) & (ci <= 2) & (cj >= 0) & (cj <= 2)
    parity = np.mod(ci + cj, 2) == 0
    canvas[inside & parity] = MARKER_DARK
    canvas[inside & ~parity] = MARKER_LIGHT


def _paint_agent(canvas, xc, yc, agent: AgentState) -> None:
    ax, ay = float(agent.position[0]), float(agent.position[1])
    horiz = (np.abs(yc - ay) <= AGENT_THICK) & (np.abs(xc - ax) <= AGENT_ARM)
    vert = (np.abs(xc - ax) <= AGENT_THICK) & (np.abs(yc - ay) <= AGENT_ARM)
    canvas[horiz | vert] = AGENT_CLOSED if agent.gripper_closed else AGENT_OPEN


def render(
    scene: SceneSpec,
    agent: AgentState,
    camera: str = "static",
    markers: Optional[Sequence[Marker]] = None,
) -> np.ndarray:
    """Render one camera view as a (res, res, 3) uint8 array.

    Draw order: void, table, agent, objects in id order, marker glyphs.
    The agent sits under the objects so that a gripper hovering over its
    grasp point never hides the very pixels that locate the object; the
    agent's own pose is already available exactly in the state vector.
    Passing ``markers=None`` produces the marker-free image used for stored
    observations; the same call with the session's markers produces what the
    human teacher sees.
    """
    x0, y0, x1, y1, res = view_rect(camera, agent)
    xc, yc = _pixel_centers(x0, y0, x1, y1, res)
    canvas = np.empty((res, res, 3), dtype=np.uint8)
    canvas[:] = VOID
    on_table = (xc >= 0.0) & (xc <= 1.0) & (yc >= 0.0) & (yc <= 1.0)
    canvas[on_table] = BACKGROUND
    _paint_agent(canvas, xc, yc, agent)
    for obj in sorted(scene.objects, key=lambda o: o.id):
        _paint_object(canvas, xc, yc, obj)
    if markers:
        for marker in sorted(markers, key=lambda m: m.marker_id):
            _paint_marker(canvas, xc, yc, scene.object_by_id(marker.object_id))
    return canvas


# --------------------------------------------------------------------------
# Ground truth annotations


def _world_box_to_pixels(wx0, wy0, wx1, wy1, camera_rect):
    x0, y0, x1, y1, res = camera_rect
    width = x1 - x0
    col0 = math.floor((wx0 - x0) / width * res) - BOX_PAD_PX
    col1 = math.ceil((wx1 - x0) / width * res) + BOX_PAD_PX
    row0 = math.floor((y1 - wy1) / (y1 - y0) * res) - BOX_PAD_PX
    row1 = math.ceil((y1 - wy0) / (y1 - y0) * res) + BOX_PAD_PX
    col0, col1 = max(col0, 0), min(col1, res)
    row0, row1 = max(row0, 0), min(row1, res)
    if col0 >= col1 or row0 >= row1:
        return (0, 0, 0, 0)
    return (row0, col0, row1, col1)


def ground_truth_boxes(
    scene: SceneSpec, agent: AgentState, camera: str = "static"
) -> Dict[int, Tuple[int, int, int, int]]:
    """Per-object pixel bounding boxes for one camera view.

    Boxes are (row0, col0, row1, col1), half-open, padded by 2 pixels and
    clipped to the frame; an object entirely outside the view gets the empty
    box (0, 0, 0, 0).  The agent occupies the extra key AGENT_BOX_KEY, so the
    union of all boxes covers every non-background pixel of the marker-free
    render.  This is privileged information: training code may use it only
    to build masked observations from demonstration data.
    """
    rect = view_rect(camera, agent)
    boxes: Dict[int, Tuple[int, int, int, int]] = {}
    for obj in scene.objects:
        ox, oy = float(obj.position[0]), float(obj.position[1])
        r = obj.radius
        boxes[obj.id] = _world_box_to_pixels(ox - r, oy - r, ox + r, oy + r, rect)
    ax, ay = float(agent.position[0]), float(agent.position[1])
    boxes[AGENT_BOX_KEY] = _world_box_to_pixels(
        ax - AGENT_ARM, ay - AGENT_ARM, ax + AGENT_ARM, ay + AGENT_ARM, rect
    )
    return boxes


def marker_readings(
    scene: SceneSpec,
    markers: Sequence[Marker],
    noise_std: float = 0.0,
    dropout_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Optional[np.ndarray]:
    """Noisy marker positions for one frame, or None when the frame drops.

    Dropout is frame-level: with probability ``dropout_prob`` the whole
    reading vector is absent, mimicking detection running on a subset of
    frames.  Otherwise each marker reports its host position plus isotropic
    gaussian noise, concatenated in marker-id order into a vector of length
    2 * len(markers).
    """
    if not markers:
        return np.zeros(0, dtype=np.float32)
    if (noise_std > 0.0 or dropout_prob > 0.0) and rng is None:
        raise ValueError("noisy or dropped readings need an rng")
    if dropout_prob > 0.0 and rng.random() < dropout_prob:
        return None
    parts = []
    for marker in sorted(markers, key=lambda m: m.marker_id):
        pos = scene.object_by_id(marker.object_id).position.astype(np.float64)
        if noise_std > 0.0:
            pos = pos + rng.normal(0.0, noise_std, size=2)
        parts.append(pos)
    return np.concatenate(parts).astype(np.float32)


def marker_dim(task: str) -> int:
    return 2 * len(_TASKS[task].marker_hosts)


# --------------------------------------------------------------------------
# Scene sampling


def _sample_in(rng, x_range, y_range):
    return np.array(
        [rng.uniform(x_range[0], x_range[1]), rng.uniform(y_range[0], y_range[1])]
    )


def _place_clear(rng, x_range, y_range, radius, placed, min_gap=0.02, tries=200):
    # Rejection-sample a position keeping pairwise clearance from `placed`,
    # a list of (position, radius) tuples.
    for _ in range(tries):
        pos = _sample_in(rng, x_range, y_range)
        ok = True
        for other_pos, other_radius in placed:
            if np.linalg.norm(pos - other_pos) < radius + other_radius + min_gap:
                ok = False
                break
        if ok:
            return pos
    raise RuntimeError("could not place object without overlap")


def _confound_position(rng, cause_position, mode, placed):
    if mode == "train_correlated":
        return np.asarray(cause_position, dtype=float) + np.array(CONFOUND_OFFSET)
    return _place_clear(rng, (0.06, 0.94), (0.12, 0.70), 0.05, placed)


@dataclass(frozen=True)
class _TaskDef:
    name: str
    marker_hosts: Tuple[str, ...]          # class labels carrying markers, in marker-id order
    prompt_templates: Tuple[str, ...]
    build: Callable[[str, str, np.random.Generator, int], SceneSpec]
    expert: Callable[[SceneSpec, AgentState], ActionCommand]
    success: Callable[[SceneSpec, AgentState], bool]
    failed: Callable[[SceneSpec, AgentState], bool]


def _build_picking(mode, region, rng, seed) -> SceneSpec:
    x_range = REGIONS[region]
    target_pos = _sample_in(rng, x_range, (0.20, 0.55))
    placed = [(target_pos, 0.035)]
    confound_pos = _confound_position(rng, target_pos, mode, placed)
    placed.append((confound_pos, 0.045))

    objects = [
        SceneObject(0, "red block", target_pos, 0.035, (217, 30, 24), graspable=True, relevant=True),
        SceneObject(1, "blue bowl", confound_pos, 0.045, (36, 84, 204)),
    ]
    distractors = [
        ("green block", 0.035, (26, 158, 66), True),
        ("yellow cup", 0.030, (230, 196, 28), True),
        ("purple ball", 0.030, (142, 36, 170), True),
    ]
    for i, (label, radius, color, graspable) in enumerate(distractors):
        # Distractors keep extra clearance from the target so the expert's
        # grasp always closes on the target itself.
        pos = _place_clear(rng, (0.06, 0.94), (0.12, 0.70), radius, placed, min_gap=0.05)
        placed.append((pos, radius))
        objects.append(SceneObject(2 + i, label, pos, radius, color, graspable=graspable))

    start = np.array([rng.uniform(0.40, 0.60), 0.08])
    return SceneSpec("picking", mode, region, objects, start, light_on=None, seed=seed)


def _approach(delta: np.ndarray) -> ActionCommand:
    """Proportional approach with a floored speed.

    Pure proportional control decays toward zero at the goal, and a policy
    regressed on such demonstrations inherits velocities that stall just
    outside the commit zone.  Flooring the speed keeps demonstrated
    approach labels decisively nonzero all the way in; the zone geometry
    (commit radius under half a floored step away from every toggle or
    release threshold) still guarantees convergence without orbiting.
    """
    dist = float(np.linalg.norm(delta))
    speed = max(4.0 * dist, APPROACH_FLOOR)
    return ActionCommand(speed * delta / max(dist, 1e-9), gripper_toggle=False)


def _picking_expert(scene: SceneSpec, agent: AgentState) -> ActionCommand:
    target = scene.object_by_label("red block")
    if agent.held_object_id == target.id:
        return ActionCommand(np.array([0.0, 1.0]), gripper_toggle=False)
    delta = target.position - agent.position
    # Toggle zone sits inside GRASP_RADIUS with margin, so a grab never
    # closes on air even with a step of drift.
    if np.linalg.norm(delta) <= 0.025:
        return ActionCommand(np.zeros(2), gripper_toggle=True)
    return _approach(delta)


def _picking_success(scene: SceneSpec, agent: AgentState) -> bool:
    target = scene.object_by_label("red block")
    return agent.held_object_id == target.id and agent.position[1] >= LIFT_LINE


def _picking_failed(scene: SceneSpec, agent: AgentState) -> bool:
    # Grabbing a wrong object is terminal: the gripper is busy.
    target = scene.object_by_label("red block")
    return agent.held_object_id is not None and agent.held_object_id != target.id


def _active_pad(scene: SceneSpec) -> SceneObject:
    return scene.object_by_label("blue pad" if scene.light_on else "pink pad")


def _inactive_pad(scene: SceneSpec) -> SceneObject:
    return scene.object_by_label("pink pad" if scene.light_on else "blue pad")


def _build_signal(mode, region, rng, seed) -> SceneSpec:
    light_on = bool(rng.random() < 0.5)
    x_range = REGIONS[region]
    active_pos = _sample_in(rng, x_range, (0.64, 0.80))
    # The idle pad sits apart so the goal zones never blur, but not so far
    # that the pair pins rigid-shift augmentation against the frame edges.
    for _ in range(200):
        idle_pos = _sample_in(rng, (0.06, 0.94), (0.64, 0.80))
        if 0.20 <= abs(idle_pos[0] - active_pos[0]) <= 0.45:
            break
    else:
        raise RuntimeError("could not separate signal pads")
    blue_pos, pink_pos = (active_pos, idle_pos) if light_on else (idle_pos, active_pos)
    # The pads are small near-twins on purpose: telling them apart from
    # pixels alone is meant to be hard, while their markers are unambiguous.
    objects = [
        SceneObject(0, "blue pad", blue_pos, 0.028, (152, 150, 184), relevant=True),
        SceneObject(1, "pink pad", pink_pos, 0.028, (184, 150, 152), relevant=True),
        SceneObject(2, "light", np.array([0.50, 0.93]), 0.0625, (255, 214, 40),
                    relevant=True, state={"on": light_on}),
    ]
    placed = [(o.position, max(o.radius, 0.03)) for o in objects]
    confound_pos = _confound_position(rng, active_pos, mode, placed)
    objects.append(SceneObject(3, "white cup", confound_pos, 0.030, (245, 245, 240), graspable=True))
    placed.append((confound_pos, 0.030))
    for i, (label, radius, color) in enumerate(
        [("green block", 0.035, (26, 158, 66)), ("purple ball", 0.030, (142, 36, 170))]
    ):
        pos = _place_clear(rng, (0.06, 0.94), (0.15, 0.60), radius, placed)
        placed.append((pos, radius))
        objects.append(SceneObject(4 + i, label, pos, radius, color, graspable=True))
    start = np.array([rng.uniform(0.40, 0.60), rng.uniform(0.08, 0.14)])
    return SceneSpec("signal", mode, region, objects, start, light_on=light_on, seed=seed)


def _signal_expert(scene: SceneSpec, agent: AgentState) -> ActionCommand:
    return _approach(_active_pad(scene).position - agent.position)


def _signal_success(scene: SceneSpec, agent: AgentState) -> bool:
    return float(np.linalg.norm(_active_pad(scene).position - agent.position)) <= GOAL_RADIUS


def _signal_failed(scene: SceneSpec, agent: AgentState) -> bool:
    return float(np.linalg.norm(_inactive_pad(scene).position - agent.position)) <= GOAL_RADIUS


def _correct_base(scene: SceneSpec) -> SceneObject:
    return scene.object_by_label("blue block" if scene.light_on else "pink block")


def _wrong_base(scene: SceneSpec) -> SceneObject:
    return scene.object_by_label("pink block" if scene.light_on else "blue block")


def _build_stack(mode, region, rng, seed) -> SceneSpec:
    light_on = bool(rng.random() < 0.5)
    x_range = REGIONS[region]
    correct_pos = _sample_in(rng, x_range, (0.60, 0.75))
    # The other base sits well apart so the two drop zones never blur.
    for _ in range(200):
        other_pos = _sample_in(rng, (0.06, 0.94), (0.60, 0.75))
        if abs(other_pos[0] - correct_pos[0]) >= 0.20:
            break
    else:
        raise RuntimeError("could not separate stack bases")

    blue_pos, pink_pos = (correct_pos, other_pos) if light_on else (other_pos, correct_pos)
    start = np.array([rng.uniform(0.35, 0.65), rng.uniform(0.08, 0.14)])
    objects = [
        SceneObject(0, "red block", start.copy(), 0.030, (217, 30, 24), graspable=True),
        SceneObject(1, "blue block", blue_pos, 0.035, (40, 90, 210), relevant=True),
        SceneObject(2, "pink block", pink_pos, 0.035, (236, 110, 160), relevant=True),
        SceneObject(3, "light", np.array([0.50, 0.93]), 0.0625, (255, 214, 40),
                    relevant=True, state={"on": light_on}),
    ]
    placed = [(o.position, max(o.radius, 0.03)) for o in objects]
    confound_pos = _confound_position(rng, correct_pos, mode, placed)
    objects.append(SceneObject(4, "green bowl", confound_pos, 0.045, (60, 170, 90)))
    placed.append((confound_pos, 0.045))
    pos = _place_clear(rng, (0.06, 0.94), (0.15, 0.45), 0.03, placed)
    objects.append(SceneObject(5, "yellow cup", pos, 0.030, (230, 196, 28), graspable=True))
    return SceneSpec("conditional_stack", mode, region, objects, start, light_on=light_on, seed=seed)


def _stack_expert(scene: SceneSpec, agent: AgentState) -> ActionCommand:
    red = scene.object_by_label("red block")
    if agent.held_object_id != red.id:
        # Already released; hold still (the episode ends on the same tick).
        return ActionCommand(np.zeros(2), gripper_toggle=False)
    delta = _correct_base(scene).position - agent.position
    if np.linalg.norm(delta) <= 0.025:
        return ActionCommand(np.zeros(2), gripper_toggle=True)
    return _approach(delta)


def _stack_released(scene: SceneSpec, agent: AgentState) -> bool:
    red = scene.object_by_label("red block")
    return agent.held_object_id != red.id


def _stack_success(scene: SceneSpec, agent: AgentState) -> bool:
    if not _stack_released(scene, agent):
        return False
    red = scene.object_by_label("red block")
    return float(np.linalg.norm(red.position - _correct_base(scene).position)) <= GOAL_RADIUS


def _stack_failed(scene: SceneSpec, agent: AgentState) -> bool:
    if not _stack_released(scene, agent):
        return False
    red = scene.object_by_label("red block")
    return float(np.linalg.norm(red.position - _correct_base(scene).position)) > GOAL_RADIUS


_TASKS: Dict[str, _TaskDef] = {
    "picking": _TaskDef(
        name="picking",
        marker_hosts=("red block",),
        prompt_templates=(
            "pick up the red block",
            "grab the red block and lift it",
            "lift the red block off the table",
        ),
        build=_build_picking,
        expert=_picking_expert,
        success=_picking_success,
        failed=_picking_failed,
    ),
    "signal": _TaskDef(
        name="signal",
        marker_hosts=("blue pad", "pink pad"),
        prompt_templates=(
            "watch the light",
            "look at the light",
            "follow the light",
        ),
        build=_build_signal,
        expert=_signal_expert,
        success=_signal_success,
        failed=_signal_failed,
    ),
    "conditional_stack": _TaskDef(
        name="conditional_stack",
        marker_hosts=("blue block", "pink block"),
        prompt_templates=(
            "watch the light",
            "check the light",
            "mind the light",
        ),
        build=_build_stack,
        expert=_stack_expert,
        success=_stack_success,
        failed=_stack_failed,
    ),
}

TASK_NAMES = tuple(_TASKS.keys())


def sample_scene(task: str, mode: str, region: str, seed: int) -> SceneSpec:
    """Sample a reproducible scene.  Equal arguments give equal scenes."""
    if task not in _TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASK_NAMES}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}; choose from {tuple(REGIONS)}")
    # Stable per-task stream index; hash() is process-salted and unusable here.
    task_index = TASK_NAMES.index(task)
    rng = np.random.default_rng(np.random.SeedSequence((task_index, seed)))
    return _TASKS[task].build(mode, region, rng, seed)


def markers_for(scene: SceneSpec) -> List[Marker]:
    """Default marker placement: one marker per designated host, id order."""
    hosts = _TASKS[scene.task].marker_hosts
    return [Marker(i, scene.object_by_label(label).id) for i, label in enumerate(hosts)]


def prompt_for(scene: SceneSpec, rng: Optional[np.random.Generator] = None) -> str:
    templates = _TASKS[scene.task].prompt_templates
    if rng is None:
        return templates[0]
    return templates[int(rng.integers(len(templates)))]


def expert_action(scene: SceneSpec, agent: AgentState) -> ActionCommand:
    """Scripted teacher: proportional control plus one-shot gripper toggles."""
    return _TASKS[scene.task].expert(scene, agent)


def success(scene: SceneSpec, agent: AgentState) -> bool:
    return _TASKS[scene.task].success(scene, agent)


def failed(scene: SceneSpec, agent: AgentState) -> bool:
    return _TASKS[scene.task].failed(scene, agent)
