"""Teleoperation web service.

A small request/response API through which a human teacher drives the
simulated agent, places markers, types prompts, and saves demonstrations.
The simulator is lock-step: time advances only when an action arrives, so
a recorded episode is a deterministic function of the request stream.

Endpoint summary (all JSON; full schemas in docs/service_api.md):

    POST   /api/v1/sessions                     create a session
    GET    /api/v1/sessions/{sid}/frame         teacher view + session state
    POST   /api/v1/sessions/{sid}/action        step the simulator once
    POST   /api/v1/sessions/{sid}/marker        attach a marker (pre-motion)
    POST   /api/v1/sessions/{sid}/prompt        log an utterance
    POST   /api/v1/sessions/{sid}/finish        success check; save or discard
    GET    /api/v1/sessions/{sid}/scene         privileged scene dump (drivers)
    GET    /api/v1/sessions/{sid}/expert        scripted teacher's suggestion
    GET    /api/v1/health                       liveness probe

Frames are sent as base64 PNG payloads.  Stored episodes never contain
marker glyphs; the glyphs exist only in the teacher view.  Saved episodes
append to one dataset directory through the standard pipeline, so anything
recorded here trains exactly like scripted data.
"""

from __future__ import annotations

import base64
import io
import math
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, model_validator

from .. import pipeline, world
from .config import RunConfig, default_run_dir

API_PREFIX = "/api/v1"


# --------------------------------------------------------------------------
# Request bodies


class CreateSessionBody(BaseModel):
    task: str = "picking"
    seed: int = 0
    mode: Optional[str] = None
    region: Optional[str] = None
    budget_seconds: Optional[float] = Field(default=None, gt=0)


class ActionBody(BaseModel):
    velocity: Tuple[float, float]
    gripper_toggle: bool = False

    @model_validator(mode="after")
    def _finite(self):
        if not all(math.isfinite(v) for v in self.velocity):
            raise ValueError("velocity components must be finite")
        return self


class MarkerBody(BaseModel):
    object_id: Optional[int] = None
    position: Optional[Tuple[float, float]] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.object_id is None) == (self.position is None):
            raise ValueError("provide exactly one of object_id or position")
        return self


class PromptBody(BaseModel):
    text: str = Field(min_length=1, max_length=500)


class FinishBody(BaseModel):
    save: bool = True


# --------------------------------------------------------------------------
# Session state


@dataclass
class TeleopSession:
    """One teacher's episode in progress.

    Frames are captured only when an action arrives, so frames[i] is the
    observation on which actions[i] was taken, exactly as the scripted
    recorder stores them.  A session's own lock serializes its requests;
    saved sessions never mutate again.
    """

    session_id: str
    task: str
    seed: int
    scene: world.SceneSpec
    agent: world.AgentState
    initial_scene: dict
    rng: np.random.Generator
    budget_seconds: Optional[float] = None
    markers: List[world.Marker] = field(default_factory=list)
    prompts: List[dict] = field(default_factory=list)
    frames: List[dict] = field(default_factory=list)
    actions: List[world.ActionCommand] = field(default_factory=list)
    status: str = "active"
    created: float = field(default_factory=time.monotonic)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def step(self) -> int:
        return len(self.actions)

    def elapsed(self) -> float:
        return time.monotonic() - self.created

    def over_budget(self) -> bool:
        return self.budget_seconds is not None and self.elapsed() > self.budget_seconds


def _png_b64(image: np.ndarray) -> str:
    from PIL import Image

    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def _marker_slots(task: str) -> int:
    return world.marker_dim(task) // 2


def _normalize_marker_width(frames: List[dict], width: int) -> None:
    """Pad frames captured before a late marker arrived (relaxed mode only).

    Their readings cannot be reconstructed, so they become absent frames:
    zero values, marker_present False.  Widths then stack cleanly.
    """
    for frame in frames:
        have = frame["marker_values"].shape[0]
        if have != width:
            frame["marker_values"] = np.zeros(width, dtype=np.float32)
            frame["marker_present"] = False


# --------------------------------------------------------------------------
# Application


def create_app(config: Optional[RunConfig] = None) -> FastAPI:
    config = config or RunConfig()
    app = FastAPI(title="teleoperation service", version="1.0")

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request, exc: RequestValidationError):
        # The default handler echoes the raw input back; a payload holding
        # Infinity or NaN then crashes response serialization.  Report only
        # location, message, and type.
        errors = [
            {"loc": [str(p) for p in e["loc"]], "msg": e["msg"], "type": e["type"]}
            for e in exc.errors()
        ]
        return JSONResponse(status_code=422, content={"detail": errors})

    sessions: Dict[str, TeleopSession] = {}
    store_lock = threading.Lock()
    append_lock = threading.Lock()
    episodes_dir = Path(config.out) if config.out else default_run_dir(config, "serve")

    def get_session(session_id: str) -> TeleopSession:
        with store_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return session

    def require_active(session: TeleopSession) -> None:
        if session.status != "active":
            raise HTTPException(409, f"session is {session.status}")
        if session.over_budget():
            raise HTTPException(409, "time budget exhausted; finish the session")

    def frame_payload(session: TeleopSession) -> dict:
        static = world.render(session.scene, session.agent, "static", session.markers)
        ego = world.render(session.scene, session.agent, "ego", session.markers)
        return {
            "session_id": session.session_id,
            "task": session.task,
            "status": session.status,
            "step": session.step,
            "agent": session.agent.to_dict(),
            "static_png": _png_b64(static),
            "ego_png": _png_b64(ego),
            "markers": [
                {"marker_id": m.marker_id, "object_id": m.object_id}
                for m in session.markers
            ],
            "marker_slots": _marker_slots(session.task),
            "prompts": list(session.prompts),
            "objects": [
                {
                    "id": o.id,
                    "class_label": o.class_label,
                    "position": [float(o.position[0]), float(o.position[1])],
                    "radius": o.radius,
                    "color": list(o.color),
                    "graspable": o.graspable,
                }
                for o in session.scene.objects
            ],
            "success": bool(world.success(session.scene, session.agent)),
            "elapsed_seconds": round(session.elapsed(), 3),
            "budget_seconds": session.budget_seconds,
            "can_place_marker": session.status == "active"
            and (session.step == 0 or config.allow_marker_after_motion)
            and len(session.markers) < _marker_slots(session.task),
        }

    @app.get(API_PREFIX + "/health")
    def health() -> dict:
        return {"status": "ok", "dataset_dir": str(episodes_dir)}

    @app.post(API_PREFIX + "/sessions", status_code=201)
    def create_session(body: CreateSessionBody) -> dict:
        if body.task not in world.TASK_NAMES:
            raise HTTPException(422, f"task must be one of {world.TASK_NAMES}")
        mode = body.mode or config.teleop_mode
        region = body.region or config.teleop_region
        if mode not in world.MODES:
            raise HTTPException(422, f"mode must be one of {world.MODES}")
        if region not in world.REGIONS:
            raise HTTPException(422, f"region must be one of {tuple(world.REGIONS)}")
        scene = world.sample_scene(body.task, mode, region, body.seed)
        session = TeleopSession(
            session_id=uuid.uuid4().hex[:12],
            task=body.task,
            seed=body.seed,
            scene=scene,
            agent=world.initial_agent_state(scene),
            initial_scene=scene.to_dict(),
            rng=np.random.default_rng(np.random.SeedSequence((body.seed, 23))),
            budget_seconds=body.budget_seconds
            if body.budget_seconds is not None
            else config.budget_seconds,
        )
        with store_lock:
            sessions[session.session_id] = session
        return {
            "session_id": session.session_id,
            "task": session.task,
            "step": 0,
            "marker_slots": _marker_slots(session.task),
            "budget_seconds": session.budget_seconds,
        }

    @app.get(API_PREFIX + "/sessions/{session_id}/frame")
    def get_frame(session_id: str) -> dict:
        session = get_session(session_id)
        with session.lock:
            return frame_payload(session)

    @app.post(API_PREFIX + "/sessions/{session_id}/action")
    def post_action(session_id: str, body: ActionBody) -> dict:
        session = get_session(session_id)
        with session.lock:
            require_active(session)
            if len(session.markers) < _marker_slots(session.task):
                raise HTTPException(
                    409,
                    f"place {_marker_slots(session.task)} marker(s) before driving; "
                    "marker readings are part of every stored frame",
                )
            session.frames.append(
                pipeline.capture_frame(
                    session.scene,
                    session.agent,
                    session.markers,
                    config.noise_std,
                    config.dropout_prob,
                    session.rng,
                )
            )
            action = world.ActionCommand(
                np.array(body.velocity, dtype=float), body.gripper_toggle
            )
            session.actions.append(action)
            session.agent = world.step(session.scene, session.agent, action)
            return {
                "step": session.step,
                "agent": session.agent.to_dict(),
                "success": bool(world.success(session.scene, session.agent)),
                "failed": bool(world.failed(session.scene, session.agent)),
            }

    @app.post(API_PREFIX + "/sessions/{session_id}/marker")
    def post_marker(session_id: str, body: MarkerBody) -> dict:
        session = get_session(session_id)
        with session.lock:
            require_active(session)
            if session.step > 0 and not config.allow_marker_after_motion:
                raise HTTPException(
                    409, "markers must be placed before the demonstration starts"
                )
            if len(session.markers) >= _marker_slots(session.task):
                raise HTTPException(
                    409, f"this task uses {_marker_slots(session.task)} marker(s)"
                )
            if body.object_id is not None:
                try:
                    host = session.scene.object_by_id(body.object_id)
                except KeyError:
                    raise HTTPException(404, f"no object with id {body.object_id}")
            else:
                position = np.array(body.position, dtype=float)
                candidates = [
                    (float(np.linalg.norm(o.position - position)), o)
                    for o in session.scene.objects
                ]
                distance, host = min(candidates, key=lambda c: c[0])
                if distance > max(host.radius, 0.04):
                    raise HTTPException(400, "no object at that position")
            if any(m.object_id == host.id for m in session.markers):
                raise HTTPException(409, f"object {host.id} already carries a marker")
            marker = world.Marker(len(session.markers), host.id)
            session.markers.append(marker)
            return {
                "marker_id": marker.marker_id,
                "object_id": host.id,
                "markers_placed": len(session.markers),
                "marker_slots": _marker_slots(session.task),
            }

    @app.post(API_PREFIX + "/sessions/{session_id}/prompt")
    def post_prompt(session_id: str, body: PromptBody) -> dict:
        session = get_session(session_id)
        with session.lock:
            require_active(session)
            try:
                matched = pipeline.resolve_prompt(body.text, session.scene)
            except pipeline.UnresolvedPrompt:
                raise HTTPException(
                    400, "the prompt names no object in this scene; rephrase it"
                )
            session.prompts.append({"step": session.step, "text": body.text})
            return {
                "step": session.step,
                "prompt_count": len(session.prompts),
                "matched_object_ids": matched,
            }

    @app.post(API_PREFIX + "/sessions/{session_id}/finish")
    def post_finish(session_id: str, body: FinishBody) -> dict:
        session = get_session(session_id)
        with session.lock:
            if session.status != "active":
                raise HTTPException(409, f"session is already {session.status}")
            success = bool(world.success(session.scene, session.agent))
            saved = False
            episode_index = None
            if body.save and success and session.frames:
                _normalize_marker_width(session.frames, 2 * len(session.markers))
                episode = pipeline.assemble_episode(
                    task=session.task,
                    initial_scene=session.initial_scene,
                    frames=session.frames,
                    actions=session.actions,
                    prompts=[p["text"] for p in session.prompts],
                    markers=session.markers,
                    mode=session.scene.mode,
                    region=session.scene.region,
                    seed=session.seed,
                )
                with append_lock:
                    episode_index = pipeline.append_episode(episodes_dir, episode)
                saved = True
            session.status = "saved" if saved else "discarded"
            return {
                "session_id": session.session_id,
                "success": success,
                "saved": saved,
                "steps": session.step,
                "episode_index": episode_index,
                "dataset_dir": str(episodes_dir) if saved else None,
            }

    @app.get(API_PREFIX + "/sessions/{session_id}/scene")
    def get_scene(session_id: str) -> dict:
        """Privileged dump for scripted drivers and debugging, never for policies."""
        session = get_session(session_id)
        with session.lock:
            return {
                "scene": session.scene.to_dict(),
                "agent": session.agent.to_dict(),
                "step": session.step,
                "status": session.status,
            }

    @app.get(API_PREFIX + "/sessions/{session_id}/expert")
    def get_expert(session_id: str) -> dict:
        """Scripted teacher's action for the current state (driver assist)."""
        session = get_session(session_id)
        with session.lock:
            action = world.expert_action(session.scene, session.agent)
            return {
                "velocity": [float(action.velocity[0]), float(action.velocity[1])],
                "gripper_toggle": bool(action.gripper_toggle),
                "step": session.step,
            }

    ui_dir = Path(config.ui_dir) if config.ui_dir else _default_ui_dir()
    if ui_dir is not None and ui_dir.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def _default_ui_dir() -> Optional[Path]:
    candidate = Path(__file__).resolve().parents[3] / "frontend" / "dist"
    return candidate if candidate.is_dir() else None
