/**
 * Session state machine.
 *
 * All teleoperation rules that do not need a DOM live here so they can be
 * tested headlessly:
 *
 *  - one request in flight per session, everything else is dropped;
 *  - the rendered frame always reflects the last acknowledged response
 *    (every accepted action is followed by a frame fetch under the same
 *    lock);
 *  - marker placement is refused client-side once motion has started or
 *    the slots are full, before any request is sent.
 */

import {
  Api,
  ApiResult,
  FinishResult,
  Frame,
  MarkerResult,
  PromptResult,
  Vec2,
  isError,
} from "./api.js";

/** Client-side refusal; nothing was sent to the service. */
export interface Rejection {
  kind: "rejected";
  reason: string;
}

export type Outcome<T> = ApiResult<T> | Rejection;

export function isRejection<T>(outcome: Outcome<T>): outcome is Rejection {
  return outcome.kind === "rejected";
}

export interface SessionView {
  sessionId: string | null;
  task: string;
  status: "idle" | "active" | "saved" | "discarded";
  step: number;
  agentPosition: Vec2 | null;
  gripperClosed: boolean;
  staticPng: string | null;
  egoPng: string | null;
  markers: { markerId: number; objectId: number }[];
  markerSlots: number;
  prompts: { step: number; text: string }[];
  canPlaceMarker: boolean;
  success: boolean;
  elapsedSeconds: number;
  budgetSeconds: number | null;
  savedCount: number;
  inFlight: boolean;
  lastError: string | null;
}

function emptyView(): SessionView {
  return {
    sessionId: null,
    task: "",
    status: "idle",
    step: 0,
    agentPosition: null,
    gripperClosed: false,
    staticPng: null,
    egoPng: null,
    markers: [],
    markerSlots: 0,
    prompts: [],
    canPlaceMarker: false,
    success: false,
    elapsedSeconds: 0,
    budgetSeconds: null,
    savedCount: 0,
    inFlight: false,
    lastError: null,
  };
}

export class TeleopClient {
  readonly view: SessionView = emptyView();
  private listeners: Array<(view: SessionView) => void> = [];

  constructor(private readonly api: Api) {}

  onChange(listener: (view: SessionView) => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) listener(this.view);
  }

  /** Serialized request slot.  Returns a rejection when one is in flight. */
  private async withLock<T>(run: () => Promise<Outcome<T>>): Promise<Outcome<T>> {
    if (this.view.inFlight) {
      return { kind: "rejected", reason: "a request is already in flight" };
    }
    this.view.inFlight = true;
    this.notify();
    try {
      const outcome = await run();
      if (outcome.kind === "error") this.view.lastError = outcome.detail;
      else this.view.lastError = null;
      return outcome;
    } finally {
      this.view.inFlight = false;
      this.notify();
    }
  }

  private applyFrame(frame: Frame): void {
    this.view.sessionId = frame.session_id;
    this.view.task = frame.task;
    this.view.status = frame.status;
    this.view.step = frame.step;
    this.view.agentPosition = frame.agent.position;
    this.view.gripperClosed = frame.agent.gripper_closed;
    this.view.staticPng = frame.static_png;
    this.view.egoPng = frame.ego_png;
    this.view.markers = frame.markers.map((m) => ({
      markerId: m.marker_id,
      objectId: m.object_id,
    }));
    this.view.markerSlots = frame.marker_slots;
    this.view.prompts = frame.prompts;
    this.view.canPlaceMarker = frame.can_place_marker;
    this.view.success = frame.success;
    this.view.elapsedSeconds = frame.elapsed_seconds;
    this.view.budgetSeconds = frame.budget_seconds;
  }

  async start(options: {
    task?: string;
    seed?: number;
    mode?: string;
    region?: string;
    budget_seconds?: number;
  }): Promise<Outcome<Frame>> {
    return this.withLock(async () => {
      const created = await this.api.createSession(options);
      if (isError(created)) return created;
      const frame = await this.api.getFrame(created.value.session_id);
      if (!isError(frame)) this.applyFrame(frame.value);
      return frame;
    });
  }

  /** Refresh the view without advancing time; used by the poll timer. */
  async poll(): Promise<Outcome<Frame>> {
    const sid = this.view.sessionId;
    if (sid === null) return { kind: "rejected", reason: "no session" };
    if (this.view.inFlight) return { kind: "rejected", reason: "a request is already in flight" };
    return this.withLock(async () => {
      const frame = await this.api.getFrame(sid);
      if (!isError(frame)) this.applyFrame(frame.value);
      return frame;
    });
  }

  /**
   * One simulator step, then the frame that resulted from it.  The view
   * only changes on the acknowledged response.
   */
  async steer(velocity: Vec2, gripperToggle = false): Promise<Outcome<Frame>> {
    const sid = this.view.sessionId;
    if (sid === null) return { kind: "rejected", reason: "no session" };
    if (this.view.status !== "active") {
      return { kind: "rejected", reason: `session is ${this.view.status}` };
    }
    return this.withLock(async () => {
      const stepped = await this.api.postAction(sid, velocity, gripperToggle);
      if (isError(stepped)) return stepped;
      const frame = await this.api.getFrame(sid);
      if (!isError(frame)) this.applyFrame(frame.value);
      return frame;
    });
  }

  private markerGate(): Rejection | null {
    if (this.view.sessionId === null) return { kind: "rejected", reason: "no session" };
    if (this.view.status !== "active") {
      return { kind: "rejected", reason: `session is ${this.view.status}` };
    }
    if (this.view.step > 0) {
      return { kind: "rejected", reason: "markers must be placed before driving" };
    }
    if (this.view.markers.length >= this.view.markerSlots) {
      return { kind: "rejected", reason: "all marker slots are used" };
    }
    return null;
  }

  async placeMarkerAt(position: Vec2): Promise<Outcome<MarkerResult>> {
    const gate = this.markerGate();
    if (gate) return gate;
    return this.sendMarker({ position });
  }

  async placeMarkerOn(objectId: number): Promise<Outcome<MarkerResult>> {
    const gate = this.markerGate();
    if (gate) return gate;
    return this.sendMarker({ object_id: objectId });
  }

  private async sendMarker(
    body: { object_id: number } | { position: Vec2 },
  ): Promise<Outcome<MarkerResult>> {
    const sid = this.view.sessionId!;
    return this.withLock(async () => {
      const placed = await this.api.postMarker(sid, body);
      if (isError(placed)) return placed;
      const frame = await this.api.getFrame(sid);
      if (!isError(frame)) this.applyFrame(frame.value);
      return placed;
    });
  }

  async sendPrompt(text: string): Promise<Outcome<PromptResult>> {
    const sid = this.view.sessionId;
    if (sid === null) return { kind: "rejected", reason: "no session" };
    const trimmed = text.trim();
    if (!trimmed) return { kind: "rejected", reason: "empty prompt" };
    return this.withLock(async () => {
      const result = await this.api.postPrompt(sid, trimmed);
      if (isError(result)) return result;
      const frame = await this.api.getFrame(sid);
      if (!isError(frame)) this.applyFrame(frame.value);
      return result;
    });
  }

  async finish(save: boolean): Promise<Outcome<FinishResult>> {
    const sid = this.view.sessionId;
    if (sid === null) return { kind: "rejected", reason: "no session" };
    return this.withLock(async () => {
      const result = await this.api.postFinish(sid, save);
      if (isError(result)) return result;
      this.view.status = result.value.saved ? "saved" : "discarded";
      if (result.value.saved) this.view.savedCount += 1;
      return result;
    });
  }
}
