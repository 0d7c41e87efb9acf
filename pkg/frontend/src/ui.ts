/**
 * DOM wiring.  Deliberately thin: every rule lives in TeleopClient, and
 * this file only translates browser events into client calls and client
 * state into elements.  The static view is the driving surface; the ego
 * view is a context thumbnail.
 */

import { Vec2 } from "./api.js";
import { keyToAction } from "./keys.js";
import { SessionView, TeleopClient, isRejection } from "./session.js";

const POLL_MS = 900;

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing element #${id}`);
  return found as T;
}

export interface UiOptions {
  task: string;
  mode?: string;
  region?: string;
  budgetSeconds?: number;
}

export function mountUi(client: TeleopClient, options: UiOptions): void {
  const staticImg = el<HTMLImageElement>("static-view");
  const egoImg = el<HTMLImageElement>("ego-view");
  const statusLine = el<HTMLElement>("status-line");
  const stepReadout = el<HTMLElement>("step-readout");
  const agentReadout = el<HTMLElement>("agent-readout");
  const markerReadout = el<HTMLElement>("marker-readout");
  const demoCounter = el<HTMLElement>("demo-counter");
  const countdown = el<HTMLElement>("countdown");
  const promptLog = el<HTMLElement>("prompt-log");
  const promptInput = el<HTMLInputElement>("prompt-input");
  const promptSend = el<HTMLButtonElement>("prompt-send");
  const saveButton = el<HTMLButtonElement>("finish-save");
  const discardButton = el<HTMLButtonElement>("finish-discard");
  const newButton = el<HTMLButtonElement>("new-session");
  const errorLine = el<HTMLElement>("error-line");

  let seed = Math.floor(Math.random() * 1_000_000);

  function describe(view: SessionView): string {
    if (view.status === "idle") return "connecting";
    if (view.status === "active") {
      if (view.success) return "success! press Save";
      if (view.markers.length < view.markerSlots) {
        const left = view.markerSlots - view.markers.length;
        return `place ${left} marker(s) by clicking the object(s)`;
      }
      return "drive with arrow keys, space toggles the gripper";
    }
    return `episode ${view.status}`;
  }

  function render(view: SessionView): void {
    if (view.staticPng) staticImg.src = `data:image/png;base64,${view.staticPng}`;
    if (view.egoPng) egoImg.src = `data:image/png;base64,${view.egoPng}`;
    statusLine.textContent = describe(view);
    statusLine.className = view.success ? "good" : "";
    stepReadout.textContent = `step ${view.step}`;
    agentReadout.textContent = view.agentPosition
      ? `agent (${view.agentPosition[0].toFixed(2)}, ${view.agentPosition[1].toFixed(2)}) ` +
        (view.gripperClosed ? "closed" : "open")
      : "";
    markerReadout.textContent = `markers ${view.markers.length}/${view.markerSlots}`;
    demoCounter.textContent = `demos saved: ${view.savedCount}`;
    if (view.budgetSeconds !== null) {
      const left = Math.max(0, view.budgetSeconds - view.elapsedSeconds);
      countdown.textContent = `time left ${left.toFixed(0)}s`;
      countdown.hidden = false;
    } else {
      countdown.hidden = true;
    }
    promptLog.textContent = view.prompts
      .map((p) => `[${p.step}] ${p.text}`)
      .join("\n");
    errorLine.textContent = view.lastError ?? "";

    const busy = view.inFlight;
    const active = view.status === "active";
    staticImg.classList.toggle("placeable", view.canPlaceMarker && !busy);
    promptInput.disabled = busy || !active;
    promptSend.disabled = busy || !active;
    saveButton.disabled = busy || !active;
    discardButton.disabled = busy || !active;
    newButton.disabled = busy || active;
  }

  client.onChange(render);

  async function startSession(): Promise<void> {
    seed += 1;
    await client.start({
      task: options.task,
      seed,
      mode: options.mode,
      region: options.region,
      budget_seconds: options.budgetSeconds,
    });
  }

  document.addEventListener("keydown", (event) => {
    if (document.activeElement === promptInput) return;
    const action = keyToAction(event.key);
    if (!action) return;
    event.preventDefault();
    void client.steer(action.velocity, action.gripperToggle);
  });

  staticImg.addEventListener("click", (event) => {
    if (!client.view.canPlaceMarker) return; // placement window closed
    const rect = staticImg.getBoundingClientRect();
    const col = (event.clientX - rect.left) / rect.width;
    const row = (event.clientY - rect.top) / rect.height;
    const position: Vec2 = [col, 1 - row]; // image rows grow downward
    void client.placeMarkerAt(position);
  });

  async function submitPrompt(): Promise<void> {
    const text = promptInput.value;
    const outcome = await client.sendPrompt(text);
    if (!isRejection(outcome) && outcome.kind === "ok") promptInput.value = "";
  }

  promptSend.addEventListener("click", () => void submitPrompt());
  promptInput.addEventListener("keydown", (event) => {
    if (event.key === "Enter") void submitPrompt();
  });

  saveButton.addEventListener("click", () => void client.finish(true));
  discardButton.addEventListener("click", () => void client.finish(false));
  newButton.addEventListener("click", () => void startSession());

  setInterval(() => {
    if (client.view.status === "active" && !client.view.inFlight) {
      void client.poll();
    }
  }, POLL_MS);

  void startSession();
}
