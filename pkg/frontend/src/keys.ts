/**
 * Keyboard mapping.  Each keypress is one discrete action of fixed
 * magnitude, so a human demonstration is a countable, replayable sequence
 * of identical-size steps rather than an analog trace.
 */

import { Vec2 } from "./api.js";

export const KEY_SPEED = 0.5; // table units per second, per keypress

export interface KeyAction {
  velocity: Vec2;
  gripperToggle: boolean;
}

const DIRECTIONS: Record<string, Vec2> = {
  ArrowUp: [0, 1],
  ArrowDown: [0, -1],
  ArrowLeft: [-1, 0],
  ArrowRight: [1, 0],
  w: [0, 1],
  s: [0, -1],
  a: [-1, 0],
  d: [1, 0],
};

/** Map a KeyboardEvent.key to an action, or null for unbound keys. */
export function keyToAction(key: string): KeyAction | null {
  if (key === " " || key === "g") {
    return { velocity: [0, 0], gripperToggle: true };
  }
  const direction = DIRECTIONS[key];
  if (!direction) return null;
  return {
    velocity: [direction[0] * KEY_SPEED, direction[1] * KEY_SPEED],
    gripperToggle: false,
  };
}
