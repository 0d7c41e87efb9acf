/**
 * Typed client for the teleoperation service (docs/service_api.md).
 *
 * Every response is validated with zod before it reaches UI state, so a
 * contract drift fails loudly at the boundary instead of as NaN in the
 * render loop.  HTTP errors are returned as values, not thrown: protocol
 * rejections (409 and friends) are normal outcomes the UI must display.
 */

import { z } from "zod";

export type Vec2 = [number, number];

const vec2 = z.tuple([z.number(), z.number()]);

const agentSchema = z.object({
  position: vec2,
  gripper_closed: z.boolean(),
  held_object_id: z.number().int().nullable(),
});

export const createdSchema = z.object({
  session_id: z.string(),
  task: z.string(),
  step: z.number().int(),
  marker_slots: z.number().int(),
  budget_seconds: z.number().nullable(),
});

export const frameSchema = z.object({
  session_id: z.string(),
  task: z.string(),
  status: z.enum(["active", "saved", "discarded"]),
  step: z.number().int(),
  agent: agentSchema,
  static_png: z.string(),
  ego_png: z.string(),
  markers: z.array(z.object({ marker_id: z.number(), object_id: z.number() })),
  marker_slots: z.number().int(),
  prompts: z.array(z.object({ step: z.number(), text: z.string() })),
  objects: z.array(
    z.object({
      id: z.number().int(),
      class_label: z.string(),
      position: vec2,
      radius: z.number(),
      color: z.array(z.number()),
      graspable: z.boolean(),
    }),
  ),
  success: z.boolean(),
  elapsed_seconds: z.number(),
  budget_seconds: z.number().nullable(),
  can_place_marker: z.boolean(),
});

export const actionResultSchema = z.object({
  step: z.number().int(),
  agent: agentSchema,
  success: z.boolean(),
  failed: z.boolean(),
});

export const markerResultSchema = z.object({
  marker_id: z.number().int(),
  object_id: z.number().int(),
  markers_placed: z.number().int(),
  marker_slots: z.number().int(),
});

export const promptResultSchema = z.object({
  step: z.number().int(),
  prompt_count: z.number().int(),
  matched_object_ids: z.array(z.number().int()),
});

export const finishResultSchema = z.object({
  session_id: z.string(),
  success: z.boolean(),
  saved: z.boolean(),
  steps: z.number().int(),
  episode_index: z.number().int().nullable(),
  dataset_dir: z.string().nullable(),
});

export type Created = z.infer<typeof createdSchema>;
export type Frame = z.infer<typeof frameSchema>;
export type ActionResult = z.infer<typeof actionResultSchema>;
export type MarkerResult = z.infer<typeof markerResultSchema>;
export type PromptResult = z.infer<typeof promptResultSchema>;
export type FinishResult = z.infer<typeof finishResultSchema>;

/** A non-2xx response, carried as a value. */
export interface ApiError {
  kind: "error";
  status: number;
  detail: string;
}

export type ApiResult<T> = { kind: "ok"; value: T } | ApiError;

export function isError<T>(result: ApiResult<T>): result is ApiError {
  return result.kind === "error";
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

function errorDetail(payload: unknown): string {
  if (payload && typeof payload === "object" && "detail" in payload) {
    const detail = (payload as { detail: unknown }).detail;
    if (typeof detail === "string") return detail;
    return JSON.stringify(detail);
  }
  return JSON.stringify(payload);
}

export class Api {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async call<T>(
    schema: z.ZodType<T>,
    method: string,
    path: string,
    body?: unknown,
  ): Promise<ApiResult<T>> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}/api/v1${path}`, {
        method,
        headers: body === undefined ? undefined : { "Content-Type": "application/json" },
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      return { kind: "error", status: 0, detail: `network failure: ${String(err)}` };
    }
    let payload: unknown;
    try {
      payload = await response.json();
    } catch {
      return { kind: "error", status: response.status, detail: "response was not JSON" };
    }
    if (!response.ok) {
      return { kind: "error", status: response.status, detail: errorDetail(payload) };
    }
    const parsed = schema.safeParse(payload);
    if (!parsed.success) {
      return {
        kind: "error",
        status: response.status,
        detail: `malformed response: ${parsed.error.message}`,
      };
    }
    return { kind: "ok", value: parsed.data };
  }

  createSession(body: {
    task?: string;
    seed?: number;
    mode?: string;
    region?: string;
    budget_seconds?: number;
  }): Promise<ApiResult<Created>> {
    return this.call(createdSchema, "POST", "/sessions", body);
  }

  getFrame(sid: string): Promise<ApiResult<Frame>> {
    return this.call(frameSchema, "GET", `/sessions/${sid}/frame`);
  }

  postAction(
    sid: string,
    velocity: Vec2,
    gripperToggle: boolean,
  ): Promise<ApiResult<ActionResult>> {
    return this.call(actionResultSchema, "POST", `/sessions/${sid}/action`, {
      velocity,
      gripper_toggle: gripperToggle,
    });
  }

  postMarker(
    sid: string,
    body: { object_id: number } | { position: Vec2 },
  ): Promise<ApiResult<MarkerResult>> {
    return this.call(markerResultSchema, "POST", `/sessions/${sid}/marker`, body);
  }

  postPrompt(sid: string, text: string): Promise<ApiResult<PromptResult>> {
    return this.call(promptResultSchema, "POST", `/sessions/${sid}/prompt`, { text });
  }

  postFinish(sid: string, save: boolean): Promise<ApiResult<FinishResult>> {
    return this.call(finishResultSchema, "POST", `/sessions/${sid}/finish`, { save });
  }
}
