/** Thin typed client for the annotation service HTTP API. */

import type { PreferenceRecordJson, Progress, RatingTask } from "./types.js";

/**
 * Validate one task object from the wire.  Returns the task, or a reason
 * string when it is malformed (the caller skips it and surfaces the reason).
 */
export function parseTask(raw: unknown): RatingTask | string {
  if (typeof raw !== "object" || raw === null) return "task is not an object";
  const obj = raw as Record<string, unknown>;
  for (const field of ["task_id", "image_id", "patch"]) {
    if (typeof obj[field] !== "string" || (obj[field] as string).length === 0) {
      return `task field ${field} must be a non-empty string`;
    }
  }
  if (!Number.isInteger(obj.patch_index) || (obj.patch_index as number) < 0) {
    return `task ${obj.task_id}: patch_index must be a nonnegative integer`;
  }
  const n = obj.num_candidates;
  if (!Number.isInteger(n) || (n as number) < 2) {
    return `task ${obj.task_id}: num_candidates must be an integer >= 2`;
  }
  const overlays = obj.overlays;
  if (
    !Array.isArray(overlays) ||
    overlays.length !== n ||
    overlays.some((u) => typeof u !== "string" || u.length === 0)
  ) {
    return `task ${obj.task_id}: overlays must be ${n} non-empty URLs`;
  }
  if (obj.status !== "pending" && obj.status !== "done") {
    return `task ${obj.task_id}: status must be pending or done`;
  }
  return {
    task_id: obj.task_id as string,
    image_id: obj.image_id as string,
    patch_index: obj.patch_index as number,
    num_candidates: n as number,
    patch: obj.patch as string,
    overlays: overlays as string[],
    status: obj.status,
  };
}

export interface FetchedTasks {
  tasks: RatingTask[];
  /** Reasons for tasks that came back malformed and were skipped. */
  skipped: string[];
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async fetchTasks(limit: number): Promise<FetchedTasks> {
    const res = await this.fetchFn(`${this.baseUrl}/api/tasks?limit=${limit}`);
    if (!res.ok) throw new Error(`task fetch failed: HTTP ${res.status}`);
    const body = await res.json();
    if (!Array.isArray(body)) throw new Error("task list is not an array");
    const tasks: RatingTask[] = [];
    const skipped: string[] = [];
    for (const raw of body) {
      const parsed = parseTask(raw);
      if (typeof parsed === "string") skipped.push(parsed);
      else tasks.push(parsed);
    }
    return { tasks, skipped };
  }

  async fetchProgress(): Promise<Progress> {
    const res = await this.fetchFn(`${this.baseUrl}/api/progress`);
    if (!res.ok) throw new Error(`progress fetch failed: HTTP ${res.status}`);
    const body = await res.json();
    if (
      typeof body !== "object" ||
      body === null ||
      !Number.isInteger(body.total) ||
      !Number.isInteger(body.done) ||
      !Number.isInteger(body.pending)
    ) {
      throw new Error("malformed progress payload");
    }
    return { total: body.total, done: body.done, pending: body.pending };
  }

  /** POST one record; returns the raw status plus the parsed JSON body. */
  async submit(record: PreferenceRecordJson): Promise<{ status: number; body: unknown }> {
    const res = await this.fetchFn(`${this.baseUrl}/api/preferences`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(record),
    });
    let body: unknown = null;
    try {
      body = await res.json();
    } catch {
      body = null;
    }
    return { status: res.status, body };
  }
}
