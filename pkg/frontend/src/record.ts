/** Building and validating preference records on the client side. */

import type { PreferenceRecordJson, RatingTask } from "./types.js";

export const KNOWN_RATERS = ["oracle", "human", "upo"] as const;

/**
 * Complement rule: the rater names one preferred candidate; every other
 * candidate index of the task becomes dispreferred, in ascending order.
 */
export function buildRecord(
  task: RatingTask,
  selected: number,
  timestamp: string = new Date().toISOString(),
): PreferenceRecordJson {
  if (!Number.isInteger(selected) || selected < 0 || selected >= task.num_candidates) {
    throw new Error(`selection ${selected} out of range (task has ${task.num_candidates})`);
  }
  const dispreferred: number[] = [];
  for (let j = 0; j < task.num_candidates; j++) {
    if (j !== selected) dispreferred.push(j);
  }
  return {
    image_id: task.image_id,
    patch_index: task.patch_index,
    preferred: selected,
    dispreferred,
    rater: "human",
    timestamp,
  };
}

const FIELDS = ["image_id", "patch_index", "preferred", "dispreferred", "rater", "timestamp"];

/**
 * Client-side mirror of the service's record schema.  Returns null when the
 * record is valid, otherwise the reason it would be rejected.  The UI never
 * posts a record this function rejects.
 */
export function validateRecord(rec: unknown): string | null {
  if (typeof rec !== "object" || rec === null || Array.isArray(rec)) {
    return "record must be an object";
  }
  const obj = rec as Record<string, unknown>;
  for (const field of FIELDS) {
    if (!(field in obj)) return `missing field: ${field}`;
  }
  for (const key of Object.keys(obj)) {
    if (!FIELDS.includes(key)) return `unknown field: ${key}`;
  }
  if (typeof obj.image_id !== "string" || obj.image_id.length === 0) {
    return "image_id must be a non-empty string";
  }
  if (!Number.isInteger(obj.patch_index) || (obj.patch_index as number) < -1) {
    return "patch_index must be an integer >= -1";
  }
  if (!Number.isInteger(obj.preferred) || (obj.preferred as number) < 0) {
    return "preferred must be a nonnegative integer";
  }
  const disp = obj.dispreferred;
  if (!Array.isArray(disp) || disp.length === 0) {
    return "dispreferred must be a non-empty array";
  }
  if (disp.some((j) => !Number.isInteger(j) || (j as number) < 0)) {
    return "dispreferred entries must be nonnegative integers";
  }
  if (disp.includes(obj.preferred)) return "preferred appears in dispreferred";
  if (new Set(disp).size !== disp.length) return "duplicate dispreferred index";
  if (typeof obj.rater !== "string" || !KNOWN_RATERS.includes(obj.rater as never)) {
    return `unknown rater: ${String(obj.rater)}`;
  }
  if (typeof obj.timestamp !== "string" || obj.timestamp.length === 0) {
    return "timestamp must be a non-empty string";
  }
  return null;
}

/** What the UI should do with a submission response. */
export type SubmitOutcome =
  | { kind: "advanced" }
  | { kind: "kept"; reason: string }
  | { kind: "dropped"; notice: string };

/**
 * 200 advances to the next task; 409 means someone already rated this task,
 * so it is dropped locally with a notice; any other failure keeps the task
 * on screen with the server's reason.
 */
export function classifySubmitResponse(status: number, body: unknown): SubmitOutcome {
  const error =
    typeof body === "object" && body !== null && "error" in body
      ? String((body as { error: unknown }).error)
      : `status ${status}`;
  if (status === 200) return { kind: "advanced" };
  if (status === 409) return { kind: "dropped", notice: `already rated elsewhere: ${error}` };
  return { kind: "kept", reason: error };
}
