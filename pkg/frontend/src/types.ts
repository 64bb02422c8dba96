/** Shapes shared across the client; field names mirror the service JSON. */

export interface RatingTask {
  task_id: string;
  image_id: string;
  patch_index: number;
  num_candidates: number;
  /** URL of the grayscale patch PNG. */
  patch: string;
  /** One contour-overlay PNG URL per candidate, index-aligned. */
  overlays: string[];
  status: "pending" | "done";
}

export interface Progress {
  total: number;
  done: number;
  pending: number;
}

/** Wire format of one preference; must round-trip the service schema. */
export interface PreferenceRecordJson {
  image_id: string;
  patch_index: number;
  preferred: number;
  dispreferred: number[];
  rater: string;
  timestamp: string;
}

/** One task on screen: the selection and per-candidate overlay visibility. */
export interface UiTaskView {
  task: RatingTask;
  /** Candidate index the rater picked; null = no selection yet (skip writes nothing). */
  selected: number | null;
  visible: boolean[];
}

export function newTaskView(task: RatingTask): UiTaskView {
  return { task, selected: null, visible: task.overlays.map(() => true) };
}

/** Submitting is allowed only once a candidate is actually selected. */
export function canSubmit(view: UiTaskView): boolean {
  return view.selected !== null && Number.isInteger(view.selected) && view.selected >= 0;
}
