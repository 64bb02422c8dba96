/** Client-side task queue: refill, retry with backoff, advance, drop. */

import type { FetchedTasks } from "./api.js";
import type { Progress, RatingTask } from "./types.js";

export type QueueState = "loading" | "rating" | "retrying" | "all-done";

export interface QueueDeps {
  fetchTasks(limit: number): Promise<FetchedTasks>;
  fetchProgress(): Promise<Progress>;
  /** Injectable timer so tests can drive retries synchronously. */
  schedule(fn: () => void, delayMs: number): void;
}

export interface QueueEvents {
  /** Fired on every state/progress/status change so the view can re-render. */
  onChange(): void;
}

export const INITIAL_RETRY_MS = 1000;
export const MAX_RETRY_MS = 30_000;

export class TaskQueue {
  state: QueueState = "loading";
  /** Human-readable line for the status area (retries, skips, notices). */
  statusMessage = "";
  progress: Progress | null = null;

  private queue: RatingTask[] = [];
  private retryMs = INITIAL_RETRY_MS;
  private seen = new Set<string>();

  constructor(
    private readonly deps: QueueDeps,
    private readonly events: QueueEvents,
    private readonly limit: number = 10,
  ) {}

  current(): RatingTask | null {
    return this.queue.length > 0 ? this.queue[0] : null;
  }

  /** Pull pending tasks; on network failure schedule a retry with backoff. */
  async refill(): Promise<void> {
    if (this.queue.length === 0) this.state = "loading";
    this.events.onChange();
    try {
      const [fetched, progress] = await Promise.all([
        this.deps.fetchTasks(this.limit),
        this.deps.fetchProgress(),
      ]);
      this.retryMs = INITIAL_RETRY_MS;
      this.progress = progress;
      for (const task of fetched.tasks) {
        if (!this.seen.has(task.task_id)) {
          this.seen.add(task.task_id);
          this.queue.push(task);
        }
      }
      this.statusMessage =
        fetched.skipped.length > 0
          ? `skipped ${fetched.skipped.length} malformed task(s): ${fetched.skipped.join("; ")}`
          : "";
      this.state = this.queue.length > 0 ? "rating" : "all-done";
    } catch (err) {
      this.state = "retrying";
      this.statusMessage = `cannot reach the service (${String(err)}); retrying in ${
        this.retryMs / 1000
      }s`;
      const delay = this.retryMs;
      this.retryMs = Math.min(this.retryMs * 2, MAX_RETRY_MS);
      this.deps.schedule(() => void this.refill(), delay);
    }
    this.events.onChange();
  }

  /** The current task was handled (submitted or skipped); move on. */
  advance(): void {
    const done = this.queue.shift();
    if (done && this.progress) {
      this.progress = {
        total: this.progress.total,
        done: this.progress.done + 1,
        pending: this.progress.pending - 1,
      };
    }
    this.afterRemoval();
  }

  /** Drop the current task without counting it as our work (409 path). */
  dropCurrent(notice: string): void {
    this.queue.shift();
    this.statusMessage = notice;
    this.afterRemoval();
  }

  /** Skip: no record is written, the task just goes to the back of the queue. */
  deferCurrent(): void {
    const task = this.queue.shift();
    if (task) this.queue.push(task);
    this.events.onChange();
  }

  private afterRemoval(): void {
    if (this.queue.length === 0) {
      void this.refill();
    } else {
      this.events.onChange();
    }
  }
}
