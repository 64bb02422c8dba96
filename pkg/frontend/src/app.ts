/** DOM wiring: one patch per screen, hued contour overlays, keyboard rating. */

import { ApiClient } from "./api.js";
import { keyAction } from "./keys.js";
import { buildRecord, classifySubmitResponse, validateRecord } from "./record.js";
import { TaskQueue } from "./queue.js";
import { canSubmit, newTaskView, UiTaskView } from "./types.js";

/** Legend hues; same order the service uses for its contour overlays. */
const PALETTE = [
  "rgb(230, 60, 60)",
  "rgb(60, 160, 230)",
  "rgb(60, 200, 90)",
  "rgb(240, 180, 40)",
  "rgb(200, 90, 220)",
  "rgb(90, 220, 210)",
  "rgb(240, 120, 60)",
  "rgb(150, 150, 255)",
];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export class App {
  private readonly api = new ApiClient("");
  private readonly queue: TaskQueue;
  private view: UiTaskView | null = null;
  private notice = "";

  constructor() {
    this.queue = new TaskQueue(
      {
        fetchTasks: (limit) => this.api.fetchTasks(limit),
        fetchProgress: () => this.api.fetchProgress(),
        schedule: (fn, ms) => void window.setTimeout(fn, ms),
      },
      { onChange: () => this.render() },
    );
  }

  start(): void {
    el<HTMLButtonElement>("submit").addEventListener("click", () => void this.submit());
    el<HTMLButtonElement>("skip").addEventListener("click", () => this.skip());
    document.addEventListener("keydown", (ev) => this.onKey(ev));
    void this.queue.refill();
  }

  // -- rater actions --------------------------------------------------------

  private select(index: number): void {
    if (!this.view || index < 0 || index >= this.view.task.num_candidates) return;
    this.view.selected = index;
    this.view.visible[index] = true; // selecting an overlay always reveals it
    this.render();
  }

  private toggleOverlay(index: number): void {
    if (!this.view) return;
    this.view.visible[index] = !this.view.visible[index];
    this.render();
  }

  private toggleAllOverlays(): void {
    if (!this.view) return;
    const anyOn = this.view.visible.some(Boolean);
    this.view.visible = this.view.visible.map(() => !anyOn);
    this.render();
  }

  private skip(): void {
    if (!this.view) return;
    this.view = null; // no record is written for a skip
    this.notice = "skipped";
    this.queue.deferCurrent();
  }

  private async submit(): Promise<void> {
    if (!this.view || !canSubmit(this.view)) return;
    const record = buildRecord(this.view.task, this.view.selected as number);
    const invalid = validateRecord(record);
    if (invalid !== null) {
      this.notice = `refusing to submit invalid record: ${invalid}`;
      this.render();
      return;
    }
    let outcome;
    try {
      const { status, body } = await this.api.submit(record);
      outcome = classifySubmitResponse(status, body);
    } catch (err) {
      outcome = { kind: "kept" as const, reason: `network failure: ${String(err)}` };
    }
    if (outcome.kind === "advanced") {
      this.notice = "";
      this.view = null;
      this.queue.advance();
    } else if (outcome.kind === "dropped") {
      this.notice = outcome.notice;
      this.view = null;
      this.queue.dropCurrent(outcome.notice);
    } else {
      this.notice = `submit failed, task kept: ${outcome.reason}`;
      this.render();
    }
  }

  private onKey(ev: KeyboardEvent): void {
    const action = keyAction(ev.key);
    if (!action) return;
    if (action.kind === "select") this.select(action.index);
    else if (action.kind === "toggle-all-overlays") this.toggleAllOverlays();
    else if (action.kind === "skip") this.skip();
    else void this.submit();
  }

  // -- rendering ------------------------------------------------------------

  private render(): void {
    const current = this.queue.current();
    if (current && (!this.view || this.view.task.task_id !== current.task_id)) {
      this.view = newTaskView(current);
    }
    if (!current) this.view = null;

    const progress = this.queue.progress;
    el("progress").textContent = progress
      ? `${progress.done} / ${progress.total} rated, ${progress.pending} pending`
      : "";

    const statusParts = [this.queue.statusMessage, this.notice].filter((s) => s.length > 0);
    el("status").textContent = statusParts.join(" — ");

    const allDone = this.queue.state === "all-done";
    el("alldone").hidden = !allDone;
    el("rater").hidden = allDone || this.view === null;
    el("waiting").hidden = allDone || this.view !== null;
    if (!this.view) return;

    const view = this.view;
    el("taskname").textContent = `${view.task.image_id} · patch ${view.task.patch_index}`;

    const stage = el("stage");
    stage.replaceChildren();
    const base = document.createElement("img");
    base.src = view.task.patch;
    base.alt = "image patch";
    base.className = "layer";
    stage.appendChild(base);
    view.task.overlays.forEach((url, j) => {
      const overlay = document.createElement("img");
      overlay.src = url;
      overlay.alt = `candidate ${j + 1} contour`;
      overlay.className = "layer overlay";
      overlay.style.visibility = view.visible[j] ? "visible" : "hidden";
      stage.appendChild(overlay);
    });

    const rows = el("candidates");
    rows.replaceChildren();
    for (let j = 0; j < view.task.num_candidates; j++) {
      const row = document.createElement("label");
      row.className = "candidate" + (view.selected === j ? " selected" : "");

      const pick = document.createElement("input");
      pick.type = "radio";
      pick.name = "candidate";
      pick.checked = view.selected === j;
      pick.addEventListener("change", () => this.select(j));
      row.appendChild(pick);

      const chip = document.createElement("span");
      chip.className = "chip";
      chip.style.background = PALETTE[j % PALETTE.length];
      row.appendChild(chip);

      const name = document.createElement("span");
      name.textContent = `candidate ${j + 1}`;
      row.appendChild(name);

      const show = document.createElement("input");
      show.type = "checkbox";
      show.checked = view.visible[j];
      show.title = "show/hide this contour";
      show.addEventListener("click", (ev) => {
        ev.stopPropagation();
        ev.preventDefault();
        this.toggleOverlay(j);
      });
      row.appendChild(show);

      rows.appendChild(row);
    }

    el<HTMLButtonElement>("submit").disabled = !canSubmit(view);
  }
}

if (typeof document !== "undefined" && document.getElementById("stage")) {
  new App().start();
}
