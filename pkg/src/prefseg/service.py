"""HTTP annotation service for collecting patch-level preferences.

Serves rating tasks (one image patch plus candidate contour overlays)
to the browser UI and appends submitted preferences to the same JSONL
file the oracle raters write, so fine-tuning cannot tell the sources
apart.  Tasks are ordered by candidate disagreement within the patch,
putting human effort on informative patches first.  State is file
backed: restarting the service re-reads the JSONL and resumes.

Endpoints:
  GET  /api/tasks?limit=N                pending tasks, ranked
  GET  /api/patch/{task_id}/{candidate}  PNG (candidate = "base" or index)
  GET  /api/progress                     {"total", "done", "pending"}
  POST /api/preferences                  one PreferenceRecord as JSON
Writes are serialized under a lock and each record is one atomic line.
"""

from __future__ import annotations

import io
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from . import prefs as prefs_mod
from . import synth

# distinct hues for candidate contours, reused by index modulo
PALETTE = [
    (230, 60, 60),
    (60, 160, 230),
    (60, 200, 90),
    (240, 180, 40),
    (200, 90, 220),
    (90, 220, 210),
    (240, 120, 60),
    (150, 150, 255),
]


@dataclass
class RatingTask:
    task_id: str
    image_id: str
    patch_index: int
    cell: tuple[int, int, int, int]
    num_candidates: int
    done: bool = False

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "image_id": self.image_id,
            "patch_index": self.patch_index,
            "num_candidates": self.num_candidates,
            "patch": f"/api/patch/{self.task_id}/base",
            "overlays": [
                f"/api/patch/{self.task_id}/{j}" for j in range(self.num_candidates)
            ],
            "status": "done" if self.done else "pending",
        }


def _png_bytes(img: PILImage.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class AnnotationService:
    """Task queue + preference log shared by all request threads."""

    def __init__(
        self,
        manifest: synth.DatasetManifest,
        cache: prefs_mod.CandidateCache,
        prefs_path: str | Path,
    ):
        self.prefs_path = Path(prefs_path)
        self.lock = threading.Lock()
        self.images: dict[str, np.ndarray] = {}
        self.candidates: dict[str, prefs_mod.CandidateSet] = {}
        self.tasks: dict[str, RatingTask] = {}
        self._png_cache: dict[tuple[str, str], bytes] = {}

        entries = {e.image_id: e for e in manifest.entries}
        ranked: list[tuple[int, str, int, tuple[int, int, int, int], int]] = []
        for image_id in cache.image_ids:
            if image_id not in entries:
                raise ValueError(f"cache image {image_id!r} missing from dataset manifest")
            loaded = manifest.load(entries[image_id])
            cands, _prompts = cache.load_image(image_id)
            self.images[image_id] = loaded.image
            self.candidates[image_id] = cands
            h, w = loaded.image.shape
            grid = prefs_mod.partition_patches(h, w, cache.grid_level)
            scores = prefs_mod.patch_disagreement_scores(cands, grid)
            for patch_index, cell in enumerate(grid.cells):
                ranked.append(
                    (int(scores[patch_index]), image_id, patch_index, cell, len(cands))
                )
        ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
        self.order: list[str] = []
        for _score, image_id, patch_index, cell, n_cands in ranked:
            task = RatingTask(
                task_id=f"{image_id}:p{patch_index}",
                image_id=image_id,
                patch_index=patch_index,
                cell=cell,
                num_candidates=n_cands,
            )
            self.tasks[task.task_id] = task
            self.order.append(task.task_id)

        # resume: anything already in the log counts as done
        if self.prefs_path.exists():
            for rec in prefs_mod.load_preferences(self.prefs_path):
                task = self.tasks.get(f"{rec.image_id}:p{rec.patch_index}")
                if task is not None:
                    task.done = True

    # -- queries ------------------------------------------------------------

    def pending_tasks(self, limit: int) -> list[dict]:
        with self.lock:
            out = []
            for task_id in self.order:
                task = self.tasks[task_id]
                if not task.done:
                    out.append(task.to_json())
                    if len(out) >= limit:
                        break
            return out

    def progress(self) -> dict:
        with self.lock:
            done = sum(1 for t in self.tasks.values() if t.done)
            return {"total": len(self.tasks), "done": done, "pending": len(self.tasks) - done}

    def patch_png(self, task_id: str, which: str) -> bytes | None:
        task = self.tasks.get(task_id)
        if task is None:
            return None
        key = (task_id, which)
        cached = self._png_cache.get(key)
        if cached is not None:
            return cached
        r0, r1, c0, c1 = task.cell
        if which == "base":
            crop = self.images[task.image_id][r0:r1, c0:c1]
            arr = np.clip(np.rint(crop * 255.0), 0, 255).astype(np.uint8)
            png = _png_bytes(PILImage.fromarray(arr, mode="L"))
        else:
            try:
                j = int(which)
            except ValueError:
                return None
            if not 0 <= j < task.num_candidates:
                return None
            mask = self.candidates[task.image_id].masks()[j][r0:r1, c0:c1]
            contour = mask & ~ndimage.binary_erosion(mask)  # border ring on full masks
            rgba = np.zeros((*mask.shape, 4), dtype=np.uint8)
            rgba[contour] = (*PALETTE[j % len(PALETTE)], 255)
            png = _png_bytes(PILImage.fromarray(rgba, mode="RGBA"))
        self._png_cache[key] = png
        return png

    # -- submission ---------------------------------------------------------

    def submit(self, body: bytes) -> tuple[int, dict]:
        """Returns (http status, response payload)."""
        try:
            obj = json.loads(body.decode("utf-8"))
            record = prefs_mod.record_from_dict(obj)
        except (ValueError, UnicodeDecodeError) as exc:
            return 400, {"error": f"invalid preference record: {exc}"}
        task = self.tasks.get(f"{record.image_id}:p{record.patch_index}")
        if task is None:
            return 400, {"error": f"unknown task {record.image_id}:p{record.patch_index}"}
        indices = {record.preferred, *record.dispreferred}
        if any(j >= task.num_candidates for j in indices):
            return 400, {
                "error": f"candidate index out of range (task has {task.num_candidates})"
            }
        with self.lock:
            if task.done:
                return 409, {"error": "task already submitted"}
            with open(self.prefs_path, "a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
                fh.flush()
            task.done = True
        return 200, {"status": "ok", "task_id": task.task_id}


# ---------------------------------------------------------------------------
# HTTP layer


def make_handler(service: AnnotationService, ui_dir: Path | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, body: bytes, ctype: str):
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, status: int, payload) -> None:
            self._send(status, json.dumps(payload).encode("utf-8"), "application/json")

        def do_GET(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            if url.path == "/api/progress":
                self._send_json(200, service.progress())
            elif url.path == "/api/tasks":
                query = parse_qs(url.query)
                try:
                    limit = int(query.get("limit", ["10"])[0])
                except ValueError:
                    self._send_json(400, {"error": "limit must be an integer"})
                    return
                self._send_json(200, service.pending_tasks(max(limit, 0)))
            elif len(parts) == 4 and parts[:2] == ["api", "patch"]:
                png = service.patch_png(parts[2], parts[3])
                if png is None:
                    self._send_json(404, {"error": "no such task or candidate"})
                else:
                    self._send(200, png, "image/png")
            elif parts[:1] == ["api"]:
                self._send_json(404, {"error": "unknown endpoint"})
            else:
                self._serve_static(url.path)

        def _serve_static(self, path: str) -> None:
            if ui_dir is None:
                self._send_json(404, {"error": "no UI bundle configured"})
                return
            rel = path.lstrip("/") or "index.html"
            target = (ui_dir / rel).resolve()
            if not str(target).startswith(str(ui_dir.resolve())) or not target.is_file():
                self._send_json(404, {"error": "not found"})
                return
            ctypes = {
                ".html": "text/html",
                ".js": "text/javascript",
                ".css": "text/css",
                ".png": "image/png",
                ".svg": "image/svg+xml",
                ".map": "application/json",
            }
            self._send(
                200, target.read_bytes(), ctypes.get(target.suffix, "application/octet-stream")
            )

        def do_POST(self):
            if self.path != "/api/preferences":
                self._send_json(404, {"error": "unknown endpoint"})
                return
            length = int(self.headers.get("Content-Length", "0"))
            body = self.rfile.read(length)
            status, payload = service.submit(body)
            self._send_json(status, payload)

    return Handler


def start_server(
    manifest: synth.DatasetManifest,
    cache: prefs_mod.CandidateCache,
    prefs_path: str | Path,
    host: str = "127.0.0.1",
    port: int = 0,
    ui_dir: str | Path | None = None,
) -> tuple[ThreadingHTTPServer, AnnotationService]:
    """Bind the service (port 0 = ephemeral); caller drives serve_forever."""
    service = AnnotationService(manifest, cache, prefs_path)
    ui = Path(ui_dir) if ui_dir is not None else None
    if ui is not None and not (ui / "index.html").is_file():
        raise ValueError(f"UI bundle {ui} has no index.html")

    class Server(ThreadingHTTPServer):
        request_queue_size = 64  # ride out submission bursts without resets
        daemon_threads = True

    server = Server((host, port), make_handler(service, ui))
    return server, service
