"""Preference data construction and persistence.

Candidates are nested binary masks obtained by thresholding one
probability map at several levels.  Preferences over them are collected
either on the whole image (patch_index = -1) or on cells of an L x L
patch grid, from one of three raters: an oracle that ranks candidates
by Dice against ground truth, a human (via the annotation service), or
the unsupervised active-contour rater.  Records persist as append-only
JSONL.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import synth
from .configio import ConfigError, read_kv, write_kv
from .metrics import dice

RATERS = ("oracle", "human", "upo")

# Sentinel timestamp for automated raters: keeps re-runs byte-identical.
EPOCH_TIMESTAMP = "1970-01-01T00:00:00Z"


class DegenerateCandidates(ValueError):
    """Thresholding produced fewer than two distinct masks."""


# ---------------------------------------------------------------------------
# candidates


@dataclass(frozen=True)
class CandidateSet:
    image_id: str
    candidates: list[tuple[float, np.ndarray]]  # (threshold, mask), ascending
    source_prob: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.candidates)

    def masks(self) -> list[np.ndarray]:
        return [m for _, m in self.candidates]

    def validate(self) -> None:
        if len(self.candidates) < 2:
            raise DegenerateCandidates(f"{self.image_id}: fewer than 2 candidates")
        gammas = [g for g, _ in self.candidates]
        if any(b <= a for a, b in zip(gammas, gammas[1:])):
            raise ValueError(f"{self.image_id}: thresholds not strictly increasing")
        shape = self.candidates[0][1].shape
        for j, (_, m) in enumerate(self.candidates):
            if m.shape != shape:
                raise ValueError(f"{self.image_id}: candidate {j} shape mismatch")
        for a in range(len(self.candidates)):
            for b in range(a + 1, len(self.candidates)):
                if np.array_equal(self.candidates[a][1], self.candidates[b][1]):
                    raise ValueError(f"{self.image_id}: duplicate candidates {a}, {b}")


def generate_candidates(
    prob: np.ndarray, thresholds: list[float], image_id: str = ""
) -> CandidateSet:
    """mask_j = [prob >= threshold_j]; duplicates keep the lowest threshold."""
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    if any(t <= 0.0 or t >= 1.0 for t in thresholds):
        raise ValueError("thresholds must lie in (0, 1)")
    cands: list[tuple[float, np.ndarray]] = []
    for gamma in thresholds:
        mask = prob >= gamma
        if any(np.array_equal(mask, kept) for _, kept in cands):
            continue
        cands.append((gamma, mask))
    if len(cands) < 2:
        raise DegenerateCandidates(
            f"{image_id or 'probability map'}: only {len(cands)} distinct mask(s)"
        )
    return CandidateSet(image_id=image_id, candidates=cands, source_prob=prob)


# ---------------------------------------------------------------------------
# patch grid


@dataclass(frozen=True)
class PatchGrid:
    level: int  # L
    cells: list[tuple[int, int, int, int]]  # (row0, row1, col0, col1), row-major

    def __len__(self) -> int:
        return len(self.cells)


def _axis_splits(n: int, level: int) -> list[tuple[int, int]]:
    """level contiguous runs: ceil(n/L) for the first n mod L, floor after."""
    base, extra = divmod(n, level)
    runs = []
    start = 0
    for i in range(level):
        size = base + (1 if i < extra else 0)
        runs.append((start, start + size))
        start += size
    return runs


def partition_patches(height: int, width: int, level: int) -> PatchGrid:
    if level < 1:
        raise ValueError("grid level must be >= 1")
    if level > min(height, width):
        raise ValueError(f"grid level {level} exceeds min image side {min(height, width)}")
    rows = _axis_splits(height, level)
    cols = _axis_splits(width, level)
    cells = [(r0, r1, c0, c1) for (r0, r1) in rows for (c0, c1) in cols]
    return PatchGrid(level=level, cells=cells)


def crop_region(arr: np.ndarray, region: tuple[int, int, int, int] | None) -> np.ndarray:
    if region is None:
        return arr
    r0, r1, c0, c1 = region
    return arr[r0:r1, c0:c1]


# ---------------------------------------------------------------------------
# raters


def oracle_rank(
    cands: CandidateSet,
    truth: np.ndarray,
    region: tuple[int, int, int, int] | None = None,
) -> tuple[int, list[int]] | None:
    """Rank candidates by Dice against truth within the region.

    Returns (preferred index, dispreferred indices), ties going to the
    lowest threshold index, or None (skip) when every candidate scores
    the same -- an uninformative region.
    """
    truth_r = crop_region(np.asarray(truth).astype(bool), region)
    scores = [dice(crop_region(m, region), truth_r) for m in cands.masks()]
    best = max(scores)
    if min(scores) == best:
        return None
    preferred = scores.index(best)  # first max = lowest threshold index
    dispreferred = [j for j in range(len(scores)) if j != preferred]
    return preferred, dispreferred


def patch_disagreement_scores(cands: CandidateSet, grid: PatchGrid) -> np.ndarray:
    """Summed pairwise Hamming distance among candidates, per patch."""
    masks = cands.masks()
    scores = np.zeros(len(grid), dtype=np.int64)
    for idx, cell in enumerate(grid.cells):
        crops = [crop_region(m, cell) for m in masks]
        total = 0
        for a in range(len(crops)):
            for b in range(a + 1, len(crops)):
                total += int((crops[a] ^ crops[b]).sum())
        scores[idx] = total
    return scores


def select_sparse_patches(
    cands: CandidateSet,
    grid: PatchGrid,
    fraction: float,
    mode: str = "disagreement",
    seed: int = 0,
) -> list[int]:
    """Pick ceil(fraction * L^2) patch indices for sparse labeling."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n = len(grid)
    m = int(np.ceil(fraction * n))
    if mode == "disagreement":
        scores = patch_disagreement_scores(cands, grid)
        order = sorted(range(n), key=lambda i: (-int(scores[i]), i))
        return order[:m]
    if mode == "random":
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(n, size=m, replace=False))
    raise ValueError(f"unknown selection mode {mode!r}")


# ---------------------------------------------------------------------------
# preference records


@dataclass(frozen=True)
class PreferenceRecord:
    image_id: str
    patch_index: int  # -1 = whole image
    preferred: int
    dispreferred: tuple[int, ...]
    rater: str
    timestamp: str

    def validate(self) -> None:
        if not isinstance(self.image_id, str) or not self.image_id:
            raise ValueError("image_id must be a non-empty string")
        if not isinstance(self.patch_index, int) or self.patch_index < -1:
            raise ValueError("patch_index must be an integer >= -1")
        if not isinstance(self.preferred, int) or self.preferred < 0:
            raise ValueError("preferred must be a nonnegative integer")
        if len(self.dispreferred) == 0:
            raise ValueError("dispreferred must be non-empty")
        if any((not isinstance(j, int)) or j < 0 for j in self.dispreferred):
            raise ValueError("dispreferred indices must be nonnegative integers")
        if self.preferred in self.dispreferred:
            raise ValueError("preferred appears in dispreferred")
        if len(set(self.dispreferred)) != len(self.dispreferred):
            raise ValueError("duplicate dispreferred index")
        if self.rater not in RATERS:
            raise ValueError(f"unknown rater {self.rater!r}")
        if not isinstance(self.timestamp, str) or not self.timestamp:
            raise ValueError("timestamp must be a non-empty string")

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_id": self.image_id,
                "patch_index": self.patch_index,
                "preferred": self.preferred,
                "dispreferred": list(self.dispreferred),
                "rater": self.rater,
                "timestamp": self.timestamp,
            }
        )


def record_from_dict(obj: dict) -> PreferenceRecord:
    expected = {"image_id", "patch_index", "preferred", "dispreferred", "rater", "timestamp"}
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    missing = expected - set(obj)
    if missing:
        raise ValueError(f"missing fields: {sorted(missing)}")
    extra = set(obj) - expected
    if extra:
        raise ValueError(f"unknown fields: {sorted(extra)}")
    if not isinstance(obj["dispreferred"], list):
        raise ValueError("dispreferred must be an array")
    # bool is an int subclass; exclude it explicitly
    for key in ("patch_index", "preferred"):
        if isinstance(obj[key], bool) or not isinstance(obj[key], int):
            raise ValueError(f"{key} must be an integer")
    disp = []
    for j in obj["dispreferred"]:
        if isinstance(j, bool) or not isinstance(j, int):
            raise ValueError("dispreferred entries must be integers")
        disp.append(j)
    rec = PreferenceRecord(
        image_id=obj["image_id"],
        patch_index=obj["patch_index"],
        preferred=obj["preferred"],
        dispreferred=tuple(disp),
        rater=obj["rater"],
        timestamp=obj["timestamp"],
    )
    rec.validate()
    return rec


def store_preferences(records: list[PreferenceRecord], path: str | os.PathLike) -> None:
    """Append records to a JSONL file, one validated record per line."""
    for rec in records:
        rec.validate()
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def load_preferences(path: str | os.PathLike) -> list[PreferenceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(record_from_dict(obj))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# consistency analysis


def consistency_histogram(
    global_prefs: list[PreferenceRecord], local_prefs: list[PreferenceRecord]
) -> np.ndarray:
    """Per-image count k of patches agreeing with the image-level choice.

    Returns the frequency histogram over k = 0 .. max patches/image.
    Within one (image, patch) key the last record wins.
    """
    global_by_image: dict[str, int] = {}
    for rec in global_prefs:
        if rec.patch_index != -1:
            raise ValueError(f"{rec.image_id}: global record has patch_index != -1")
        global_by_image[rec.image_id] = rec.preferred
    local_by_image: dict[str, dict[int, int]] = {}
    for rec in local_prefs:
        if rec.patch_index < 0:
            raise ValueError(f"{rec.image_id}: local record has patch_index -1")
        local_by_image.setdefault(rec.image_id, {})[rec.patch_index] = rec.preferred

    shared = sorted(set(global_by_image) & set(local_by_image))
    skipped = sorted(set(global_by_image) ^ set(local_by_image))
    if skipped:
        warnings.warn(f"images present on one side only, excluded: {skipped}", stacklevel=2)
    if not shared:
        return np.zeros(1, dtype=np.int64)

    max_patches = max(len(local_by_image[i]) for i in shared)
    hist = np.zeros(max_patches + 1, dtype=np.int64)
    for image_id in shared:
        choice = global_by_image[image_id]
        k = sum(1 for p in local_by_image[image_id].values() if p == choice)
        hist[k] += 1
    return hist


# ---------------------------------------------------------------------------
# candidate cache on disk


CACHE_INDEX = "index.txt"


@dataclass(frozen=True)
class CandidateCache:
    """Frozen on-disk candidate masks + the prompts that produced them.

    Layout: ``<root>/index.txt`` plus ``<root>/<image_id>/cand_<j>.png``,
    ``<root>/<image_id>/gammas.txt`` and ``<root>/<image_id>/prompts.csv``.
    """

    root: Path
    dataset: str  # manifest path as recorded
    thresholds: tuple[float, ...]
    grid_level: int
    prompt_fraction: float
    seed: int
    image_ids: tuple[str, ...]

    def image_dir(self, image_id: str) -> Path:
        return self.root / image_id

    def save_image(self, cands: CandidateSet, prompts: synth.Points) -> None:
        cands.validate()
        d = self.image_dir(cands.image_id)
        d.mkdir(parents=True, exist_ok=True)
        pairs = []
        for j, (gamma, mask) in enumerate(cands.candidates):
            synth.save_mask_png(d / f"cand_{j}.png", mask)
            pairs.append((f"gamma_{j}", repr(gamma)))
        write_kv(d / "gammas.txt", pairs)
        synth.save_points_csv(d / "prompts.csv", prompts)

    def load_image(self, image_id: str) -> tuple[CandidateSet, synth.Points]:
        d = self.image_dir(image_id)
        if not d.is_dir():
            raise ConfigError(f"candidate cache has no image {image_id!r}")
        mapping, pairs = read_kv(d / "gammas.txt")
        cands = []
        for j in range(len(pairs)):
            gamma = float(mapping[f"gamma_{j}"])
            cands.append((gamma, synth.load_mask_png(d / f"cand_{j}.png")))
        cset = CandidateSet(image_id=image_id, candidates=cands, source_prob=None)
        cset.validate()
        return cset, synth.load_points_csv(d / "prompts.csv")

    def write_index(self) -> None:
        pairs = [
            ("dataset", self.dataset),
            ("thresholds", " ".join(repr(t) for t in self.thresholds)),
            ("grid_level", str(self.grid_level)),
            ("prompt_fraction", repr(self.prompt_fraction)),
            ("seed", str(self.seed)),
        ]
        pairs += [("image", i) for i in self.image_ids]
        self.root.mkdir(parents=True, exist_ok=True)
        write_kv(self.root / CACHE_INDEX, pairs, header="candidate cache index")


def load_cache(root: str | os.PathLike) -> CandidateCache:
    root = Path(root)
    mapping, pairs = read_kv(root / CACHE_INDEX)
    try:
        cache = CandidateCache(
            root=root,
            dataset=mapping["dataset"],
            thresholds=tuple(float(t) for t in mapping["thresholds"].split()),
            grid_level=int(mapping["grid_level"]),
            prompt_fraction=float(mapping["prompt_fraction"]),
            seed=int(mapping["seed"]),
            image_ids=tuple(v for k, v in pairs if k == "image"),
        )
    except KeyError as exc:
        raise ConfigError(f"{root / CACHE_INDEX}: missing key {exc}") from exc
    return cache
