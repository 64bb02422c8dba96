"""Segmentation evaluation: Dice, instance extraction, AJI, PQ, sweeps.

Instances are 4-connected components labeled in row-major discovery
order.  AJI uses greedy truth-order matching (highest IoU, ties to the
lowest predicted id); PQ matches at IoU > 0.5, where matches are
provably unique.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import model as mm
from . import synth


@dataclass(frozen=True)
class InstanceLabeling:
    """H x W int array; 0 = background, ids 1..n are 4-connected instances."""

    labels: np.ndarray

    @property
    def count(self) -> int:
        return int(self.labels.max(initial=0))


def connected_components(mask: np.ndarray) -> InstanceLabeling:
    """4-connectivity flood fill; ids assigned in row-major discovery order."""
    from scipy import ndimage

    mask = np.asarray(mask).astype(bool)
    raw, n = ndimage.label(mask, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    if n == 0:
        return InstanceLabeling(labels=raw.astype(np.int64))
    # Re-id by the raster position of each component's first pixel so the
    # ordering contract does not depend on scipy internals.
    flat = raw.ravel()
    first_seen = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    # reversed so earlier raster indices overwrite later ones
    first_seen[flat[nz[::-1]]] = nz[::-1]
    order = np.argsort(first_seen[1:], kind="stable")  # old id - 1, sorted by first pixel
    remap = np.zeros(n + 1, dtype=np.int64)
    remap[order + 1] = np.arange(1, n + 1)
    return InstanceLabeling(labels=remap[raw])


def dice(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def _intersection_table(pred: np.ndarray, truth: np.ndarray):
    """Pairwise intersection areas between labelings, plus per-id areas."""
    np_, nt = int(pred.max(initial=0)), int(truth.max(initial=0))
    keys = pred.ravel().astype(np.int64) * (nt + 1) + truth.ravel()
    counts = np.bincount(keys, minlength=(np_ + 1) * (nt + 1))
    inter = counts.reshape(np_ + 1, nt + 1)  # inter[p, t]
    pred_areas = inter.sum(axis=1)  # index 0 = background
    truth_areas = inter.sum(axis=0)
    return inter, pred_areas, truth_areas


def aji(pred: InstanceLabeling, truth: InstanceLabeling) -> float:
    """Aggregated Jaccard index with greedy truth-order matching."""
    pl, tl = pred.labels, truth.labels
    if pl.shape != tl.shape:
        raise ValueError(f"shape mismatch: {pl.shape} vs {tl.shape}")
    n_truth = truth.count
    if n_truth == 0:
        raise ValueError("AJI is undefined without ground-truth instances")
    inter, pred_areas, truth_areas = _intersection_table(pl, tl)
    n_pred = pred.count
    used = np.zeros(n_pred + 1, dtype=bool)
    agg_inter = 0
    agg_union = 0
    for t in range(1, n_truth + 1):
        best_iou, best_p = 0.0, 0
        for p in range(1, n_pred + 1):
            if used[p] or inter[p, t] == 0:
                continue
            iou = inter[p, t] / (pred_areas[p] + truth_areas[t] - inter[p, t])
            if iou > best_iou:
                best_iou, best_p = iou, p
        if best_p:
            used[best_p] = True
            agg_inter += int(inter[best_p, t])
            agg_union += int(pred_areas[best_p] + truth_areas[t] - inter[best_p, t])
        else:
            agg_union += int(truth_areas[t])
    for p in range(1, n_pred + 1):
        if not used[p]:
            agg_union += int(pred_areas[p])
    return agg_inter / agg_union


def pq(pred: InstanceLabeling, truth: InstanceLabeling) -> tuple[float, float, float]:
    """Panoptic quality; returns (PQ, SQ, RQ) with PQ = SQ * RQ."""
    pl, tl = pred.labels, truth.labels
    if pl.shape != tl.shape:
        raise ValueError(f"shape mismatch: {pl.shape} vs {tl.shape}")
    n_pred, n_truth = pred.count, truth.count
    if n_pred == 0 and n_truth == 0:
        warnings.warn("PQ of two empty labelings defined as 1", stacklevel=2)
        return 1.0, 1.0, 1.0
    inter, pred_areas, truth_areas = _intersection_table(pl, tl)
    matched_pred: set[int] = set()
    matched_truth: set[int] = set()
    iou_sum = 0.0
    for t in range(1, n_truth + 1):
        for p in range(1, n_pred + 1):
            if inter[p, t] == 0:
                continue
            iou = inter[p, t] / (pred_areas[p] + truth_areas[t] - inter[p, t])
            if iou > 0.5:  # at most one such pair per instance
                matched_pred.add(p)
                matched_truth.add(t)
                iou_sum += iou
    tp = len(matched_truth)
    fp = n_pred - len(matched_pred)
    fn = n_truth - tp
    sq = iou_sum / tp if tp else 0.0
    rq = tp / (tp + 0.5 * fp + 0.5 * fn)
    return sq * rq, sq, rq


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass(frozen=True)
class EvalRow:
    image_id: str
    dice: float
    aji: float
    pq: float


def evaluate_policy(
    params: "mm.ModelParams",
    manifest: "synth.DatasetManifest",
    prompt_fraction: float = 0.0,
    seed: int = 0,
) -> list[EvalRow]:
    """Score forward_seg(threshold 0.5) against ground truth, per image.

    prompt_fraction > 0 samples that share of ground-truth center points
    as inference prompts (seeded per image); 0 runs in automatic mode.
    """
    rows = []
    for index, entry_paths in enumerate(manifest.entries):
        entry = manifest.load(entry_paths)
        truth_mask = entry.eval_mask
        if prompt_fraction > 0.0 and len(entry.points) > 0:
            sub_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
            prompts = synth.sample_sparse_points(entry.points, prompt_fraction, sub_seed)
        else:
            prompts = synth.Points.empty()
        feats = mm.extract_features(entry.image, prompts)
        prob = mm.forward_seg(params, feats)
        pred_mask = prob >= 0.5
        pred_inst = connected_components(pred_mask)
        truth_inst = connected_components(truth_mask)
        rows.append(
            EvalRow(
                image_id=entry.image_id,
                dice=dice(pred_mask, truth_mask),
                aji=aji(pred_inst, truth_inst),
                pq=pq(pred_inst, truth_inst)[0],
            )
        )
    return rows


def mean_row(rows: list[EvalRow]) -> EvalRow:
    if not rows:
        raise ValueError("no rows to average")
    return EvalRow(
        image_id="mean",
        dice=float(np.mean([r.dice for r in rows])),
        aji=float(np.mean([r.aji for r in rows])),
        pq=float(np.mean([r.pq for r in rows])),
    )


def format_report(rows: list[EvalRow]) -> str:
    """Aligned plain-text table; the final row holds the means."""
    full = rows + [mean_row(rows)]
    width = max(len("image_id"), *(len(r.image_id) for r in full))
    lines = [f"{'image_id':<{width}}  {'dice':>8}  {'aji':>8}  {'pq':>8}"]
    for r in full:
        lines.append(f"{r.image_id:<{width}}  {r.dice:8.4f}  {r.aji:8.4f}  {r.pq:8.4f}")
    return "\n".join(lines) + "\n"


def write_report_csv(rows: list[EvalRow], path) -> None:
    full = rows + [mean_row(rows)]
    with open(path, "w") as fh:
        fh.write("image_id,dice,aji,pq\n")
        for r in full:
            fh.write(f"{r.image_id},{r.dice:.10f},{r.aji:.10f},{r.pq:.10f}\n")


def eval_prompt_sweep(
    params: "mm.ModelParams",
    manifest: "synth.DatasetManifest",
    fractions: list[float],
    seed: int = 0,
) -> list[tuple[float, float, float, float]]:
    """(fraction, mean Dice, mean AJI, mean PQ) per requested fraction."""
    if any(f < 0.0 or f > 1.0 for f in fractions):
        raise ValueError("fractions must lie in [0, 1]")
    table = []
    for fraction in fractions:
        rows = evaluate_policy(params, manifest, prompt_fraction=fraction, seed=seed)
        m = mean_row(rows)
        table.append((fraction, m.dice, m.aji, m.pq))
    return table
