"""Preference-optimization losses and the stage-2 fine-tuning loop.

Candidate masks are scored by their per-pixel log-likelihood under the
policy's probability map, mean-normalized by region size so that values
are comparable across patch sizes.  The implicit reward of a mask is
beta times its policy-vs-reference log-probability gap; preference
losses depend only on reward differences, so the partition function
cancels and any constant shift of the log-probabilities drops out.

Four flavors share one Plackett-Luce core: GPO (whole-image pairs or
groups), LPO (sum over all patches of a grid), SLPO (sum over a sparse
labeled subset of patches), and UPO (whole-image groups whose preferred
candidate was chosen by the unsupervised active-contour rater).  With a
single dispreferred mask the loss reduces exactly to the
Bradley-Terry form -ln sigmoid(h).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from . import model as mm
from .adapt import TrainingDiverged, _poly_lr
from .prefs import (
    CandidateCache,
    PatchGrid,
    PreferenceRecord,
    crop_region,
    partition_patches,
    select_sparse_patches,
)
from .synth import DatasetManifest, Points

MODES = ("GPO", "LPO", "SLPO", "UPO")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 1.0
    normalization: str = "mean"  # mean | sum
    learning_rate: float = 0.5
    iterations: int = 150
    seed: int = 0

    def validate(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.normalization not in ("mean", "sum"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass(frozen=True)
class PreferenceGroup:
    """One preference judgment as masks: x is identified by image_id."""

    image_id: str
    region: tuple[int, int, int, int] | None  # None = whole image
    preferred: np.ndarray
    dispreferred: list[np.ndarray]
    patch_index: int = -1

    def validate(self) -> None:
        if not self.dispreferred:
            raise ValueError("dispreferred list must be non-empty")
        pref_r = crop_region(self.preferred, self.region)
        for j, mask in enumerate(self.dispreferred):
            if mask.shape != self.preferred.shape:
                raise ValueError(f"dispreferred {j}: shape mismatch")
            if np.array_equal(crop_region(mask, self.region), pref_r):
                raise ValueError(f"dispreferred {j} equals preferred within the region")


def mask_logprob(
    prob: np.ndarray,
    mask: np.ndarray,
    region: tuple[int, int, int, int] | None = None,
    normalization: str = "mean",
) -> float:
    """Region log-likelihood of a binary mask under a probability map."""
    if prob.shape != mask.shape:
        raise ValueError(f"shape mismatch: {prob.shape} vs {mask.shape}")
    p = crop_region(prob, region)
    y = crop_region(np.asarray(mask).astype(bool), region)
    if p.size == 0:
        raise ValueError("empty region")
    total = float(np.sum(np.where(y, np.log(p), np.log1p(-p))))
    if normalization == "mean":
        return total / p.size
    if normalization == "sum":
        return total
    raise ValueError(f"unknown normalization {normalization!r}")


def implicit_reward(policy_lp: float, ref_lp: float, beta: float) -> float:
    """beta * (policy log-prob - reference log-prob); Z cancels later."""
    if not (np.isfinite(policy_lp) and np.isfinite(ref_lp)):
        raise ValueError("log-probabilities must be finite")
    return beta * (policy_lp - ref_lp)


# ---------------------------------------------------------------------------
# shared forward context and the Plackett-Luce core


@dataclass
class PolicyContext:
    """Per-image forward state shared by every group on that image."""

    policy: mm.ModelParams
    feats: np.ndarray
    hidden: np.ndarray
    prob: np.ndarray  # policy probability map, clamped
    ref_prob: np.ndarray  # frozen reference probability map


def make_context(
    policy: mm.ModelParams,
    ref: mm.ModelParams,
    image: np.ndarray,
    prompts: Points,
) -> PolicyContext:
    feats = mm.extract_features(image, prompts)
    hidden = mm.hidden_units(policy, feats)
    prob = mm.clamp_prob(expit(mm.seg_logits(policy, hidden)))
    ref_prob = mm.forward_seg(ref, feats)
    return PolicyContext(policy=policy, feats=feats, hidden=hidden, prob=prob, ref_prob=ref_prob)


def _region_slice(shape, region):
    if region is None:
        return slice(0, shape[0]), slice(0, shape[1])
    r0, r1, c0, c1 = region
    return slice(r0, r1), slice(c0, c1)


def _pl_core(group: PreferenceGroup, ctx: PolicyContext, cfg: DpoConfig):
    """Loss of one group plus its gradient contribution w.r.t. seg logits.

    loss = softplus(ln sum_j exp(-h_j)) with h_j the implicit-reward gap
    between the preferred mask and dispreferred mask j.  At policy ==
    reference every h_j is 0 and the loss is ln J.
    """
    group.validate()
    lp_pref = mask_logprob(ctx.prob, group.preferred, group.region, cfg.normalization)
    lp_pref_ref = mask_logprob(ctx.ref_prob, group.preferred, group.region, cfg.normalization)
    reward_pref = implicit_reward(lp_pref, lp_pref_ref, cfg.beta)
    hs = []
    for y_d in group.dispreferred:
        lp_d = mask_logprob(ctx.prob, y_d, group.region, cfg.normalization)
        lp_d_ref = mask_logprob(ctx.ref_prob, y_d, group.region, cfg.normalization)
        hs.append(reward_pref - implicit_reward(lp_d, lp_d_ref, cfg.beta))
    hs = np.array(hs)
    t = logsumexp(-hs)
    loss = float(np.log1p(np.exp(-abs(t))) + max(t, 0.0))  # softplus(t)
    sig_t = float(expit(t))
    weights = np.exp(-hs - t)  # softmax(-h), sums to 1

    # d loss / d lp_theta(pref) = -beta * sigmoid(t);
    # d loss / d lp_theta(disp_j) = +beta * sigmoid(t) * weights_j
    rs, cs = _region_slice(ctx.prob.shape, group.region)
    p = ctx.prob[rs, cs]
    active = (p > mm.PROB_EPS) & (p < 1.0 - mm.PROB_EPS)
    denom = p.size if cfg.normalization == "mean" else 1.0

    dlogit_region = np.zeros_like(p)
    y_pref = crop_region(np.asarray(group.preferred).astype(bool), group.region)
    coef = -cfg.beta * sig_t
    dlogit_region += coef * (y_pref.astype(np.float64) - p)
    for w_j, y_d in zip(weights, group.dispreferred):
        y_dr = crop_region(np.asarray(y_d).astype(bool), group.region)
        dlogit_region += cfg.beta * sig_t * w_j * (y_dr.astype(np.float64) - p)
    dlogit_region = np.where(active, dlogit_region / denom, 0.0)

    dlogit = np.zeros_like(ctx.prob)
    dlogit[rs, cs] = dlogit_region
    return loss, dlogit


def dpo_pl_loss(
    group: PreferenceGroup, ctx: PolicyContext, cfg: DpoConfig
) -> tuple[float, mm.ModelParams]:
    """Plackett-Luce preference loss of one group (any number of negatives)."""
    loss, dlogit = _pl_core(group, ctx, cfg)
    grads = mm.backprop(ctx.policy, ctx.feats, ctx.hidden, dseg_logit=dlogit)
    return loss, grads


def dpo_bt_loss(
    group: PreferenceGroup, ctx: PolicyContext, cfg: DpoConfig
) -> tuple[float, mm.ModelParams]:
    """Bradley-Terry pairwise loss; requires exactly one dispreferred mask."""
    if len(group.dispreferred) != 1:
        raise ValueError("pairwise loss needs exactly one dispreferred mask")
    return dpo_pl_loss(group, ctx, cfg)


def _sum_groups(groups, ctx, cfg):
    total = 0.0
    dlogit = np.zeros_like(ctx.prob)
    for group in groups:
        loss, dl = _pl_core(group, ctx, cfg)
        total += loss
        dlogit += dl
    grads = mm.backprop(ctx.policy, ctx.feats, ctx.hidden, dseg_logit=dlogit)
    return total, grads


def lpo_loss(
    groups: list[PreferenceGroup], grid: PatchGrid, ctx: PolicyContext, cfg: DpoConfig
) -> tuple[float, mm.ModelParams]:
    """Sum of per-patch losses over a full grid; every patch required."""
    present = {g.patch_index for g in groups}
    missing = [i for i in range(len(grid)) if i not in present]
    if missing:
        raise ValueError(f"missing preference groups for patches {missing}")
    if len(groups) != len(grid):
        raise ValueError("duplicate patch groups")
    for g in groups:
        want = grid.cells[g.patch_index]
        if g.region != want:
            raise ValueError(f"patch {g.patch_index}: region {g.region} != grid cell {want}")
    ordered = sorted(groups, key=lambda g: g.patch_index)
    return _sum_groups(ordered, ctx, cfg)


def slpo_loss(
    groups: list[PreferenceGroup], ctx: PolicyContext, cfg: DpoConfig
) -> tuple[float, mm.ModelParams]:
    """Sum of per-patch losses over a labeled subset; other patches get
    exactly zero gradient."""
    if not groups:
        raise ValueError("labeled patch subset is empty")
    ordered = sorted(groups, key=lambda g: g.patch_index)
    return _sum_groups(ordered, ctx, cfg)


# ---------------------------------------------------------------------------
# fine-tuning loop


def _dedupe_last_wins(records: list[PreferenceRecord]) -> list[PreferenceRecord]:
    by_key: dict[tuple[str, int], PreferenceRecord] = {}
    for rec in records:
        by_key[(rec.image_id, rec.patch_index)] = rec
    return [by_key[k] for k in sorted(by_key)]


def select_mode_records(
    records: list[PreferenceRecord],
    mode: str,
    cache: CandidateCache,
    patch_fraction: float = 0.15,
) -> list[PreferenceRecord]:
    """Filter preference records to the ones a fine-tuning mode consumes.

    GPO: whole-image records from the oracle or human raters.
    UPO: whole-image records from the unsupervised rater.
    LPO: every patch record.
    SLPO: patch records restricted, per image, to the
    ceil(patch_fraction * L^2) most candidate-disagreeing patches.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "GPO":
        picked = [r for r in records if r.patch_index == -1 and r.rater in ("oracle", "human")]
    elif mode == "UPO":
        picked = [r for r in records if r.patch_index == -1 and r.rater == "upo"]
    elif mode == "LPO":
        picked = [r for r in records if r.patch_index >= 0]
    else:  # SLPO
        local = [r for r in records if r.patch_index >= 0]
        picked = []
        for image_id in sorted({r.image_id for r in local}):
            cands, _ = cache.load_image(image_id)
            shape = cands.candidates[0][1].shape
            grid = partition_patches(shape[0], shape[1], cache.grid_level)
            chosen = set(
                select_sparse_patches(cands, grid, patch_fraction, mode="disagreement")
            )
            picked.extend(
                r for r in local if r.image_id == image_id and r.patch_index in chosen
            )
    return _dedupe_last_wins(picked)


def groups_from_records(
    records: list[PreferenceRecord], cache: CandidateCache
) -> dict[str, list[PreferenceGroup]]:
    """Materialize mask groups per image from cached candidates.

    Records carry the full complement of dispreferred indices, but nested
    threshold candidates can coincide once cropped to a patch.  Such
    region-identical negatives carry no preference signal, so they are
    dropped here; a record whose negatives all coincide with the
    preferred mask is skipped entirely (an uninformative tie).
    """
    groups: dict[str, list[PreferenceGroup]] = {}
    for rec in records:
        cands, _ = cache.load_image(rec.image_id)
        masks = cands.masks()
        if rec.preferred >= len(masks) or any(j >= len(masks) for j in rec.dispreferred):
            raise ValueError(
                f"{rec.image_id}: candidate index out of range (J = {len(masks)})"
            )
        shape = masks[0].shape
        if rec.patch_index >= 0:
            grid = partition_patches(shape[0], shape[1], cache.grid_level)
            if rec.patch_index >= len(grid):
                raise ValueError(f"{rec.image_id}: patch index {rec.patch_index} out of range")
            region = grid.cells[rec.patch_index]
        else:
            region = None
        preferred = crop_region(masks[rec.preferred], region)
        dispreferred = [
            masks[j]
            for j in rec.dispreferred
            if not np.array_equal(crop_region(masks[j], region), preferred)
        ]
        if not dispreferred:
            continue
        group = PreferenceGroup(
            image_id=rec.image_id,
            region=region,
            preferred=masks[rec.preferred],
            dispreferred=dispreferred,
            patch_index=rec.patch_index,
        )
        group.validate()
        groups.setdefault(rec.image_id, []).append(group)
    return groups


def finetune_dpo(
    policy: mm.ModelParams,
    ref: mm.ModelParams,
    records: list[PreferenceRecord],
    cache: CandidateCache,
    manifest: DatasetManifest,
    mode: str,
    cfg: DpoConfig,
    patch_fraction: float = 0.15,
) -> tuple[mm.PolicySnapshot, list[str]]:
    """Full-batch gradient descent on the selected preference loss.

    The reference stays frozen; candidates and the prompts they were
    generated under come from the cache, so the conditioning input x of
    every log-probability is fixed.  With policy == ref, the first
    logged loss equals sum over groups of ln J exactly.
    """
    cfg.validate()
    picked = select_mode_records(records, mode, cache, patch_fraction)
    if not picked:
        raise ValueError(f"no preference records apply to mode {mode}")
    groups = groups_from_records(picked, cache)
    if not any(groups.values()):
        raise ValueError(f"all {mode} preference records were uninformative ties")

    entries = {e.image_id: e for e in manifest.entries}
    image_inputs: dict[str, tuple[np.ndarray, Points]] = {}
    for image_id in sorted(groups):
        if image_id not in entries:
            raise ValueError(f"preference image {image_id!r} not in dataset manifest")
        loaded = manifest.load(entries[image_id])
        _, prompts = cache.load_image(image_id)
        image_inputs[image_id] = (loaded.image, prompts)

    # Reference forwards and features never change; compute them once.
    frozen: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for image_id, (image, prompts) in image_inputs.items():
        feats = mm.extract_features(image, prompts)
        frozen[image_id] = (feats, mm.forward_seg(ref, feats))

    params = policy.copy()
    log: list[str] = []
    for step in range(cfg.iterations):
        total = 0.0
        grads = mm.zeros_like_params(params)
        for image_id in sorted(groups):
            feats, ref_prob = frozen[image_id]
            hidden = mm.hidden_units(params, feats)
            prob = mm.clamp_prob(expit(mm.seg_logits(params, hidden)))
            ctx = PolicyContext(
                policy=params, feats=feats, hidden=hidden, prob=prob, ref_prob=ref_prob
            )
            loss, g = _sum_groups(groups[image_id], ctx, cfg)
            total += loss
            mm.accumulate(grads, g)
        if not np.isfinite(total):
            raise TrainingDiverged(f"preference loss non-finite at iteration {step}")
        params = mm.add_scaled(params, grads, -_poly_lr(cfg.learning_rate, step, cfg.iterations))
        log.append(f"{step}, {total:.6f}")
    return mm.PolicySnapshot(params=params, tag="student"), log
