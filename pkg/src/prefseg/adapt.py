"""Stage-1 domain-adaptive training.

A student policy trains on supervised source crops plus target crops
labeled by a slowly-updated mean teacher: the teacher's density head
proposes pseudo center points via non-maximum suppression, its
segmentation head yields confidence-thresholded pseudo-labels, and a
prompt-guided contrastive loss pulls foreground point embeddings toward
the averaged prompt embedding and away from sampled background
embeddings.  Optimization is plain gradient descent with polynomial
learning-rate decay (power 0.9); the teacher tracks the student by
exponential moving average and never receives gradients.

With sparse_fraction = 0 the loop runs unsupervised: target prompt
points come from confident detections of the initial (source) model
instead of ground-truth sparse points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit, logsumexp

from . import model as mm
from .metrics import connected_components
from .synth import DatasetManifest, Points, rasterize_density, sample_sparse_points

IGNORE = -1  # pseudo-label value contributing zero loss and zero gradient


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during training."""


@dataclass(frozen=True)
class Stage1Config:
    lambda1: float = 1e-3  # detection-loss weight
    lambda2: float = 1e-3  # contrastive-loss weight
    delta_f: float = 0.9  # foreground confidence threshold
    delta_b: float = 0.1  # background confidence threshold
    tau: float = 0.5  # contrastive temperature
    n_negatives: int = 256
    ema_decay: float = 0.99
    learning_rate: float = 1.0
    iterations: int = 2000
    crop: int = 64
    nms_window: int = 5
    nms_threshold: float = 0.3
    nms_cap: int = 64
    density_sigma: float = 2.0
    uda_confidence: float = 0.9  # NMS threshold for source-model pseudo points
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.delta_b < self.delta_f <= 1.0:
            raise ValueError("need 0 <= delta_b < delta_f <= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema decay must be in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.nms_window < 3 or self.nms_window % 2 == 0:
            raise ValueError("nms window must be odd and >= 3")
        if self.crop < 8:
            raise ValueError("crop too small")


# ---------------------------------------------------------------------------
# point detection


def nms_extract_points(
    density: np.ndarray,
    threshold: float,
    window: int,
    max_points: int | None = None,
) -> Points:
    """Strict window-maxima of a density map, at or above the threshold.

    Ties resolve row-major (the earliest pixel wins); zero-valued pixels
    are never detections.  Confidence is the value capped at 1.  When
    max_points is given, the highest-confidence points are kept.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    density = np.asarray(density, dtype=np.float64)
    h, w = density.shape
    flat = density.ravel()
    n = flat.size
    # rank by (value, -raster index): a strict rank maximum is exactly a
    # window maximum with earliest-pixel tie-breaking
    order = np.lexsort((-np.arange(n), flat))
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    rank_max = ndimage.maximum_filter(ranks.reshape(h, w), size=window, mode="constant", cval=-1)
    keep = (rank_max == ranks.reshape(h, w)) & (density >= threshold) & (density > 0)
    coords = np.argwhere(keep).astype(np.int64)  # row-major order
    conf = np.minimum(density[keep], 1.0)
    if max_points is not None and len(coords) > max_points:
        sel = sorted(range(len(coords)), key=lambda i: (-conf[i], i))[:max_points]
        sel = np.array(sorted(sel))
        coords, conf = coords[sel], conf[sel]
    return Points(coords, conf.astype(np.float64))


def merge_points(a: Points, b: Points) -> Points:
    """Union of point sets; on (row, col) collision the first set wins."""
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    seen = {tuple(rc) for rc in a.coords}
    keep = [i for i, rc in enumerate(b.coords) if tuple(rc) not in seen]
    return Points(
        np.concatenate([a.coords, b.coords[keep]]),
        np.concatenate([a.conf, b.conf[keep]]),
    )


# ---------------------------------------------------------------------------
# losses


def detection_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to pred."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def segmentation_loss(prob: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over non-ignore pixels.

    Returns the loss and its gradient with respect to the presigmoid
    logits; the gradient is zero wherever the probability clamp binds.
    """
    if prob.shape != labels.shape:
        raise ValueError(f"shape mismatch: {prob.shape} vs {labels.shape}")
    valid = labels != IGNORE
    n = int(valid.sum())
    grad = np.zeros_like(prob)
    if n == 0:
        return 0.0, grad
    y = (labels == 1).astype(np.float64)
    loss = -(
        np.sum(np.log(prob[valid & (labels == 1)]))
        + np.sum(np.log1p(-prob[valid & (labels == 0)]))
    ) / n
    active = valid & (prob > mm.PROB_EPS) & (prob < 1.0 - mm.PROB_EPS)
    grad[active] = (prob[active] - y[active]) / n
    return float(loss), grad


def make_pseudo_labels(teacher_prob: np.ndarray, delta_f: float, delta_b: float) -> np.ndarray:
    """1 at confident foreground, 0 at confident background, else ignore."""
    if not 0.0 <= delta_b < delta_f <= 1.0:
        raise ValueError("need 0 <= delta_b < delta_f <= 1")
    labels = np.full(teacher_prob.shape, IGNORE, dtype=np.int8)
    labels[teacher_prob >= delta_f] = 1
    labels[teacher_prob <= delta_b] = 0
    return labels


def select_contrastive_points(
    pseudo: np.ndarray,
    teacher_prob: np.ndarray,
    delta_f: float,
    delta_b: float,
    n_negatives: int,
    seed: int,
) -> tuple[Points, Points]:
    """Foreground queries and background negatives for the contrastive loss.

    Foreground: the top-3 teacher-confidence pixels of every connected
    pseudo-foreground component (fewer for smaller components), ties
    row-major.  Background: up to n_negatives pixels with probability
    below delta_b, sampled uniformly with the seed.
    """
    labeling = connected_components(pseudo == 1)
    fg_coords: list[tuple[int, int]] = []
    fg_conf: list[float] = []
    flat_prob = teacher_prob.ravel()
    for k in range(1, labeling.count + 1):
        idx = np.flatnonzero(labeling.labels.ravel() == k)
        top = sorted(idx, key=lambda i: (-flat_prob[i], i))[:3]
        for i in top:
            fg_coords.append((i // teacher_prob.shape[1], i % teacher_prob.shape[1]))
            fg_conf.append(float(flat_prob[i]))
    fg = (
        Points(np.array(fg_coords, dtype=np.int64), np.array(fg_conf))
        if fg_coords
        else Points.empty()
    )

    bg_idx = np.flatnonzero(flat_prob < delta_b)
    if len(bg_idx) > n_negatives:
        rng = np.random.default_rng(seed)
        bg_idx = np.sort(rng.choice(bg_idx, size=n_negatives, replace=False))
    if len(bg_idx) == 0:
        return fg, Points.empty()
    w = teacher_prob.shape[1]
    bg = Points(
        np.stack([bg_idx // w, bg_idx % w], axis=1).astype(np.int64),
        flat_prob[bg_idx].astype(np.float64),
    )
    return fg, bg


def pcl_loss(
    queries: np.ndarray,
    mu_f: np.ndarray,
    negatives: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Prompt-guided contrastive loss, summed over queries.

    L = -sum_i log[ exp(mu_f . z_i / tau) /
                    (exp(mu_f . z_i / tau) + sum_k exp(mu_k . z_i / tau)) ]

    Returns (loss, d/dqueries, d/dmu_f, d/dnegatives).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, queries.shape[-1])
    if queries.size == 0:
        return 0.0, np.zeros_like(queries), np.zeros_like(mu_f), np.zeros_like(negatives)
    prototypes = np.vstack([mu_f[None, :], negatives])  # (1+K, E)
    scores = queries @ prototypes.T / tau  # (N, 1+K)
    log_den = logsumexp(scores, axis=1)
    loss = float(np.sum(log_den - scores[:, 0]))
    p = np.exp(scores - log_den[:, None])  # softmax rows
    dscores = p.copy()
    dscores[:, 0] -= 1.0
    dqueries = dscores @ prototypes / tau
    dprototypes = dscores.T @ queries / tau
    return loss, dqueries, dprototypes[0], dprototypes[1:]


def mean_direction(embeds: np.ndarray):
    """Unit-normalized mean of unit embeddings, with a backprop cache.

    Returns (None, None) when the mean vanishes (degenerate; the caller
    skips the contrastive term).
    """
    embeds = np.atleast_2d(embeds)
    u = embeds.mean(axis=0)
    nu = float(np.linalg.norm(u))
    if nu == 0.0:
        return None, None
    return u / nu, (embeds.shape[0], u / nu, nu)


def mean_direction_backprop(cache, g_mu: np.ndarray) -> np.ndarray:
    n, mu, nu = cache
    g_u = (g_mu - np.dot(g_mu, mu) * mu) / nu
    return np.tile(g_u / n, (n, 1))


# ---------------------------------------------------------------------------
# crop/flip sampling


def _transform_points(points: Points, r0: int, c0: int, crop: int, flip_v: bool, flip_h: bool) -> Points:
    if len(points) == 0:
        return points
    coords = points.coords
    keep = (
        (coords[:, 0] >= r0)
        & (coords[:, 0] < r0 + crop)
        & (coords[:, 1] >= c0)
        & (coords[:, 1] < c0 + crop)
    )
    sub = coords[keep] - np.array([r0, c0], dtype=np.int64)
    if flip_v:
        sub = sub.copy()
        sub[:, 0] = crop - 1 - sub[:, 0]
    if flip_h:
        sub = sub.copy()
        sub[:, 1] = crop - 1 - sub[:, 1]
    return Points(sub, points.conf[keep])


def _crop_and_flip(rng, crop: int, image: np.ndarray, mask: np.ndarray | None, point_sets: list[Points]):
    h, w = image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image {h}x{w}")
    r0 = int(rng.integers(0, h - crop + 1))
    c0 = int(rng.integers(0, w - crop + 1))
    flip_v = bool(rng.integers(0, 2))
    flip_h = bool(rng.integers(0, 2))

    def cut(arr):
        sub = arr[r0 : r0 + crop, c0 : c0 + crop]
        if flip_v:
            sub = sub[::-1, :]
        if flip_h:
            sub = sub[:, ::-1]
        return np.ascontiguousarray(sub)

    out_points = [_transform_points(p, r0, c0, crop, flip_v, flip_h) for p in point_sets]
    return cut(image), (cut(mask) if mask is not None else None), out_points


def _subsample_points(rng, points: Points, count: int) -> Points:
    if count >= len(points):
        return points
    if count == 0:
        return Points.empty()
    idx = np.sort(rng.choice(len(points), size=count, replace=False))
    return Points(points.coords[idx].copy(), points.conf[idx].copy())


# ---------------------------------------------------------------------------
# shared forward/backward pieces


def _supervised_pass(params, image, labels, gt_points, prompts, cfg):
    """Seg + det losses of one crop against explicit labels/points.

    Returns (seg_loss, det_loss, parameter gradients of
    seg_loss + lambda1 * det_loss).
    """
    feats = mm.extract_features(image, prompts)
    hidden = mm.hidden_units(params, feats)
    prob = mm.clamp_prob(expit(mm.seg_logits(params, hidden)))
    seg_l, dseg = segmentation_loss(prob, labels)
    det_logit = mm.det_logits(params, hidden)
    density = mm.softplus(det_logit)
    target = rasterize_density(gt_points, cfg.density_sigma, *image.shape)
    det_l, ddens = detection_loss(density, target)
    ddet_logit = cfg.lambda1 * ddens * expit(det_logit)
    grads = mm.backprop(params, feats, hidden, dseg, ddet_logit)
    return seg_l, det_l, grads


def _poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - step / max(total, 1)) ** power


def _check_finite(value: float, step: int, context: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"{context} loss became non-finite at iteration {step}; lower the learning rate"
        )


# ---------------------------------------------------------------------------
# training loops


def train_source(
    manifest: DatasetManifest,
    cfg: Stage1Config,
    init: mm.ModelParams | None = None,
) -> tuple[mm.PolicySnapshot, list[str]]:
    """Supervised training on one (source) dataset; no teacher involved."""
    cfg.validate()
    params = (init.copy() if init is not None else mm.init_params(cfg.seed))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA]))
    entries = [manifest.load(e) for e in manifest.entries]
    log: list[str] = []
    for step in range(cfg.iterations):
        entry = entries[int(rng.integers(len(entries)))]
        image, mask, (points,) = _crop_and_flip(
            rng, cfg.crop, entry.image, entry.mask, [entry.points]
        )
        n_s = int(rng.integers(0, len(points) + 1))
        prompts = _subsample_points(rng, points, n_s)
        seg_l, det_l, grads = _supervised_pass(
            params, image, mask.astype(np.int8), points, prompts, cfg
        )
        total = seg_l + cfg.lambda1 * det_l
        _check_finite(total, step, "source")
        params = mm.add_scaled(params, grads, -_poly_lr(cfg.learning_rate, step, cfg.iterations))
        log.append(f"{step}, {seg_l:.6f}, {det_l:.6f}, 0.000000, {total:.6f}")
    return mm.PolicySnapshot(params=params, tag="student"), log


def uda_pseudo_sparse(source_params: mm.ModelParams, image: np.ndarray, cfg: Stage1Config) -> Points:
    """Confident source-model detections standing in for sparse annotations."""
    feats = mm.extract_features(image, Points.empty())
    density = mm.forward_det(source_params, feats)
    return nms_extract_points(density, cfg.uda_confidence, cfg.nms_window, cfg.nms_cap)


def train_stage1(
    source: DatasetManifest,
    target: DatasetManifest,
    sparse_fraction: float,
    cfg: Stage1Config,
    init: mm.ModelParams | None = None,
) -> tuple[mm.PolicySnapshot, mm.PolicySnapshot, list[str]]:
    """Mean-teacher adaptation from source to target.

    sparse_fraction > 0: that share of each target image's ground-truth
    points acts as its fixed sparse annotation.  sparse_fraction = 0:
    unsupervised mode; the init (source) model's confident detections
    take their place.  Returns (student, teacher, log).
    """
    cfg.validate()
    if not 0.0 <= sparse_fraction <= 1.0:
        raise ValueError("sparse_fraction must be in [0, 1]")
    student = (init.copy() if init is not None else mm.init_params(cfg.seed))
    teacher = student.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB]))

    source_entries = [source.load(e) for e in source.entries]
    target_entries = [target.load(e) for e in target.entries]

    # Fixed per-image sparse annotations (or pseudo ones in UDA mode).
    sparse_sets: list[Points] = []
    for idx, entry in enumerate(target_entries):
        if sparse_fraction > 0.0 and len(entry.points) > 0:
            sparse_sets.append(
                sample_sparse_points(entry.points, sparse_fraction, sparse_seed(target.seed, idx))
            )
        elif sparse_fraction == 0.0:
            src_model = init if init is not None else student
            sparse_sets.append(uda_pseudo_sparse(src_model, entry.image, cfg))
        else:
            sparse_sets.append(Points.empty())

    log: list[str] = []
    for step in range(cfg.iterations):
        grads = mm.zeros_like_params(student)

        # --- supervised source crop
        entry = source_entries[int(rng.integers(len(source_entries)))]
        image, mask, (points,) = _crop_and_flip(
            rng, cfg.crop, entry.image, entry.mask, [entry.points]
        )
        n_s = int(rng.integers(0, len(points) + 1))
        prompts = _subsample_points(rng, points, n_s)
        seg_s, det_s, g = _supervised_pass(
            student, image, mask.astype(np.int8), points, prompts, cfg
        )
        mm.accumulate(grads, g)

        # --- pseudo-labeled target crop
        t_idx = int(rng.integers(len(target_entries)))
        t_entry = target_entries[t_idx]
        t_image, _, (t_sparse,) = _crop_and_flip(
            rng, cfg.crop, t_entry.image, None, [sparse_sets[t_idx]]
        )
        # teacher pass 1: detect pseudo points under sparse prompts alone
        t_feats1 = mm.extract_features(t_image, t_sparse)
        t_hidden1 = mm.hidden_units(teacher, t_feats1)
        t_density1 = mm.softplus(mm.det_logits(teacher, t_hidden1))
        pseudo_pts = nms_extract_points(
            t_density1, cfg.nms_threshold, cfg.nms_window, cfg.nms_cap
        )
        prompts_t = merge_points(t_sparse, pseudo_pts)
        # teacher pass 2: pseudo-labels under the full prompt set
        t_feats = mm.extract_features(t_image, prompts_t)
        t_hidden = mm.hidden_units(teacher, t_feats)
        t_prob = mm.clamp_prob(expit(mm.seg_logits(teacher, t_hidden)))
        pseudo = make_pseudo_labels(t_prob, cfg.delta_f, cfg.delta_b)

        # student pass on the same crop and prompts
        feats = mm.extract_features(t_image, prompts_t)
        hidden = mm.hidden_units(student, feats)
        prob = mm.clamp_prob(expit(mm.seg_logits(student, hidden)))
        seg_t, dseg = segmentation_loss(prob, pseudo)
        det_logit = mm.det_logits(student, hidden)
        density = mm.softplus(det_logit)
        target_density = rasterize_density(prompts_t, cfg.density_sigma, *t_image.shape)
        det_t, ddens = detection_loss(density, target_density)

        # contrastive term
        pcl_l = 0.0
        embed_grads: list[tuple[tuple[int, int], np.ndarray]] = []
        fg, bg = select_contrastive_points(
            pseudo,
            t_prob,
            cfg.delta_f,
            cfg.delta_b,
            cfg.n_negatives,
            seed=int(rng.integers(0, 2**31)),
        )
        if cfg.lambda2 > 0 and len(fg) > 0 and len(bg) > 0 and len(prompts_t) > 0:
            prompt_emb = mm.embed_from_hidden(student, hidden, prompts_t.coords)
            mu, mu_cache = mean_direction(prompt_emb)
            if mu is not None:
                q_emb = mm.embed_from_hidden(student, hidden, fg.coords)
                n_emb = mm.embed_from_hidden(student, hidden, bg.coords)
                pcl_l, dq, dmu, dneg = pcl_loss(q_emb, mu, n_emb, cfg.tau)
                dprompt = mean_direction_backprop(mu_cache, dmu)
                for coord_list, grad_mat in (
                    (prompts_t.coords, dprompt),
                    (fg.coords, dq),
                    (bg.coords, dneg),
                ):
                    for rc, gv in zip(coord_list, grad_mat):
                        embed_grads.append(((int(rc[0]), int(rc[1])), cfg.lambda2 * gv))

        ddet_logit = cfg.lambda1 * ddens * expit(det_logit)
        mm.accumulate(grads, mm.backprop(student, feats, hidden, dseg, ddet_logit, embed_grads))

        seg_total = seg_s + seg_t
        det_total = det_s + det_t
        total = seg_total + cfg.lambda1 * det_total + cfg.lambda2 * pcl_l
        _check_finite(total, step, "stage-1")

        student = mm.add_scaled(
            student, grads, -_poly_lr(cfg.learning_rate, step, cfg.iterations)
        )
        teacher = mm.ema_update(teacher, student, cfg.ema_decay)
        log.append(
            f"{step}, {seg_total:.6f}, {det_total:.6f}, {pcl_l:.6f}, {total:.6f}"
        )
    return (
        mm.PolicySnapshot(params=student, tag="student"),
        mm.PolicySnapshot(params=teacher, tag="teacher"),
        log,
    )


def sparse_seed(manifest_seed: int, index: int) -> int:
    """Seed for an image's fixed sparse-annotation subset.

    Derived from the dataset seed so that training, preference building
    and fine-tuning all see the same sparse points.
    """
    return int(np.random.SeedSequence([manifest_seed, 1000 + index]).generate_state(1)[0])
