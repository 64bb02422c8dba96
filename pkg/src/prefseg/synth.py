"""Synthetic EM-like datasets with controllable domain shift.

Images contain bright lobed superellipse blobs with a dark 2-px
membrane rim on a textured background; ground truth is the binary blob
mask plus the exact center point of every blob.  A target-domain
variant applies a global contrast shift, additive noise, and a finer
background texture.  An optional annotation-bias mode stores dilated
masks while keeping the true masks in a sidecar, for boundary-bias
correction experiments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .configio import ConfigError, read_kv, write_kv

MIN_SIDE = 16


class GenerationError(ValueError):
    """Invalid generator settings."""


# ---------------------------------------------------------------------------
# basic raster / point containers


@dataclass(frozen=True)
class Points:
    """Sparse (row, col) centers with a confidence in [0, 1] each."""

    coords: np.ndarray  # (N, 2) int64 rows, cols
    conf: np.ndarray  # (N,) float64

    @staticmethod
    def empty() -> "Points":
        return Points(np.zeros((0, 2), dtype=np.int64), np.zeros(0))

    @staticmethod
    def from_list(pts: list[tuple[int, int]] | list[tuple[int, int, float]]) -> "Points":
        if not pts:
            return Points.empty()
        coords = np.array([(p[0], p[1]) for p in pts], dtype=np.int64)
        conf = np.array([p[2] if len(p) > 2 else 1.0 for p in pts], dtype=np.float64)
        return Points(coords, conf)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def validate(self, height: int, width: int) -> None:
        if len(self) == 0:
            return
        rows, cols = self.coords[:, 0], self.coords[:, 1]
        if rows.min() < 0 or cols.min() < 0 or rows.max() >= height or cols.max() >= width:
            raise ValueError("point outside image bounds")
        if len(np.unique(self.coords, axis=0)) != len(self):
            raise ValueError("duplicate (row, col) point")
        if self.conf.min() < 0 or self.conf.max() > 1:
            raise ValueError("confidence outside [0, 1]")


def save_image_png(path: str | os.PathLike, img: np.ndarray) -> None:
    """Store an intensity image in [0, 1] as 8-bit grayscale PNG."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


def load_image_png(path: str | os.PathLike) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("L"), dtype=np.float64)
    return arr / 255.0


def save_mask_png(path: str | os.PathLike, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask_png(path: str | os.PathLike) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("L"))
    return arr >= 128


def save_points_csv(path: str | os.PathLike, points: Points) -> None:
    """One "row,col" line per point; confidence is not persisted."""
    with open(path, "w", encoding="utf-8") as fh:
        for r, c in points.coords:
            fh.write(f"{int(r)},{int(c)}\n")


def load_points_csv(path: str | os.PathLike) -> Points:
    rows: list[tuple[int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'row,col'")
            rows.append((int(parts[0]), int(parts[1])))
    return Points.from_list(rows)


# ---------------------------------------------------------------------------
# generator settings and manifest


@dataclass(frozen=True)
class ShiftParams:
    """Target-domain appearance shift relative to the source renderer."""

    contrast_scale: float = 1.0
    contrast_shift: float = 0.0
    noise_std: float = 0.0
    texture_freq_scale: float = 1.0


# Defaults strong enough that a source-only model measurably degrades.
TARGET_SHIFT = ShiftParams(
    contrast_scale=0.8, contrast_shift=0.1, noise_std=0.05, texture_freq_scale=1.5
)


@dataclass(frozen=True)
class GenConfig:
    count: int = 4
    height: int = 128
    width: int = 128
    blobs_min: int = 3
    blobs_max: int = 8
    radius_min: float = 7.0
    radius_max: float = 13.0
    rim_width: float = 2.0
    domain: str = "source"  # source | target
    shift: ShiftParams = field(default_factory=ShiftParams)
    bias_dilation_px: int = 0

    @staticmethod
    def for_domain(domain: str, **kw) -> "GenConfig":
        shift = TARGET_SHIFT if domain == "target" else ShiftParams()
        return GenConfig(domain=domain, shift=shift, **kw)


@dataclass(frozen=True)
class Entry:
    image_id: str
    image: str
    mask: str
    points: str
    true_mask: str | None = None


@dataclass(frozen=True)
class LoadedEntry:
    """One dataset example in memory.

    ``mask`` is the stored (possibly bias-dilated) annotation used for
    training; ``true_mask`` is the undilated ground truth when the
    dataset was generated with annotation bias, else None.
    """

    image_id: str
    image: np.ndarray
    mask: np.ndarray
    points: Points
    true_mask: np.ndarray | None = None

    @property
    def eval_mask(self) -> np.ndarray:
        return self.true_mask if self.true_mask is not None else self.mask


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    domain: str
    seed: int
    height: int
    width: int
    shift: ShiftParams
    bias_dilation_px: int
    entries: list[Entry]

    def image_path(self, e: Entry) -> Path:
        return self.root / e.image

    def mask_path(self, e: Entry) -> Path:
        return self.root / e.mask

    def points_path(self, e: Entry) -> Path:
        return self.root / e.points

    def true_mask_path(self, e: Entry) -> Path:
        """True (unbiased) mask; falls back to the stored mask."""
        return self.root / (e.true_mask if e.true_mask else e.mask)

    def load(self, e: Entry) -> LoadedEntry:
        return LoadedEntry(
            image_id=e.image_id,
            image=load_image_png(self.image_path(e)),
            mask=load_mask_png(self.mask_path(e)),
            points=load_points_csv(self.points_path(e)),
            true_mask=load_mask_png(self.true_mask_path(e)) if e.true_mask else None,
        )


MANIFEST_NAME = "manifest.txt"


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike | None = None) -> Path:
    path = Path(path) if path is not None else manifest.root / MANIFEST_NAME
    pairs = [
        ("domain", manifest.domain),
        ("seed", str(manifest.seed)),
        ("height", str(manifest.height)),
        ("width", str(manifest.width)),
        ("contrast_scale", repr(manifest.shift.contrast_scale)),
        ("contrast_shift", repr(manifest.shift.contrast_shift)),
        ("noise_std", repr(manifest.shift.noise_std)),
        ("texture_freq_scale", repr(manifest.shift.texture_freq_scale)),
        ("bias_dilation_px", str(manifest.bias_dilation_px)),
    ]
    for e in manifest.entries:
        fields = [e.image, e.mask, e.points] + ([e.true_mask] if e.true_mask else [])
        pairs.append(("entry", " ".join(fields)))
    write_kv(path, pairs, header="synthetic dataset manifest; paths relative to this file")
    return path


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    mapping, pairs = read_kv(path)
    try:
        shift = ShiftParams(
            contrast_scale=float(mapping["contrast_scale"]),
            contrast_shift=float(mapping["contrast_shift"]),
            noise_std=float(mapping["noise_std"]),
            texture_freq_scale=float(mapping["texture_freq_scale"]),
        )
        domain = mapping["domain"]
        seed = int(mapping["seed"])
        height = int(mapping["height"])
        width = int(mapping["width"])
        bias = int(mapping["bias_dilation_px"])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing manifest key {exc}") from exc
    entries = []
    for key, value in pairs:
        if key != "entry":
            continue
        fields = value.split()
        if len(fields) not in (3, 4):
            raise ConfigError(f"{path}: bad entry line {value!r}")
        image_id = Path(fields[0]).stem
        entries.append(Entry(image_id, *fields[:3], fields[3] if len(fields) == 4 else None))
    manifest = DatasetManifest(
        root=path.parent,
        domain=domain,
        seed=seed,
        height=height,
        width=width,
        shift=shift,
        bias_dilation_px=bias,
        entries=entries,
    )
    for e in entries:
        for p in (manifest.image_path(e), manifest.mask_path(e), manifest.points_path(e)):
            if not p.exists():
                raise ConfigError(f"{path}: referenced file missing: {p}")
        if e.true_mask and not manifest.true_mask_path(e).exists():
            raise ConfigError(f"{path}: referenced file missing: {manifest.true_mask_path(e)}")
    return manifest


# ---------------------------------------------------------------------------
# rendering


def _superellipse_radius(theta, a, b, exponent, rotation):
    t = theta - rotation
    c = np.abs(np.cos(t) / a) ** exponent + np.abs(np.sin(t) / b) ** exponent
    return c ** (-1.0 / exponent)


def _render_image(cfg: GenConfig, rng: np.random.Generator):
    """Render one image; returns (image, mask, centers)."""
    h, w = cfg.height, cfg.width
    # background texture: band-limited noise, finer in the target domain
    sigma_tex = 3.0 / cfg.shift.texture_freq_scale
    tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma_tex, mode="reflect")
    tex_std = tex.std()
    if tex_std > 0:
        tex *= 0.05 / tex_std
    img = 0.45 + tex

    n_blobs = int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))
    mask = np.zeros((h, w), dtype=bool)
    centers: list[tuple[int, int]] = []

    # placement gap keeps components separate even after bias dilation
    gap = 4.0 + 2.0 * cfg.bias_dilation_px
    placed: list[tuple[float, float, float]] = []  # (cy, cx, rmax)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]

    for _ in range(n_blobs):
        for _attempt in range(200):
            a = rng.uniform(cfg.radius_min, cfg.radius_max)
            b = rng.uniform(cfg.radius_min, cfg.radius_max)
            rmax = max(a, b) * 1.2
            margin = rmax + 2.0
            if 2 * margin >= min(h, w):
                break
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            if all((cy - py) ** 2 + (cx - px) ** 2 >= (rmax + pr + gap) ** 2 for py, px, pr in placed):
                break
        else:
            continue  # image too crowded; keep what fits
        if 2 * (rmax + 2.0) >= min(h, w):
            continue

        rotation = rng.uniform(0, np.pi)
        exponent = rng.uniform(1.8, 3.2)
        lobe_amp = rng.uniform(0.04, 0.10, size=2)
        lobe_freq = rng.integers(2, 5, size=2)
        lobe_phase = rng.uniform(0, 2 * np.pi, size=2)
        interior_level = 0.78 + rng.uniform(-0.05, 0.05)

        dy = rows - cy
        dx = cols - cx
        dist = np.hypot(dy, dx)
        theta = np.arctan2(dy, dx)
        radius = _superellipse_radius(theta, a, b, exponent, rotation)
        radius = radius * (
            1.0
            + lobe_amp[0] * np.sin(lobe_freq[0] * theta + lobe_phase[0])
            + lobe_amp[1] * np.sin(lobe_freq[1] * theta + lobe_phase[1])
        )
        blob = dist <= radius
        interior = dist <= radius - cfg.rim_width
        rim = blob & ~interior

        img[interior] = interior_level
        img[rim] = 0.22
        mask |= blob
        placed.append((cy, cx, rmax))
        centers.append((int(round(cy)), int(round(cx))))

    img = ndimage.gaussian_filter(img, 0.6, mode="reflect")
    # domain shift: contrast compression then additive noise
    img = img * cfg.shift.contrast_scale + cfg.shift.contrast_shift
    if cfg.shift.noise_std > 0:
        img = img + rng.normal(0.0, cfg.shift.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, mask, Points.from_list(centers)


def gen_dataset(cfg: GenConfig, seed: int, out_dir: str | os.PathLike) -> DatasetManifest:
    """Generate a dataset tree and its manifest. Deterministic given seed.

    Layout: ``images/``, ``masks/``, ``points/`` and, when
    ``bias_dilation_px > 0``, a ``true_masks/`` sidecar holding the
    undilated ground truth.
    """
    if cfg.height < MIN_SIDE or cfg.width < MIN_SIDE:
        raise GenerationError(f"image sides must be >= {MIN_SIDE}")
    if cfg.count < 1:
        raise GenerationError("count must be >= 1")
    if cfg.blobs_min > cfg.blobs_max or cfg.blobs_min < 0:
        raise GenerationError("invalid blob count range")

    out = Path(out_dir)
    biased = cfg.bias_dilation_px > 0
    try:
        for sub in ("images", "masks", "points") + (("true_masks",) if biased else ()):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise GenerationError(f"cannot create output directory: {exc}") from exc

    entries = []
    children = np.random.SeedSequence(seed).spawn(cfg.count)
    for i, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        img, mask, centers = _render_image(cfg, rng)
        image_id = f"img_{i:04d}"
        rel_img = f"images/{image_id}.png"
        rel_mask = f"masks/{image_id}.png"
        rel_pts = f"points/{image_id}.csv"
        save_image_png(out / rel_img, img)
        save_points_csv(out / rel_pts, centers)
        rel_true = None
        if biased:
            stored = ndimage.binary_dilation(
                mask, structure=np.ones((3, 3), dtype=bool), iterations=cfg.bias_dilation_px
            )
            rel_true = f"true_masks/{image_id}.png"
            save_mask_png(out / rel_true, mask)
            save_mask_png(out / rel_mask, stored)
        else:
            save_mask_png(out / rel_mask, mask)
        entries.append(Entry(image_id, rel_img, rel_mask, rel_pts, rel_true))

    manifest = DatasetManifest(
        root=out,
        domain=cfg.domain,
        seed=seed,
        height=cfg.height,
        width=cfg.width,
        shift=cfg.shift,
        bias_dilation_px=cfg.bias_dilation_px,
        entries=entries,
    )
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# point-level operations


def sample_sparse_points(full: Points, fraction: float, seed: int) -> Points:
    """Uniform subsample of round(fraction * n) points, at least one.

    Rounds half away from zero; deterministic given the seed.
    """
    n = len(full)
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    m = min(n, max(1, int(np.floor(fraction * n + 0.5))))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return Points(full.coords[idx].copy(), full.conf[idx].copy())


def rasterize_density(points: Points, sigma_d: float, height: int, width: int) -> np.ndarray:
    """Sum of unnormalized Gaussian bumps at the points, cut at 3*sigma."""
    if sigma_d <= 0:
        raise ValueError("sigma_d must be positive")
    points.validate(height, width)
    density = np.zeros((height, width))
    radius = int(np.ceil(3.0 * sigma_d))
    for (r, c), _ in zip(points.coords, points.conf):
        r0, r1 = max(0, r - radius), min(height, r + radius + 1)
        c0, c1 = max(0, c - radius), min(width, c + radius + 1)
        dy = np.arange(r0, r1)[:, None] - r
        dx = np.arange(c0, c1)[None, :] - c
        d2 = dy * dy + dx * dx
        bump = np.exp(-d2 / (2.0 * sigma_d * sigma_d))
        bump[d2 > (3.0 * sigma_d) ** 2] = 0.0
        density[r0:r1, c0:c1] += bump
    return density
