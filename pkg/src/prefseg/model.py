"""Promptable pixel classifier with analytic gradients.

The model is a fixed 9-channel filter bank (intensities, multi-scale
smoothing, gradient magnitudes, local variance, prompt channel,
constant bias) feeding one shared tanh hidden layer of 16 units, with
three heads on top: a sigmoid segmentation head, a softplus
center-density head, and a linear projection head whose per-pixel
outputs are L2-normalized embeddings.  All gradients are written out
by hand; there is no autodiff anywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .synth import Points

FEATURE_COUNT = 9
HIDDEN_UNITS = 16
EMBED_DIM = 16
PROMPT_SIGMA = 3.0
PROB_EPS = 1e-6

SMOOTH_SCALES = (1.0, 2.0, 4.0)
GRAD_SCALES = (1.0, 2.0)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    hidden_w: np.ndarray  # (K, C)
    hidden_b: np.ndarray  # (K,)
    seg_w: np.ndarray  # (K,)
    seg_b: np.ndarray  # (1,)
    det_w: np.ndarray  # (K,)
    det_b: np.ndarray  # (1,)
    proj: np.ndarray  # (E, K)

    FIELDS = ("hidden_w", "hidden_b", "seg_w", "seg_b", "det_w", "det_b", "proj")

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.FIELDS]

    def copy(self) -> "ModelParams":
        return ModelParams(*[a.copy() for a in self.arrays()])

    def validate(self) -> None:
        shapes = {
            "hidden_w": (HIDDEN_UNITS, FEATURE_COUNT),
            "hidden_b": (HIDDEN_UNITS,),
            "seg_w": (HIDDEN_UNITS,),
            "seg_b": (1,),
            "det_w": (HIDDEN_UNITS,),
            "det_b": (1,),
            "proj": (EMBED_DIM, HIDDEN_UNITS),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite parameter")
        if np.all(np.abs(self.proj).sum(axis=1) == 0):
            raise ValueError("projection head is all-zero")


def init_params(seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    k, c, e = HIDDEN_UNITS, FEATURE_COUNT, EMBED_DIM
    return ModelParams(
        hidden_w=rng.normal(0.0, 0.8, size=(k, c)),
        hidden_b=np.zeros(k),
        seg_w=rng.normal(0.0, 0.5 / np.sqrt(k), size=k),
        seg_b=np.zeros(1),
        det_w=rng.normal(0.0, 0.5 / np.sqrt(k), size=k),
        det_b=np.zeros(1),
        proj=rng.normal(0.0, 1.0 / np.sqrt(k), size=(e, k)),
    )


def zeros_like_params(p: ModelParams) -> ModelParams:
    return ModelParams(*[np.zeros_like(a) for a in p.arrays()])


def add_scaled(a: ModelParams, b: ModelParams, scale: float) -> ModelParams:
    """a + scale * b, elementwise, as a new parameter set."""
    return ModelParams(*[x + scale * y for x, y in zip(a.arrays(), b.arrays())])


def accumulate(dst: ModelParams, src: ModelParams, scale: float = 1.0) -> None:
    """In-place dst += scale * src (gradient accumulation)."""
    for x, y in zip(dst.arrays(), src.arrays()):
        x += scale * y


def params_to_vector(p: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in p.arrays()])


def vector_to_params(vec: np.ndarray, like: ModelParams) -> ModelParams:
    out = []
    offset = 0
    for a in like.arrays():
        n = a.size
        out.append(vec[offset : offset + n].reshape(a.shape).copy())
        offset += n
    return ModelParams(*out)


def ema_update(teacher: ModelParams, student: ModelParams, decay: float) -> ModelParams:
    """decay * teacher + (1 - decay) * student, per weight."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must be in [0, 1)")
    for t, s in zip(teacher.arrays(), student.arrays()):
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch: {t.shape} vs {s.shape}")
    return ModelParams(
        *[decay * t + (1.0 - decay) * s for t, s in zip(teacher.arrays(), student.arrays())]
    )


@dataclass(frozen=True)
class PolicySnapshot:
    """A tagged copy of parameters; reference snapshots are read-only."""

    params: ModelParams
    tag: str  # student | teacher | reference

    def __post_init__(self):
        if self.tag not in ("student", "teacher", "reference"):
            raise ValueError(f"unknown snapshot tag {self.tag!r}")
        object.__setattr__(self, "params", self.params.copy())
        if self.tag == "reference":
            for arr in self.params.arrays():
                arr.flags.writeable = False


# ---------------------------------------------------------------------------
# features and prompts


def rasterize_prompts(points: Points, height: int, width: int) -> np.ndarray:
    """Max-composited Gaussian bumps (sigma 3 px); empty set -> zeros."""
    points.validate(height, width)
    channel = np.zeros((height, width))
    if len(points) == 0:
        return channel
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    inv = 1.0 / (2.0 * PROMPT_SIGMA * PROMPT_SIGMA)
    for r, c in points.coords:
        d2 = (rows - r) ** 2 + (cols - c) ** 2
        np.maximum(channel, np.exp(-d2 * inv), out=channel)
    return channel


def _central_gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Central differences with reflective borders."""
    padded = np.pad(img, 1, mode="symmetric")
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) * 0.5
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) * 0.5
    return np.hypot(gy, gx)


def extract_features(image: np.ndarray, prompts: Points) -> np.ndarray:
    """Build the (C, H, W) feature stack for one image."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    smoothed = [ndimage.gaussian_filter(image, s, mode="reflect") for s in SMOOTH_SCALES]
    grads = [
        _central_gradient_magnitude(ndimage.gaussian_filter(image, s, mode="reflect"))
        for s in GRAD_SCALES
    ]
    mean5 = ndimage.uniform_filter(image, size=5, mode="reflect")
    mean5_sq = ndimage.uniform_filter(image * image, size=5, mode="reflect")
    variance = np.clip(mean5_sq - mean5 * mean5, 0.0, None)
    stack = np.stack(
        [image, *smoothed, *grads, variance, rasterize_prompts(prompts, h, w), np.ones((h, w))]
    )
    assert stack.shape[0] == FEATURE_COUNT
    return stack


# ---------------------------------------------------------------------------
# forward passes


def hidden_units(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    """Shared tanh trunk, shape (K, H, W)."""
    c, h, w = feats.shape
    pre = params.hidden_w @ feats.reshape(c, h * w) + params.hidden_b[:, None]
    return np.tanh(pre).reshape(HIDDEN_UNITS, h, w)


def seg_logits(params: ModelParams, hidden: np.ndarray) -> np.ndarray:
    return np.einsum("k,khw->hw", params.seg_w, hidden) + params.seg_b[0]


def det_logits(params: ModelParams, hidden: np.ndarray) -> np.ndarray:
    return np.einsum("k,khw->hw", params.det_w, hidden) + params.det_b[0]


def clamp_prob(raw: np.ndarray) -> np.ndarray:
    return np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)


def prob_grad_active(raw: np.ndarray) -> np.ndarray:
    """Mask of pixels where the probability clamp is inactive."""
    return (raw > PROB_EPS) & (raw < 1.0 - PROB_EPS)


def forward_seg(params: ModelParams, feats: np.ndarray, hidden: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel foreground probability, clamped to [eps, 1 - eps]."""
    params.validate()
    if hidden is None:
        hidden = hidden_units(params, feats)
    return clamp_prob(expit(seg_logits(params, hidden)))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def forward_det(params: ModelParams, feats: np.ndarray, hidden: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel nonnegative center density (softplus head)."""
    params.validate()
    if hidden is None:
        hidden = hidden_units(params, feats)
    return softplus(det_logits(params, hidden))


def embed_points(params: ModelParams, feats: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings of the pixels at integer (row, col) coords.

    A zero pre-normalization vector maps to the first basis vector.
    """
    hidden = hidden_units(params, feats)
    return embed_from_hidden(params, hidden, coords)


def embed_from_hidden(params: ModelParams, hidden: np.ndarray, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    h_at = hidden[:, coords[:, 0], coords[:, 1]]  # (K, N)
    u = params.proj @ h_at  # (E, N)
    norms = np.linalg.norm(u, axis=0)
    out = np.zeros_like(u)
    ok = norms > 0
    out[:, ok] = u[:, ok] / norms[ok]
    out[0, ~ok] = 1.0
    return out.T  # (N, E)


def embed_point(params: ModelParams, feats: np.ndarray, point: tuple[int, int]) -> np.ndarray:
    return embed_points(params, feats, np.array([point]))[0]


# ---------------------------------------------------------------------------
# backward pass


def backprop(
    params: ModelParams,
    feats: np.ndarray,
    hidden: np.ndarray,
    dseg_logit: np.ndarray | None = None,
    ddet_logit: np.ndarray | None = None,
    embed_grads: Sequence[tuple[tuple[int, int], np.ndarray]] = (),
) -> ModelParams:
    """Parameter gradients from per-pixel logit gradients and per-point
    embedding gradients.  All three heads share the tanh trunk, so their
    contributions are summed before the trunk backward step.
    """
    c, h, w = feats.shape
    n = h * w
    flat_feats = feats.reshape(c, n)
    flat_hidden = hidden.reshape(HIDDEN_UNITS, n)
    grads = zeros_like_params(params)
    dldh = np.zeros_like(flat_hidden)

    if dseg_logit is not None:
        ds = dseg_logit.reshape(n)
        grads.seg_w += flat_hidden @ ds
        grads.seg_b += ds.sum()
        dldh += params.seg_w[:, None] * ds[None, :]
    if ddet_logit is not None:
        dd = ddet_logit.reshape(n)
        grads.det_w += flat_hidden @ dd
        grads.det_b += dd.sum()
        dldh += params.det_w[:, None] * dd[None, :]

    for (r, col), g_z in embed_grads:
        idx = r * w + col
        h_at = flat_hidden[:, idx]
        u = params.proj @ h_at
        nu = np.linalg.norm(u)
        if nu == 0.0:
            continue  # flat degenerate branch: basis-vector output, no gradient
        z = u / nu
        g_u = (g_z - np.dot(g_z, z) * z) / nu
        grads.proj += np.outer(g_u, h_at)
        dldh[:, idx] += params.proj.T @ g_u

    dpre = (1.0 - flat_hidden * flat_hidden) * dldh
    grads.hidden_w += dpre @ flat_feats.T
    grads.hidden_b += dpre.sum(axis=1)
    return grads


# ---------------------------------------------------------------------------
# checkpoint format: little-endian binary with shape headers


_MAGIC = b"PSEGCKP1"


def save_params(params: ModelParams, path) -> None:
    """Bit-exact round-trip checkpoint (custom flat binary format)."""
    params.validate()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(ModelParams.FIELDS)))
        for name in ModelParams.FIELDS:
            arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
            encoded = name.encode("ascii")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("ascii")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
    missing = [n for n in ModelParams.FIELDS if n not in arrays]
    if missing:
        raise ValueError(f"{path}: checkpoint missing arrays {missing}")
    params = ModelParams(*[arrays[n] for n in ModelParams.FIELDS])
    params.validate()
    return params
