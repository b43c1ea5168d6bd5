"""Feature mask sampling and the learnable channel gate.

Four mask strategies operate on a feature block (h, w, c) or a batch of
them: ``cube`` zeroes individual elements anywhere in the block, ``spatial``
zeroes whole pixel columns across channels, ``channel`` zeroes whole
channels, and ``spatial_merge`` replaces chosen 2x2 spatial blocks by their
per-channel mean.  Masked-element counts are exact: round(ratio * count)
units, drawn by seeded permutation, never by independent coin flips.

The channel gate keeps the top-M channels ranked by a learnable score
vector.  Selection is hard in the forward pass (values are copied, so
select -> complete is an exact identity on kept channels) while gradients
are computed as if kept channels were scaled by sigmoid(score), which is
what lets the scores learn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError
from .rand import rng_from
from .tensor import Tensor, apply_op, _as_tensor

STRATEGIES = ("cube", "spatial", "channel", "spatial_merge")

MERGE_BLOCK = 2  # spatial_merge block edge


@dataclass(frozen=True)
class MaskSpec:
    """Mask strategy, masking ratio in [0, 1], and the sampling seed."""

    strategy: str
    ratio: float
    seed: int

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown mask strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not (0.0 <= self.ratio <= 1.0):
            raise ConfigError(f"mask ratio must be in [0, 1], got {self.ratio}")


def exact_count(ratio: float, count: int) -> int:
    """round(ratio * count), half rounded up, as an exact masked-unit count."""
    return int(np.floor(ratio * count + 0.5))


def _promote(F) -> tuple[Tensor, np.ndarray, bool]:
    t = _as_tensor(F)
    if t.ndim == 3:
        return t, t.data[None], True
    if t.ndim == 4:
        return t, t.data, False
    raise ShapeError(f"expected a (h,w,c) feature or a (b,h,w,c) batch, got shape {t.shape}")


def _sample_zero_mask(spec: MaskSpec, shape: tuple, sample: int) -> np.ndarray:
    """0/1 keep-mask of `shape` for one sample; seeded per (spec.seed, sample)."""
    h, w, c = shape
    rng = rng_from(spec.seed, sample)
    keep = np.ones((h, w, c))
    if spec.strategy == "cube":
        total = h * w * c
        idx = rng.permutation(total)[: exact_count(spec.ratio, total)]
        keep.reshape(-1)[idx] = 0.0
    elif spec.strategy == "spatial":
        total = h * w
        idx = rng.permutation(total)[: exact_count(spec.ratio, total)]
        keep.reshape(total, c)[idx, :] = 0.0
    elif spec.strategy == "channel":
        idx = rng.permutation(c)[: exact_count(spec.ratio, c)]
        keep[:, :, idx] = 0.0
    else:
        raise ConfigError(f"strategy {spec.strategy!r} has no zero-mask form")
    return keep


def _apply_zero_mask(F, spec: MaskSpec, op_name: str) -> Tensor:
    t, x4, squeezed = _promote(F)
    b = x4.shape[0]
    keep = np.stack([_sample_zero_mask(spec, x4.shape[1:], i) for i in range(b)])
    out = x4 * keep

    def vjp(g):
        g4 = g if g.ndim == 4 else g[None]
        gx = g4 * keep
        return (gx[0] if squeezed else gx,)

    return apply_op(op_name, (t,), out[0] if squeezed else out, vjp)


def cube_mask(F, spec: MaskSpec) -> Tensor:
    """Zero exactly round(ratio*h*w*c) elements, uniformly across the block."""
    if spec.strategy != "cube":
        raise ConfigError(f"cube_mask called with strategy {spec.strategy!r}")
    return _apply_zero_mask(F, spec, "cube_mask")


def structured_mask(F, spec: MaskSpec) -> Tensor:
    """Spatial mask (whole pixels) or channel mask (whole channels)."""
    if spec.strategy not in ("spatial", "channel"):
        raise ConfigError(f"structured_mask called with strategy {spec.strategy!r}")
    return _apply_zero_mask(F, spec, f"{spec.strategy}_mask")


def spatial_merge(F, spec: MaskSpec) -> Tensor:
    """Replace chosen 2x2 spatial blocks by their per-channel mean."""
    if spec.strategy != "spatial_merge":
        raise ConfigError(f"spatial_merge called with strategy {spec.strategy!r}")
    t, x4, squeezed = _promote(F)
    b, h, w, c = x4.shape
    if h % MERGE_BLOCK or w % MERGE_BLOCK:
        raise ShapeError(
            f"spatial_merge needs dims divisible by {MERGE_BLOCK}; {h}x{w} requires padding to "
            f"{h + (-h) % MERGE_BLOCK}x{w + (-w) % MERGE_BLOCK}"
        )
    hb, wb = h // MERGE_BLOCK, w // MERGE_BLOCK
    n_blocks = hb * wb
    k = exact_count(spec.ratio, n_blocks)
    merged = np.zeros((b, hb, wb, 1), dtype=bool)
    for i in range(b):
        idx = rng_from(spec.seed, i).permutation(n_blocks)[:k]
        merged[i].reshape(n_blocks)[idx] = True

    blocks = x4.reshape(b, hb, MERGE_BLOCK, wb, MERGE_BLOCK, c)
    means = blocks.mean(axis=(2, 4))  # (b, hb, wb, c)
    up = np.repeat(np.repeat(np.where(merged, means, 0.0), MERGE_BLOCK, axis=1), MERGE_BLOCK, axis=2)
    mask_up = np.repeat(np.repeat(merged, MERGE_BLOCK, axis=1), MERGE_BLOCK, axis=2)
    out = np.where(mask_up, up, x4)

    def vjp(g):
        g4 = g if g.ndim == 4 else g[None]
        gsum = g4.reshape(b, hb, MERGE_BLOCK, wb, MERGE_BLOCK, c).sum(axis=(2, 4))
        gmean = np.repeat(np.repeat(gsum / (MERGE_BLOCK * MERGE_BLOCK), MERGE_BLOCK, axis=1),
                          MERGE_BLOCK, axis=2)
        gx = np.where(mask_up, gmean, g4)
        return (gx[0] if squeezed else gx,)

    return apply_op("spatial_merge", (t,), out[0] if squeezed else out, vjp)


def apply_mask(F, spec: MaskSpec) -> Tensor:
    """Dispatch on the strategy; the pipeline's single entry point."""
    if spec.strategy == "cube":
        return cube_mask(F, spec)
    if spec.strategy == "spatial_merge":
        return spatial_merge(F, spec)
    return structured_mask(F, spec)


# ---------------------------------------------------------------------------
# learnable channel gate (select / complete pair)
# ---------------------------------------------------------------------------

@dataclass
class ChannelGate:
    """Learnable channel scores, keep count, and per-channel completion tokens.

    `scores` ranks channels (top `keep` survive, ties to the lower index);
    `tokens` is one learnable constant per channel used to fill dropped
    channels at completion.  With learnable=False the scores stay at their
    random initialization.
    """

    scores: Tensor  # length-N score vector (the selection probabilities)
    tokens: Tensor  # length-N completion constants
    keep: int
    learnable: bool = True

    def __post_init__(self):
        n = self.scores.size
        if self.scores.ndim != 1 or self.tokens.ndim != 1 or self.tokens.size != n:
            raise ShapeError(
                f"gate vectors must be 1-D of equal length, got {self.scores.shape} and {self.tokens.shape}"
            )
        if not (1 <= self.keep <= n):
            raise ConfigError(f"keep count must be in [1, {n}], got {self.keep}")

    @property
    def n(self) -> int:
        return self.scores.size

    def kept_channels(self) -> np.ndarray:
        """Indices of the `keep` largest scores, ties to the lower index, ascending."""
        order = np.argsort(-self.scores.data, kind="stable")
        return np.sort(order[: self.keep])


def lcmm_select(F, gate: ChannelGate) -> tuple[Tensor, np.ndarray]:
    """Keep the gate's top-M channels (ascending original order).

    Forward values are copied unchanged (hard selection); the backward pass
    treats kept channels as if they were scaled by sigmoid(score), which
    routes gradient into the score vector.
    """
    t, x4, squeezed = _promote(F)
    if x4.shape[3] != gate.n:
        raise ShapeError(f"feature has {x4.shape[3]} channels but gate expects {gate.n}")
    kept = gate.kept_channels()
    out = x4[..., kept].copy()
    s = expit(gate.scores.data[kept])

    def vjp(g):
        g4 = g if g.ndim == 4 else g[None]
        gx = np.zeros_like(x4)
        gx[..., kept] = g4 * s
        gv = np.zeros(gate.n)
        gv[kept] = (g4 * x4[..., kept]).sum(axis=(0, 1, 2)) * s * (1.0 - s)
        return (gx[0] if squeezed else gx, gv)

    y = apply_op("lcmm_select", (t, gate.scores), out[0] if squeezed else out, vjp)
    return y, kept


def lccm_complete(Y, kept: np.ndarray, gate: ChannelGate) -> Tensor:
    """Scatter kept channels back to their original slots; fill the rest with tokens.

    Kept channels pass through bit-exactly (the selection scaling is undone
    in the gradient, not in the values); every dropped channel i becomes a
    constant plane of tokens[i].
    """
    t, y4, squeezed = _promote(Y)
    kept = np.asarray(kept, dtype=np.int64)
    if kept.ndim != 1 or kept.size != y4.shape[3]:
        raise ShapeError(f"kept index count {kept.size} != input channels {y4.shape[3]}")
    if kept.size != gate.keep:
        raise ShapeError(f"kept index count {kept.size} != gate keep count {gate.keep}")
    if kept.size and (kept.min() < 0 or kept.max() >= gate.n):
        raise ShapeError(f"kept indices out of range [0, {gate.n})")
    if np.unique(kept).size != kept.size:
        raise ShapeError("kept indices contain duplicates")

    b, h, w, _ = y4.shape
    dropped = np.setdiff1d(np.arange(gate.n), kept)
    out = np.empty((b, h, w, gate.n))
    out[..., kept] = y4
    out[..., dropped] = gate.tokens.data[dropped]
    s = expit(gate.scores.data[kept])

    def vjp(g):
        g4 = g if g.ndim == 4 else g[None]
        gy = g4[..., kept] / s
        gv = np.zeros(gate.n)
        # d(1/s)/dv = -(1-s)/s, with s = sigmoid(score)
        gv[kept] = (g4[..., kept] * y4).sum(axis=(0, 1, 2)) * (-(1.0 - s) / s)
        gtok = np.zeros(gate.n)
        gtok[dropped] = g4[..., dropped].sum(axis=(0, 1, 2))
        return (gy[0] if squeezed else gy, gv, gtok)

    full = apply_op("lccm_complete", (t, gate.scores, gate.tokens),
                    out[0] if squeezed else out, vjp)
    return full
