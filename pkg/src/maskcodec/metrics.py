"""Distortion metrics, RD curves, and Bjontegaard-style comparisons.

PSNR and MS-SSIM operate on [0, 1] images.  BD-rate fits a cubic polynomial
of log10(bpp) against PSNR for each curve and integrates the fitted
difference over the shared PSNR interval; rate savings evaluates the same
fits on a quality grid.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import tensor as T
from .errors import ShapeError

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WINDOW = 11
MSSSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2

RD_COLUMNS = ("image", "bpp", "psnr", "msssim", "lambda", "stage")


def psnr(x: np.ndarray, xhat: np.ndarray) -> float:
    """10*log10(1/MSE) for peak 1.0; identical images give math.inf."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"psnr shape mismatch: {x.shape} vs {xhat.shape}")
    mse = float(np.mean((x - xhat) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gauss_kernel1d() -> np.ndarray:
    r = np.arange(MSSSIM_WINDOW) - MSSSIM_WINDOW // 2
    g = np.exp(-(r ** 2) / (2.0 * MSSSIM_SIGMA ** 2))
    return g / g.sum()


def _blur_valid(img: np.ndarray) -> np.ndarray:
    """Separable 11x11 Gaussian, valid region only; img is (h, w, c)."""
    g = _gauss_kernel1d()
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    m = MSSSIM_WINDOW // 2
    return out[m:-m, m:-m]


def _ssim_terms(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean luminance term and mean contrast-structure term over the valid region."""
    mu_a = _blur_valid(a)
    mu_b = _blur_valid(b)
    var_a = _blur_valid(a * a) - mu_a * mu_a
    var_b = _blur_valid(b * b) - mu_b * mu_b
    cov = _blur_valid(a * b) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + _C1) / (mu_a ** 2 + mu_b ** 2 + _C1)
    cs = (2 * cov + _C2) / (var_a + var_b + _C2)
    return float(np.maximum(lum, 0.0).mean()), float(np.maximum(cs, 0.0).mean())


def _num_scales(h: int, w: int) -> int:
    n = 0
    m = min(h, w)
    while m >= MSSSIM_WINDOW and n < len(MSSSIM_WEIGHTS):
        n += 1
        m //= 2
    return n


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    v = img[:h, :w]
    return v.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def ms_ssim(x: np.ndarray, xhat: np.ndarray) -> float:
    """Multi-scale SSIM; up to 5 scales, fewer (renormalized) on small images."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"ms_ssim shape mismatch: {x.shape} vs {xhat.shape}")
    if x.ndim == 2:
        x, xhat = x[..., None], xhat[..., None]
    h, w = x.shape[:2]
    if min(h, w) < MSSSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} smaller than the {MSSSIM_WINDOW}-tap window")
    scales = _num_scales(h, w)
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    if scales < len(MSSSIM_WEIGHTS):
        weights = weights / weights.sum()

    a, b = x, xhat
    result = 1.0
    for s in range(scales):
        lum, cs = _ssim_terms(a, b)
        if s < scales - 1:
            result *= cs ** weights[s]
            a, b = _downsample2(a), _downsample2(b)
        else:
            result *= (lum * cs) ** weights[s]
    return float(result)


# ---------------------------------------------------------------------------
# differentiable MS-SSIM (training loss)
# ---------------------------------------------------------------------------

def _blur_tensor(x: T.Tensor, c: int) -> T.Tensor:
    g = _gauss_kernel1d()
    win = np.outer(g, g)
    kernel = np.zeros((MSSSIM_WINDOW, MSSSIM_WINDOW, c, c))
    for i in range(c):
        kernel[:, :, i, i] = win
    return T.conv2d(x, T.Tensor(kernel), stride=1, pad=0)


def ms_ssim_tensor(x, xhat) -> T.Tensor:
    """Tape-op MS-SSIM between image batches; scalar Tensor in [0, 1]."""
    x, xhat = T._as_tensor(x), T._as_tensor(xhat)
    h, w, c = x.shape[-3], x.shape[-2], x.shape[-1]
    if min(h, w) < MSSSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} smaller than the {MSSSIM_WINDOW}-tap window")
    scales = _num_scales(h, w)
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    if scales < len(MSSSIM_WEIGHTS):
        weights = weights / weights.sum()

    a, b = x, xhat
    result = None
    for s in range(scales):
        mu_a = _blur_tensor(a, c)
        mu_b = _blur_tensor(b, c)
        var_a = T.sub(_blur_tensor(T.square(a), c), T.square(mu_a))
        var_b = T.sub(_blur_tensor(T.square(b), c), T.square(mu_b))
        cov = T.sub(_blur_tensor(T.mul(a, b), c), T.mul(mu_a, mu_b))
        cs_map = T.div(T.add(T.mul(cov, 2.0), _C2), T.add(T.add(var_a, var_b), _C2))
        cs = T.clamp_min(T.tmean(cs_map), 1e-6)
        if s < scales - 1:
            term = T.powc(cs, weights[s])
            a, b = T.avg_pool2(_crop_even(a)), T.avg_pool2(_crop_even(b))
        else:
            lum_map = T.div(T.add(T.mul(T.mul(mu_a, mu_b), 2.0), _C1),
                            T.add(T.add(T.square(mu_a), T.square(mu_b)), _C1))
            lum = T.clamp_min(T.tmean(lum_map), 1e-6)
            term = T.powc(T.mul(lum, cs), weights[s])
        result = term if result is None else T.mul(result, term)
    return result


def _crop_even(x: T.Tensor) -> T.Tensor:
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 == 0 and w % 2 == 0:
        return x
    he, we = h // 2 * 2, w // 2 * 2

    def vjp(g):
        full = np.zeros(x.shape)
        full[..., :he, :we, :] = g
        return (full,)

    return T.apply_op("crop_even", (x,), x.data[..., :he, :we, :].copy(), vjp)


# ---------------------------------------------------------------------------
# RD curves and Bjontegaard comparisons
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    msssim: float = float("nan")


class RDCurve:
    """>= 4 RD points, sorted by bpp; psnr should be non-decreasing (warned)."""

    def __init__(self, points):
        pts = sorted(points, key=lambda p: p.bpp)
        if len(pts) < 4:
            raise ValueError(f"an RD curve needs at least 4 points, got {len(pts)}")
        bpps = [p.bpp for p in pts]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ValueError("RD curve bpp values must be strictly increasing")
        if bpps[0] <= 0 or not all(np.isfinite(b) for b in bpps):
            raise ValueError("RD curve bpp values must be positive and finite")
        psnrs = [p.psnr for p in pts]
        if any(q2 < q1 for q1, q2 in zip(psnrs, psnrs[1:])):
            warnings.warn("RD curve psnr is not non-decreasing in bpp", stacklevel=2)
        self.points = pts

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


def delta_bpp(bpp: float, baseline: float) -> float:
    """(bpp - baseline) / baseline * 100."""
    if baseline <= 0:
        raise ValueError(f"baseline bpp must be positive, got {baseline}")
    return (bpp - baseline) / baseline * 100.0


def _lograte_fit(curve: RDCurve) -> np.ndarray:
    return np.polyfit(curve.psnr, np.log10(curve.bpp), 3)


def _overlap(test: RDCurve, anchor: RDCurve) -> tuple[float, float]:
    lo = max(test.psnr.min(), anchor.psnr.min())
    hi = min(test.psnr.max(), anchor.psnr.max())
    if hi <= lo:
        raise ValueError(
            f"no PSNR overlap between curves: [{test.psnr.min():.2f}, {test.psnr.max():.2f}] "
            f"vs [{anchor.psnr.min():.2f}, {anchor.psnr.max():.2f}]"
        )
    return lo, hi


def bd_rate(test: RDCurve, anchor: RDCurve) -> float:
    """Average rate difference of `test` over `anchor` in percent (negative = savings)."""
    fit_t = _lograte_fit(test)
    fit_a = _lograte_fit(anchor)
    lo, hi = _overlap(test, anchor)
    int_t = np.polyint(fit_t)
    int_a = np.polyint(fit_a)
    avg_diff = ((np.polyval(int_t, hi) - np.polyval(int_t, lo))
                - (np.polyval(int_a, hi) - np.polyval(int_a, lo))) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


def rate_savings_curve(test: RDCurve, anchor: RDCurve, quality_grid) -> list:
    """(psnr, savings %) points; grid entries outside the overlap are dropped."""
    fit_t = _lograte_fit(test)
    fit_a = _lograte_fit(anchor)
    lo, hi = _overlap(test, anchor)
    out = []
    for q in quality_grid:
        if q < lo or q > hi:
            warnings.warn(f"quality {q} outside fitted overlap [{lo:.2f}, {hi:.2f}]; dropped",
                          stacklevel=2)
            continue
        ratio = 10.0 ** (np.polyval(fit_t, q) - np.polyval(fit_a, q))
        out.append((float(q), float((1.0 - ratio) * 100.0)))
    return out


# ---------------------------------------------------------------------------
# RD CSV io (columns: image,bpp,psnr,msssim,lambda,stage)
# ---------------------------------------------------------------------------

def write_rd_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RD_COLUMNS)
        for row in rows:
            w.writerow([row[c] for c in RD_COLUMNS])


def read_rd_csv(path) -> list:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for raw in reader:
            rows.append({
                "image": raw["image"],
                "bpp": float(raw["bpp"]),
                "psnr": float(raw["psnr"]),
                "msssim": float(raw["msssim"]),
                "lambda": float(raw["lambda"]),
                "stage": raw["stage"],
            })
    return rows


def curve_from_rd_rows(rows) -> RDCurve:
    """Average bpp/psnr per lambda, one RD point per distinct lambda."""
    groups: dict[float, list] = {}
    for row in rows:
        groups.setdefault(row["lambda"], []).append(row)
    points = []
    for lam in sorted(groups):
        g = groups[lam]
        points.append(RDPoint(
            bpp=float(np.mean([r["bpp"] for r in g])),
            psnr=float(np.mean([r["psnr"] for r in g])),
            msssim=float(np.mean([r["msssim"] for r in g])),
        ))
    return RDCurve(points)
