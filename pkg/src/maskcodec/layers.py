"""Analysis/synthesis transforms, hyper transforms, and the GDN nonlinearity.

The convolutional path is deliberately small: the analysis transform stacks
stride-2 conv blocks, each followed by GDN; the synthesis transform mirrors
it with transposed convolutions and IGDN.  The hyper pair uses stride-2
convs with leaky ReLU and emits the mean/scale planes for the main latent.
Block count and widths are configuration, not architecture.

All forwards are pure functions of (input, params); with a fixed parameter
dict they are bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .entropy import SIGMA_MIN
from .errors import NumericsError, ShapeError
from .tensor import Tensor

BETA_MIN = 1e-6
GAMMA_INIT = 0.1


@dataclass
class GdnParams:
    """Per-channel beta floor and the c x c channel-mixing gamma."""

    beta: Tensor  # (c,), >= BETA_MIN
    gamma: Tensor  # (c, c), >= 0

    def validate(self, c: int) -> None:
        if self.beta.shape != (c,) or self.gamma.shape != (c, c):
            raise ShapeError(
                f"GDN params for {c} channels need beta (c,) and gamma (c,c); "
                f"got {self.beta.shape} and {self.gamma.shape}"
            )
        if np.any(self.beta.data < BETA_MIN):
            raise NumericsError(f"GDN beta below {BETA_MIN}: invariant breach")
        if np.any(self.gamma.data < 0.0):
            raise NumericsError("GDN gamma negative: invariant breach")


def gdn(x, p: GdnParams) -> Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2), per spatial position."""
    x = T._as_tensor(x)
    c = x.shape[-1]
    p.validate(c)
    flat = T.reshape(x, (-1, c))
    norm = T.add(T.matmul(T.square(flat), T.transpose2d(p.gamma)), p.beta)
    return T.reshape(T.div(flat, T.sqrt(norm)), x.shape)


def igdn(y, p: GdnParams) -> Tensor:
    """One-shot multiplicative inverse: x_i = y_i * sqrt(beta_i + sum_j gamma_ij * y_j^2)."""
    y = T._as_tensor(y)
    c = y.shape[-1]
    p.validate(c)
    flat = T.reshape(y, (-1, c))
    norm = T.add(T.matmul(T.square(flat), T.transpose2d(p.gamma)), p.beta)
    return T.reshape(T.mul(flat, T.sqrt(norm)), y.shape)


@dataclass(frozen=True)
class TransformConfig:
    """Widths and depths of the four transforms.

    The analysis transform has len(widths) + 1 stride-2 blocks ending at
    `latent_channels`; the hyper pair has len(hyper_widths) + 1 stride-2
    layers ending at `hyper_channels`.
    """

    latent_channels: int = 64
    widths: tuple = (32, 64)
    hyper_channels: int = 32
    hyper_widths: tuple = (48,)
    kernel: int = 3

    @property
    def num_blocks(self) -> int:
        return len(self.widths) + 1

    @property
    def downsample(self) -> int:
        return 2 ** self.num_blocks

    @property
    def hyper_blocks(self) -> int:
        return len(self.hyper_widths) + 1

    def latent_hw(self, h: int, w: int) -> tuple[int, int]:
        if h < self.downsample or w < self.downsample:
            raise ShapeError(
                f"image {h}x{w} smaller than one downsampling block ({self.downsample})"
            )
        if h % self.downsample or w % self.downsample:
            raise ShapeError(
                f"image dims {h}x{w} not divisible by downsampling factor {self.downsample}"
            )
        return h // self.downsample, w // self.downsample

    def hyper_hw(self, hl: int, wl: int) -> tuple[int, int]:
        h, w = hl, wl
        for _ in range(self.hyper_blocks):
            # stride-2 conv with pad k//2: extent n -> ceil(n/2)
            h = (h + 2 * (self.kernel // 2) - self.kernel) // 2 + 1
            w = (w + 2 * (self.kernel // 2) - self.kernel) // 2 + 1
        return h, w


def _conv_init(rng: np.random.Generator, k: int, cin: int, cout: int) -> Tensor:
    std = np.sqrt(2.0 / (k * k * cin))
    return Tensor(rng.normal(0.0, std, size=(k, k, cin, cout)), requires_grad=True)


def _deconv_init(rng: np.random.Generator, k: int, cout: int, cin: int) -> Tensor:
    std = np.sqrt(2.0 / (k * k * cin))
    return Tensor(rng.normal(0.0, std, size=(k, k, cout, cin)), requires_grad=True)


def _gdn_init(c: int) -> dict:
    return {
        "beta": Tensor(np.ones(c), requires_grad=True),
        "gamma": Tensor(GAMMA_INIT * np.eye(c), requires_grad=True),
    }


def init_transform_params(cfg: TransformConfig, keep: int, rng: np.random.Generator) -> dict:
    """Parameter dict for all four transforms; `keep` is the gated channel count."""
    k = cfg.kernel
    params: dict[str, Tensor] = {}

    chain = (3,) + tuple(cfg.widths) + (cfg.latent_channels,)
    for i in range(cfg.num_blocks):
        params[f"analysis.conv{i}.w"] = _conv_init(rng, k, chain[i], chain[i + 1])
        params[f"analysis.conv{i}.b"] = Tensor(np.zeros(chain[i + 1]), requires_grad=True)
        g = _gdn_init(chain[i + 1])
        params[f"analysis.gdn{i}.beta"] = g["beta"]
        params[f"analysis.gdn{i}.gamma"] = g["gamma"]

    rchain = (cfg.latent_channels,) + tuple(reversed(cfg.widths)) + (3,)
    for i in range(cfg.num_blocks):
        params[f"synthesis.deconv{i}.w"] = _deconv_init(rng, k, rchain[i + 1], rchain[i])
        params[f"synthesis.deconv{i}.b"] = Tensor(np.zeros(rchain[i + 1]), requires_grad=True)
        if i < cfg.num_blocks - 1:
            g = _gdn_init(rchain[i + 1])
            params[f"synthesis.igdn{i}.beta"] = g["beta"]
            params[f"synthesis.igdn{i}.gamma"] = g["gamma"]

    hchain = (keep,) + tuple(cfg.hyper_widths) + (cfg.hyper_channels,)
    for i in range(cfg.hyper_blocks):
        params[f"hyper_a.conv{i}.w"] = _conv_init(rng, k, hchain[i], hchain[i + 1])
        params[f"hyper_a.conv{i}.b"] = Tensor(np.zeros(hchain[i + 1]), requires_grad=True)

    shchain = (cfg.hyper_channels,) + tuple(reversed(cfg.hyper_widths)) + (2 * keep,)
    for i in range(cfg.hyper_blocks):
        params[f"hyper_s.deconv{i}.w"] = _deconv_init(rng, k, shchain[i + 1], shchain[i])
        params[f"hyper_s.deconv{i}.b"] = Tensor(np.zeros(shchain[i + 1]), requires_grad=True)

    return params


def _gdn_of(params: dict, prefix: str) -> GdnParams:
    return GdnParams(beta=params[f"{prefix}.beta"], gamma=params[f"{prefix}.gamma"])


def analysis_forward(x, cfg: TransformConfig, params: dict) -> Tensor:
    """Image (in [0,1]) to the latent feature block (h/s, w/s, N)."""
    x = T._as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    cfg.latent_hw(h, w)  # validates divisibility and minimum size
    k, pad = cfg.kernel, cfg.kernel // 2
    out = x
    for i in range(cfg.num_blocks):
        out = T.conv2d(out, params[f"analysis.conv{i}.w"], stride=2, pad=pad)
        out = T.add(out, params[f"analysis.conv{i}.b"])
        out = gdn(out, _gdn_of(params, f"analysis.gdn{i}"))
    return out


def synthesis_forward(y, cfg: TransformConfig, params: dict, out_hw: tuple[int, int],
                      clamp: bool = False) -> Tensor:
    """Completed latent (full channel count) back to image space.

    `out_hw` is the padded image size; `clamp` applies the [0, 1] output
    clamp used at evaluation time.
    """
    y = T._as_tensor(y)
    if y.shape[-1] != cfg.latent_channels:
        raise ShapeError(
            f"synthesis expects the completed latent with {cfg.latent_channels} channels, "
            f"got {y.shape[-1]} (was channel completion skipped?)"
        )
    k, pad = cfg.kernel, cfg.kernel // 2
    H, W = out_hw
    out = y
    for i in range(cfg.num_blocks):
        th = H // 2 ** (cfg.num_blocks - 1 - i)
        tw = W // 2 ** (cfg.num_blocks - 1 - i)
        ch, cw = out.shape[-3], out.shape[-2]
        op = (th - ((ch - 1) * 2 - 2 * pad + k), tw - ((cw - 1) * 2 - 2 * pad + k))
        out = T.conv2d_transpose(out, params[f"synthesis.deconv{i}.w"], stride=2, pad=pad,
                                 out_pad=op)
        out = T.add(out, params[f"synthesis.deconv{i}.b"])
        if i < cfg.num_blocks - 1:
            out = igdn(out, _gdn_of(params, f"synthesis.igdn{i}"))
    if clamp:
        out = Tensor(np.clip(out.data, 0.0, 1.0))
    return out


def hyper_analysis_forward(y, cfg: TransformConfig, params: dict) -> Tensor:
    """Gated latent to the hyper latent z."""
    y = T._as_tensor(y)
    k, pad = cfg.kernel, cfg.kernel // 2
    out = y
    for i in range(cfg.hyper_blocks):
        out = T.conv2d(out, params[f"hyper_a.conv{i}.w"], stride=2, pad=pad)
        out = T.add(out, params[f"hyper_a.conv{i}.b"])
        if i < cfg.hyper_blocks - 1:
            out = T.leaky_relu(out)
    return out


def hyper_synthesis_forward(zhat, cfg: TransformConfig, params: dict,
                            out_hw: tuple[int, int]) -> tuple[Tensor, Tensor]:
    """Quantized hyper latent to (mu, sigma) planes of the gated latent shape.

    sigma = SIGMA_MIN + softplus(raw), so sigma >= SIGMA_MIN by construction.
    """
    zhat = T._as_tensor(zhat)
    k, pad = cfg.kernel, cfg.kernel // 2
    H, W = out_hw
    # spatial targets walking back up the hyper chain
    targets = [(H, W)]
    for _ in range(cfg.hyper_blocks - 1):
        h, w = targets[-1]
        targets.append(((h + 2 * pad - k) // 2 + 1, (w + 2 * pad - k) // 2 + 1))
    targets = targets[::-1]

    out = zhat
    for i in range(cfg.hyper_blocks):
        th, tw = targets[i]
        ch, cw = out.shape[-3], out.shape[-2]
        op = (th - ((ch - 1) * 2 - 2 * pad + k), tw - ((cw - 1) * 2 - 2 * pad + k))
        out = T.conv2d_transpose(out, params[f"hyper_s.deconv{i}.w"], stride=2, pad=pad,
                                 out_pad=op)
        out = T.add(out, params[f"hyper_s.deconv{i}.b"])
        if i < cfg.hyper_blocks - 1:
            out = T.leaky_relu(out)
    keep = out.shape[-1] // 2
    mu = T.slice_channels(out, 0, keep)
    sigma = T.add(T.softplus(T.slice_channels(out, keep, 2 * keep)), SIGMA_MIN)
    return mu, sigma


def project_gdn(params: dict) -> dict:
    """Clip GDN betas to >= BETA_MIN and gammas to >= 0 (post-optimizer-step)."""
    out = dict(params)
    for name, t in params.items():
        if name.endswith(".beta"):
            out[name] = Tensor(np.maximum(t.data, BETA_MIN), requires_grad=t.requires_grad)
        elif name.endswith(".gamma"):
            out[name] = Tensor(np.maximum(t.data, 0.0), requires_grad=t.requires_grad)
    return out
