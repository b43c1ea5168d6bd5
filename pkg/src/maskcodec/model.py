"""Full codec model: parameter state, training forward, and checkpointing.

The forward graph runs encoder -> (cube mask, pretraining only) -> channel
selection -> hyper path -> rate terms -> channel completion -> decoder.
Rates are estimated on noise-perturbed latents; the decoder input uses
straight-through rounding, matching how evaluation quantizes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import entropy as E
from . import layers as L
from . import tensor as T
from .errors import ConfigError, DataError, NumericsError
from .masking import ChannelGate, MaskSpec, apply_mask, lccm_complete, lcmm_select
from .rand import derive_seed, rng_from
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MKCK"
CHECKPOINT_VERSION = 1

PRIOR_SCALE_FLOOR = 1e-3


@dataclass(frozen=True)
class CodecConfig:
    """Everything needed to rebuild the parameter skeleton."""

    transform: L.TransformConfig = field(default_factory=L.TransformConfig)
    keep_ratio: float = 0.75
    gate_learnable: bool = True
    init_seed: int = 0

    @property
    def keep(self) -> int:
        m = int(np.floor(self.keep_ratio * self.transform.latent_channels + 0.5))
        return max(1, min(m, self.transform.latent_channels))

    def to_kv(self) -> dict:
        t = self.transform
        return {
            "model.latent_channels": t.latent_channels,
            "model.widths": ",".join(str(w) for w in t.widths),
            "model.hyper_channels": t.hyper_channels,
            "model.hyper_widths": ",".join(str(w) for w in t.hyper_widths),
            "model.kernel": t.kernel,
            "model.seed": self.init_seed,
            "gate.keep_ratio": self.keep_ratio,
            "gate.learnable": self.gate_learnable,
        }

    @staticmethod
    def from_kv(kv: dict) -> "CodecConfig":
        def ints(s):
            return tuple(int(v) for v in str(s).split(",") if v != "")

        transform = L.TransformConfig(
            latent_channels=int(kv["model.latent_channels"]),
            widths=ints(kv["model.widths"]),
            hyper_channels=int(kv["model.hyper_channels"]),
            hyper_widths=ints(kv["model.hyper_widths"]),
            kernel=int(kv["model.kernel"]),
        )
        return CodecConfig(
            transform=transform,
            keep_ratio=float(kv["gate.keep_ratio"]),
            gate_learnable=str(kv["gate.learnable"]).lower() in ("true", "1"),
            init_seed=int(kv["model.seed"]),
        )


@dataclass
class ModelState:
    """Parameter dict plus the config echo; immutable parameters, replaceable dict."""

    config: CodecConfig
    params: dict
    trained_stage: str = "init"  # init | pretrain | finetune
    train_echo: dict = field(default_factory=dict)  # lambda, loss type, ...

    @property
    def gate(self) -> ChannelGate:
        return ChannelGate(
            scores=self.params["gate.scores"],
            tokens=self.params["gate.tokens"],
            keep=self.config.keep,
            learnable=self.config.gate_learnable,
        )

    @property
    def prior(self) -> E.FactorizedPrior:
        loc = self.params["prior.loc"].data
        scale = PRIOR_SCALE_FLOOR + np.logaddexp(0.0, self.params["prior.raw_scale"].data)
        return E.FactorizedPrior(loc=loc.copy(), scale=scale)

    def with_params(self, params: dict, stage: str | None = None) -> "ModelState":
        return ModelState(config=self.config, params=params,
                          trained_stage=stage or self.trained_stage,
                          train_echo=dict(self.train_echo))

    def trainable_names(self) -> list:
        names = sorted(self.params)
        if not self.config.gate_learnable:
            names.remove("gate.scores")
        return names


def init_model(config: CodecConfig) -> ModelState:
    """Seeded parameter initialization; deterministic per config."""
    rng = rng_from(config.init_seed)
    params = L.init_transform_params(config.transform, config.keep, rng)
    n = config.transform.latent_channels
    params["gate.scores"] = Tensor(rng.normal(0.0, 0.5, size=n), requires_grad=True)
    params["gate.tokens"] = Tensor(np.zeros(n), requires_grad=True)
    cz = config.transform.hyper_channels
    params["prior.loc"] = Tensor(np.zeros(cz), requires_grad=True)
    params["prior.raw_scale"] = Tensor(np.full(cz, 1.0), requires_grad=True)
    return ModelState(config=config, params=params)


@dataclass
class TrainStepOutput:
    loss: Tensor
    bpp: Tensor
    distortion: Tensor
    xhat: Tensor
    bits_y: Tensor
    bits_z: Tensor


def forward_train(x_batch, state: ModelState, *, lam: float, stage: str,
                  mask: MaskSpec | None, loss_type: str = "mse",
                  step_seed: int = 0) -> TrainStepOutput:
    """One rate-distortion forward pass under the active graph.

    In the pretraining stage the cube-mask (or ablation strategy) node is
    sampled fresh per step; in finetuning no mask node is recorded at all.
    """
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    if stage == "pretrain" and mask is None:
        raise ConfigError("pretraining requires a mask spec")
    if stage == "finetune" and mask is not None:
        raise ConfigError("finetuning must run without the mask module")

    cfg = state.config.transform
    x = T._as_tensor(x_batch)
    num_pixels = x.shape[0] * x.shape[1] * x.shape[2] if x.ndim == 4 else x.shape[0] * x.shape[1]

    y = L.analysis_forward(x, cfg, state.params)
    if stage == "pretrain":
        y = apply_mask(y, mask)

    gate = state.gate
    y_sel, kept = lcmm_select(y, gate)

    z = L.hyper_analysis_forward(y_sel, cfg, state.params)
    z_noisy = T.add(z, Tensor(E.train_perturb(np.zeros(z.shape), derive_seed(step_seed, 2))))
    z_rounded = T.ste_round(z)
    hl, wl = (y_sel.shape[-3], y_sel.shape[-2])
    mu, sigma = L.hyper_synthesis_forward(z_rounded, cfg, state.params, (hl, wl))

    y_noisy = T.add(y_sel, Tensor(E.train_perturb(np.zeros(y_sel.shape), derive_seed(step_seed, 1))))
    y_rounded = T.ste_round(y_sel)

    bits_y = E.gaussian_bits(y_noisy, mu, sigma)
    loc = state.params["prior.loc"]
    scale = T.add(T.softplus(state.params["prior.raw_scale"]), PRIOR_SCALE_FLOOR)
    bits_z = E.logistic_bits(z_noisy, loc, scale)
    bpp = T.mul(T.add(bits_y, bits_z), 1.0 / num_pixels)

    full = lccm_complete(y_rounded, kept, gate)
    pad_hw = (x.shape[-3], x.shape[-2])
    xhat = L.synthesis_forward(full, cfg, state.params, pad_hw, clamp=False)

    if loss_type == "mse":
        distortion = T.tmean(T.square(T.sub(x, xhat)))
    elif loss_type == "msssim":
        from .metrics import ms_ssim_tensor
        distortion = T.sub(1.0, ms_ssim_tensor(x, xhat))
    else:
        raise ConfigError(f"unknown loss type {loss_type!r}")

    loss = T.add(bpp, T.mul(distortion, lam))
    if not np.isfinite(loss.data):
        raise NumericsError("non-finite training loss")
    return TrainStepOutput(loss=loss, bpp=bpp, distortion=distortion, xhat=xhat,
                           bits_y=bits_y, bits_z=bits_z)


@dataclass
class EvalForward:
    """Deterministic eval-side latents and entropy parameters."""

    y_sel: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    kept: np.ndarray


def forward_eval(x_padded: np.ndarray, state: ModelState) -> EvalForward:
    """Quantized latents and (mu, sigma) exactly as the coder will see them."""
    cfg = state.config.transform
    y = L.analysis_forward(Tensor(x_padded), cfg, state.params)
    y_sel, kept = lcmm_select(y, state.gate)
    z = L.hyper_analysis_forward(y_sel, cfg, state.params)
    z_hat = E.quantize(z.data)
    mu, sigma = L.hyper_synthesis_forward(Tensor(z_hat.astype(np.float64)), cfg,
                                          state.params, (y_sel.shape[0], y_sel.shape[1]))
    y_hat = E.quantize(y_sel.data)
    return EvalForward(y_sel=y_sel.data, y_hat=y_hat, z_hat=z_hat,
                       mu=mu.data, sigma=sigma.data, kept=kept)


def reconstruct(y_hat: np.ndarray, kept: np.ndarray, state: ModelState,
                padded_hw: tuple[int, int]) -> np.ndarray:
    """Decoder-side image from quantized kept-channel symbols; clamped to [0, 1]."""
    gate = state.gate
    full = lccm_complete(Tensor(y_hat.astype(np.float64)), kept, gate)
    xhat = L.synthesis_forward(full, state.config.transform, state.params, padded_hw,
                               clamp=True)
    return xhat.data


# ---------------------------------------------------------------------------
# checkpoint io: versioned header + named parameter blocks
# ---------------------------------------------------------------------------

def save_checkpoint(state: ModelState, path) -> None:
    """Versioned binary checkpoint; reload reproduces forwards bit-exactly."""
    kv = dict(state.config.to_kv())
    kv["stage"] = state.trained_stage
    for k, v in state.train_echo.items():
        kv[f"echo.{k}"] = v
    config_text = "\n".join(f"{k}={kv[k]}" for k in sorted(kv)).encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack(">B", CHECKPOINT_VERSION))
    buf.write(struct.pack(">I", len(config_text)))
    buf.write(config_text)
    names = sorted(state.params)
    buf.write(struct.pack(">I", len(names)))
    for name in names:
        arr = state.params[name].data
        nb = name.encode("utf-8")
        buf.write(struct.pack(">H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack(">B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack(">I", d))
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise DataError(f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack(">B", _read_exact(f, 1))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack(">I", _read_exact(f, 4))
        kv = {}
        for line in _read_exact(f, clen).decode("utf-8").splitlines():
            if line:
                k, _, v = line.partition("=")
                kv[k] = v
        config = CodecConfig.from_kv(kv)

        (count,) = struct.unpack(">I", _read_exact(f, 4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack(">H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode("utf-8")
            (ndim,) = struct.unpack(">B", _read_exact(f, 1))
            shape = tuple(struct.unpack(">I", _read_exact(f, 4))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 8 * n_items)
            params[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy(),
                                  requires_grad=True)

    expected = init_model(config)
    exp_params = expected.params
    missing = sorted(set(exp_params) - set(params))
    surplus = sorted(set(params) - set(exp_params))
    if missing or surplus:
        raise DataError(
            f"checkpoint parameter names mismatch: missing {missing}, unexpected {surplus}"
        )
    for name in exp_params:
        if params[name].shape != exp_params[name].shape:
            raise DataError(
                f"checkpoint block {name!r} has shape {params[name].shape}, "
                f"expected {exp_params[name].shape}"
            )

    echo = {k[len("echo."):]: v for k, v in kv.items() if k.startswith("echo.")}
    return ModelState(config=config, params=params,
                      trained_stage=kv.get("stage", "init"), train_echo=echo)
