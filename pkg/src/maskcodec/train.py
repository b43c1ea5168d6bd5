"""Two-stage training: masked pretraining, then finetuning without the mask.

The optimizer is Adam with decoupled weight decay (decay 0 by default).
Learning-rate schedules are step decays at fractional epoch milestones:
pretraining starts at 1e-4 and multiplies by 0.8 at 1/3 and 2/3 of the run;
finetuning starts at 8e-5 and halves at 20%, 40%, and 80%.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericsError
from .layers import project_gdn
from .masking import MaskSpec
from .model import ModelState, TrainStepOutput, forward_train
from .rand import derive_seed
from .tensor import Graph, Tensor, backward

STAGES = ("pretrain", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    lam: float = 0.3
    loss: str = "mse"
    epochs: int = 30
    batch_size: int = 8
    crop: int = 64
    lr: float = 1e-4
    lr_milestones: tuple = (1 / 3, 2 / 3)  # fractions of the epoch count
    lr_decay: float = 0.8
    mask_strategy: str = "cube"
    mask_ratio: float = 0.5
    seed: int = 0
    weight_decay: float = 0.0
    augment: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.loss not in ("mse", "msssim"):
            raise ConfigError(f"loss must be mse or msssim, got {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index; decays take effect at the milestone epoch."""
        steps = sum(1 for m in self.lr_milestones if epoch >= round(m * self.epochs))
        return self.lr * self.lr_decay ** steps


def pretrain_defaults(**overrides) -> TrainConfig:
    return replace(TrainConfig(stage="pretrain", lam=0.3, epochs=30, lr=1e-4,
                               lr_milestones=(1 / 3, 2 / 3), lr_decay=0.8), **overrides)


def finetune_defaults(**overrides) -> TrainConfig:
    return replace(TrainConfig(stage="finetune", lam=0.01, epochs=100, lr=8e-5,
                               lr_milestones=(0.2, 0.4, 0.8), lr_decay=0.5), **overrides)


class AdamW:
    """Decoupled-weight-decay adaptive moments over a named parameter dict."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, names=None) -> dict:
        """Functional update: returns a new parameter dict, originals untouched."""
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        out = dict(params)
        for name in (names if names is not None else sorted(params)):
            p = params[name]
            g = grads.get(p)
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = self.beta1 * m + (1 - self.beta1) * g if m is not None else (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g if v is not None else (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            new = p.data - lr * update - lr * self.weight_decay * p.data
            out[name] = Tensor(new, requires_grad=True)
        return out


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    bpp: float
    distortion: float
    lr: float


@dataclass
class TrainResult:
    state: ModelState
    history: list = field(default_factory=list)


def train_stage(data, state: ModelState, cfg: TrainConfig, *, max_steps: int | None = None,
                log=None) -> TrainResult:
    """Run one stage over `data` (anything with a make_batch method).

    Finetuning refuses to start from an untrained model: it needs the
    pretraining checkpoint's weights.
    """
    if cfg.stage == "finetune" and state.trained_stage == "init":
        raise ConfigError("finetune requested but the model has no pretrain checkpoint")

    opt = AdamW(weight_decay=cfg.weight_decay)
    trainable = state.trainable_names()
    params = state.params
    history: list[StepRecord] = []
    steps_per_epoch = max(1, int(np.ceil(data.size() / cfg.batch_size)))
    mask = None
    done = 0

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        for step in range(steps_per_epoch):
            batch = data.make_batch(cfg.crop, cfg.batch_size, cfg.seed, epoch, step,
                                    augment=cfg.augment)
            if cfg.stage == "pretrain":
                mask = MaskSpec(strategy=cfg.mask_strategy, ratio=cfg.mask_ratio,
                                seed=derive_seed(cfg.seed, epoch, step, 7))
            work = state.with_params(params)
            try:
                with Graph() as g:
                    out: TrainStepOutput = forward_train(
                        batch, work, lam=cfg.lam, stage=cfg.stage, mask=mask,
                        loss_type=cfg.loss, step_seed=derive_seed(cfg.seed, epoch, step))
                grads = backward(g, out.loss)
            except NumericsError as err:
                raise NumericsError(
                    f"numeric abort at epoch {epoch} step {step}: {err}") from err
            params = opt.step(params, grads, lr, names=trainable)
            params = project_gdn(params)
            rec = StepRecord(epoch=epoch, step=step, loss=float(out.loss.data),
                             bpp=float(out.bpp.data), distortion=float(out.distortion.data),
                             lr=lr)
            history.append(rec)
            if log is not None:
                log(rec)
            done += 1
            if max_steps is not None and done >= max_steps:
                break
        if max_steps is not None and done >= max_steps:
            break

    final = state.with_params(params, stage=cfg.stage)
    final.train_echo.update({"lambda": cfg.lam, "loss": cfg.loss, "stage": cfg.stage,
                             "epochs": cfg.epochs, "seed": cfg.seed})
    return TrainResult(state=final, history=history)
