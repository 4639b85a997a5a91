"""
Adam with bias correction and a reduce-on-plateau learning-rate schedule.
"""
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np
import structlog

from ..core.tensor import Tensor
from ..errors import NonFiniteError, ShapeError
from ..schemas.train import TrainConfig

log = structlog.get_logger(__name__)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
    frozen: Iterable[str] = (),
) -> None:
    """One in-place Adam update of every non-frozen parameter.

    NMF layers expose their unconstrained U here, never the derived W.
    """
    frozen = set(frozen)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient of {name} has shape {g.shape}, parameter {params[name].shape}")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class ScheduleStep(NamedTuple):
    lr: float
    stop: bool
    reason: Optional[str] = None


class PlateauScheduler:
    """Reduce the learning rate by `factor` after `patience` epochs without a
    new minimum (improvement larger than `threshold`)."""

    def __init__(
        self,
        lr0: float = 1e-3,
        factor: float = 0.1,
        patience: int = 10,
        threshold: float = 1e-6,
        floor: float = 1e-9,
        max_epochs: int = 500,
    ):
        self.lr0 = lr0
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.floor = floor
        self.max_epochs = max_epochs
        self.best = np.inf
        self.wait = 0
        self.reductions = 0
        self.epochs = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauScheduler":
        return cls(
            lr0=cfg.lr0,
            factor=cfg.lr_factor,
            patience=cfg.plateau_patience,
            threshold=cfg.plateau_threshold,
            floor=cfg.lr_floor,
            max_epochs=cfg.max_epochs,
        )

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor**self.reductions

    def step(self, val_loss: float) -> ScheduleStep:
        self.epochs += 1
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.reductions += 1
                self.wait = 0
                log.info("plateau: reducing learning rate", lr=self.lr, epoch=self.epochs)

        if self.lr < self.floor * (1.0 - 1e-6):
            return ScheduleStep(self.lr, True, "lr_floor")
        if self.epochs >= self.max_epochs:
            return ScheduleStep(self.lr, True, "max_epochs")
        return ScheduleStep(self.lr, False)


def lr_schedule(history: list[float], cfg: Optional[TrainConfig] = None) -> ScheduleStep:
    """Learning rate (and stop signal) after the given validation-loss history."""
    if not history:
        raise ValueError("validation-loss history is empty")
    scheduler = PlateauScheduler.from_config(cfg or TrainConfig())
    result = ScheduleStep(scheduler.lr, False)
    for value in history:
        result = scheduler.step(value)
    return result
