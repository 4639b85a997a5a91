from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hflip: bool = True
    # brightness, contrast, saturation deltas
    color_jitter: tuple[float, float, float] = (0.1, 0.1, 0.1)
    crop_32_to_28: bool = True


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr0: float = Field(default=1e-3, gt=0)
    plateau_patience: int = Field(default=10, ge=1)
    plateau_threshold: float = Field(default=1e-6, ge=0)
    lr_factor: float = 0.1
    lr_floor: float = 1e-9
    max_epochs: int = Field(default=500, ge=1)
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    augment: AugmentConfig = AugmentConfig()
    alpha: float = Field(default=0.5, ge=0)

    @model_validator(mode="after")
    def _schedule_is_sane(self) -> "TrainConfig":
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if not self.lr_floor < self.lr0:
            raise ValueError("lr_floor must be below lr0")
        return self


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


class TrainingReport(BaseModel):
    epochs: list[EpochRecord] = []
    lr_trace: list[float] = []
    wall_seconds: float = 0.0
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None
    stopped_reason: str = ""
