from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional

from ..config import settings
from ..models.enums import BackwardEngine, BlockKind, GradMode, Preset

WIDTH_MULTIPLIERS = (1, 2, 4, 8)


class BlockConfig(BaseModel):
    """One processing block: main layer (CNN or CNMF), optional 1x1 mix."""

    model_config = ConfigDict(extra="forbid")

    kind: BlockKind
    mix_1x1: bool = False
    out_channels: int = Field(gt=0)
    kernel: tuple[int, int] = (3, 3)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    groups_main: int = Field(default=1, gt=0)
    groups_mix: int = Field(default=1, gt=0)
    batch_norm: bool = True
    nmf_iters: int = Field(default_factory=lambda: settings.NMF_ITERS, ge=1)
    nmf_epsilon: float = Field(default_factory=lambda: settings.NMF_EPSILON, gt=0, le=1)

    @field_validator("kernel")
    @classmethod
    def _positive_kernel(cls, v: tuple[int, int]) -> tuple[int, int]:
        if min(v) < 1:
            raise ValueError("kernel extents must be positive")
        return v


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Optional[Preset] = None
    blocks: list[BlockConfig] = Field(min_length=1)
    width_multiplier: int = 1
    groups: int = Field(default=1, gt=0)
    input_shape: tuple[int, int, int] = (3, 28, 28)
    class_count: int = Field(default=10, gt=1)
    backward: BackwardEngine = BackwardEngine.APPROX
    grad_mode: GradMode = GradMode.DIRECT

    @field_validator("width_multiplier")
    @classmethod
    def _known_width(cls, v: int) -> int:
        if v not in WIDTH_MULTIPLIERS:
            raise ValueError(f"width_multiplier must be one of {WIDTH_MULTIPLIERS}")
        return v

    @model_validator(mode="after")
    def _final_block_is_classifier(self) -> "NetworkConfig":
        if self.blocks[-1].out_channels != self.class_count:
            raise ValueError(
                f"final block has {self.blocks[-1].out_channels} channels, "
                f"expected class_count={self.class_count}"
            )
        return self


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.5, ge=0)
