from pydantic import BaseModel, Field
from typing import Optional

from ..models.enums import BenchArm


class LayerBenchSpec(BaseModel):
    """Dense layer under test: S inputs, I latents, `batch` patterns."""

    S: int = Field(gt=0)
    I: int = Field(gt=0)
    batch: int = Field(default=32, gt=0)
    epsilon: float = Field(default=1.0, gt=0, le=1)


class BenchRow(BaseModel):
    arm: BenchArm
    n_iters: int
    forward_ns: int
    backward_ns: int
    peak_bytes: int
    mad_ratio: float
    unstable: bool = False
    budget_exceeded: bool = False
    time_ratio: Optional[float] = None
    memory_ratio: Optional[float] = None


class SimilarityRow(BaseModel):
    n_iters: int
    cosine_phi: float
    cosine_grad: float


class BenchReport(BaseModel):
    layer: LayerBenchSpec
    repetitions: int = Field(ge=5)
    warmup: int
    workers: int = 1
    rows: list[BenchRow]
    similarities: list[SimilarityRow] = []
