from pydantic import BaseModel, Field
from typing import Optional


class FactorizeRequest(BaseModel):
    matrix: list[list[float]]
    rank: int = Field(gt=0)
    iters: int = Field(default=200, gt=0)
    seed: int = 0

    class Config:
        json_schema_extra = {
            "example": {"matrix": [[1.0, 2.0], [2.0, 4.0]], "rank": 1, "iters": 50, "seed": 0}
        }


class FactorizeResponse(BaseModel):
    W: list[list[float]]
    H: list[list[float]]
    divergence_history: list[float]


class GradcheckRequest(BaseModel):
    instances: int = Field(default=5, gt=0, le=200)
    seed: int = 0


class GradcheckRow(BaseModel):
    layer: str
    mode: str
    check: str
    max_rel_err: Optional[float] = None
    cosine: Optional[float] = None
    tolerance: Optional[float] = None
    passed: bool = True


class GradcheckResponse(BaseModel):
    passed: bool
    rows: list[GradcheckRow]


class PresetSummary(BaseModel):
    preset: str
    width_multiplier: int
    groups: int
    parameters: int
    nmf_parameters: int
    conv_parameters: int
    conv_to_nmf_ratio: Optional[float]
