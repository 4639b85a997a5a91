from pydantic import BaseModel
from typing import Optional

from ..models.enums import Preset


class SweepRow(BaseModel):
    preset: Preset
    width_multiplier: int
    groups: int
    nmf_parameters: int
    conv_parameters: int
    parameters: int
    conv_to_nmf_ratio: Optional[float] = None
    test_accuracy: Optional[float] = None
    pareto: bool = False


class LocalBaselineResult(BaseModel):
    """Frozen unsupervised NMF dictionaries vs. the fully trained model."""

    local_accuracy: float
    backprop_accuracy: Optional[float] = None
    frozen: list[str]
    dictionary_divergence: dict[str, float] = {}
