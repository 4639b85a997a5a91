from fastapi import APIRouter, HTTPException, Query, status
from typing import List

from ..errors import NmfError
from ..models.enums import Preset
from ..models.network import analytic_parameter_count, block_specs, conv_to_nmf_ratio, preset_config
from ..schemas.api import PresetSummary

router = APIRouter(prefix="/presets", tags=["Networks"])


@router.get("", response_model=List[PresetSummary])
async def list_presets(
    width_multiplier: int = Query(default=1),
    groups: int = Query(default=1, gt=0),
):
    """Parameter counts of the four architectures at one width / groups setting."""
    summaries = []
    for preset in Preset:
        try:
            config = preset_config(preset, width_multiplier=width_multiplier, groups=groups)
            block_specs(config)
            counts = analytic_parameter_count(config)
        except (NmfError, ValueError) as e:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
        summaries.append(
            PresetSummary(
                preset=preset.value,
                width_multiplier=width_multiplier,
                groups=groups,
                parameters=counts["total"],
                nmf_parameters=counts["nmf"],
                conv_parameters=counts["conv"],
                conv_to_nmf_ratio=conv_to_nmf_ratio(counts),
            )
        )
    return summaries
