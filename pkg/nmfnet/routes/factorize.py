from fastapi import APIRouter, HTTPException, status
import numpy as np

from ..errors import NmfError
from ..schemas.api import FactorizeRequest, FactorizeResponse
from ..services.classic_nmf import factorize

router = APIRouter(prefix="/factorize", tags=["NMF"])


@router.post("", response_model=FactorizeResponse)
async def factorize_matrix(request: FactorizeRequest):
    """Classic multiplicative-update NMF of a non-negative matrix."""
    try:
        X = np.asarray(request.matrix, dtype=np.float64)
        result = factorize(X, request.rank, iters=request.iters, seed=request.seed)
    except (NmfError, ValueError) as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    return FactorizeResponse(
        W=result.W.tolist(),
        H=result.H.tolist(),
        divergence_history=result.divergence_history,
    )
