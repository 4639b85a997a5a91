from fastapi import APIRouter, HTTPException, status

from ..errors import NmfError
from ..schemas.api import GradcheckRequest, GradcheckResponse
from ..services.gradcheck import run_gradcheck

router = APIRouter(prefix="/gradcheck", tags=["Gradients"])


@router.post("", response_model=GradcheckResponse)
def gradcheck(request: GradcheckRequest):
    """Run the seeded gradient checks; CPU-bound, so served from the threadpool."""
    try:
        return run_gradcheck(instances=request.instances, seed=request.seed)
    except NmfError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
