"""
Decompose Router — patient records in, variance decomposition out.
"""

from __future__ import annotations

import logging

from fastapi import APIRouter, HTTPException

from backend.models.schemas import DecompositionResult, DecomposeRequest
from backend.services.pipeline import decompose_records

logger = logging.getLogger(__name__)
router = APIRouter(tags=["Decompose"])


@router.post("/decompose", response_model=DecompositionResult)
async def decompose(request: DecomposeRequest) -> DecompositionResult:
    """
    Three-way decomposition of the outcome variance of posted records.

    Set ``draws`` > 0 to attach credible intervals.
    """
    logger.info(
        "Decompose request — rows=%d, effects=%s, draws=%d",
        len(request.records), request.effects.value, request.draws,
    )
    try:
        return decompose_records(request)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    except Exception as exc:
        logger.exception("Decomposition failed")
        raise HTTPException(status_code=500, detail=f"Decomposition error: {exc}")
