"""
Oracle Router — Monte Carlo truth of a simulation configuration.
"""

from __future__ import annotations

import logging

from fastapi import APIRouter, HTTPException

from backend.models.schemas import OracleRequest, TruthOracle
from backend.services.pipeline import oracle_for

logger = logging.getLogger(__name__)
router = APIRouter(tags=["Simulation"])


@router.post("/oracle", response_model=TruthOracle)
async def oracle(request: OracleRequest) -> TruthOracle:
    """True (ω1, ω2, ω3) of the generating mechanism with batch-means SEs."""
    logger.info("Oracle request — n=%d, m=%d, draws=%d", request.config.n, request.config.m, request.oracle_draws)
    try:
        return oracle_for(request)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    except Exception as exc:
        logger.exception("Oracle failed")
        raise HTTPException(status_code=500, detail=f"Oracle error: {exc}")
