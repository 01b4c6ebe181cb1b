"""
Meta Router — indirectly standardized QIs and DerSimonian–Laird summary.
"""

from __future__ import annotations

import logging

from fastapi import APIRouter, HTTPException

from backend.models.schemas import MetaReport, MetaRequest
from backend.services.pipeline import meta_records

logger = logging.getLogger(__name__)
router = APIRouter(tags=["Meta"])


@router.post("/meta", response_model=MetaReport)
async def meta(request: MetaRequest) -> MetaReport:
    """Per-hospital indirect QIs of binary records with the DerSimonian–Laird summary."""
    logger.info("Meta request — rows=%d", len(request.records))
    try:
        return meta_records(request)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    except Exception as exc:
        logger.exception("Meta baseline failed")
        raise HTTPException(status_code=500, detail=f"Meta baseline error: {exc}")
