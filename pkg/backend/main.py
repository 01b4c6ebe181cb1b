"""
FastAPI Application Entry-Point.

Wires together the routers and logging for the HTTP surface over the
decomposition pipeline. The command-line front end lives in
``backend.cli``.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI

from backend.config import API_HOST, API_PORT, LOG_DATE_FORMAT, LOG_FORMAT
from backend.routers import decompose, meta, oracle

# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT)
logger = logging.getLogger("variance_lab")

# ---------------------------------------------------------------------------
# App factory
# ---------------------------------------------------------------------------
app = FastAPI(
    title="Hospital Variance Lab",
    description=(
        "Causal three-way decomposition of hospital quality-indicator variance "
        "into case-mix, between-hospital and residual components."
    ),
    version="1.0.0",
)

# ---------------------------------------------------------------------------
# Routers
# ---------------------------------------------------------------------------
app.include_router(decompose.router)
app.include_router(oracle.router)
app.include_router(meta.router)


# ---------------------------------------------------------------------------
# Health-check
# ---------------------------------------------------------------------------
@app.get("/", tags=["Health"])
async def health() -> dict:
    """Simple liveness probe."""
    return {"status": "ok", "service": "Hospital Variance Lab"}


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("backend.main:app", host=API_HOST, port=API_PORT)
