"""
Tests for the HTTP surface.

Run with:  python -m pytest backend/tests/test_api.py -v
"""

from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from backend.config import LOGISTIC_VARIANCE
from backend.main import app
from backend.models.schemas import OutcomeKind, SimulationConfig
from backend.services.simulation import generate

client = TestClient(app)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _records(kind: OutcomeKind = OutcomeKind.CONTINUOUS, n: int = 300, m: int = 3) -> list[dict]:
    ds = generate(SimulationConfig(n=n, m=m, seed=2, outcome_kind=kind), 0)
    return [
        {"outcome": float(y), "hospital": int(z) + 1, "x1": float(x[0]), "x2": float(x[1])}
        for y, z, x in zip(ds.outcome, ds.hospital, ds.covariates)
    ]


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------

class TestHealth:
    def test_root(self) -> None:
        response = client.get("/")
        assert response.status_code == 200
        assert response.json()["status"] == "ok"


class TestDecomposeEndpoint:
    def test_point_estimate(self) -> None:
        response = client.post("/decompose", json={"records": _records()})
        assert response.status_code == 200
        body = response.json()
        assert body["omega1"] + body["omega2"] + body["omega3"] == pytest.approx(body["total"], abs=1e-9)
        assert body["intervals"] is None
        assert body["n"] == 300

    def test_with_intervals(self) -> None:
        response = client.post("/decompose", json={"records": _records(), "draws": 15, "level": 0.9})
        assert response.status_code == 200
        assert response.json()["intervals"]["level"] == 0.9

    def test_missing_column(self) -> None:
        response = client.post("/decompose", json={"records": _records(), "outcome": "death"})
        assert response.status_code == 422
        assert "death" in response.json()["detail"]

    def test_invalid_body(self) -> None:
        response = client.post("/decompose", json={"records": [{"outcome": 1.0, "hospital": 1}]})
        assert response.status_code == 422


class TestOracleEndpoint:
    def test_continuous_truth(self) -> None:
        response = client.post("/oracle", json={"config": {"n": 500, "m": 3, "seed": 1}, "oracle_draws": 2000})
        assert response.status_code == 200
        body = response.json()
        assert body["omega3"] == pytest.approx(LOGISTIC_VARIANCE)
        assert body["oracle_draws"] == 2000

    def test_invalid_config(self) -> None:
        response = client.post("/oracle", json={"config": {"n": 2, "m": 5}})
        assert response.status_code == 422


class TestMetaEndpoint:
    def test_documented_in_openapi(self) -> None:
        operation = client.get("/openapi.json").json()["paths"]["/meta"]["post"]
        assert "DerSimonian" in operation["description"]

    def test_binary_records(self) -> None:
        response = client.post("/meta", json={"records": _records(OutcomeKind.BINARY, n=600, m=4)})
        assert response.status_code == 200
        body = response.json()
        assert len(body["hospitals"]) == 4
        assert body["result"]["df"] == 3

    def test_continuous_records_are_rejected(self) -> None:
        response = client.post("/meta", json={"records": _records()})
        assert response.status_code == 422
        assert "binary" in response.json()["detail"]
