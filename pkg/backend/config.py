"""
Application Configuration Module.

Centralizes all configuration constants and defaults for the
Hospital Variance Lab backend. Run-time choices (paths, seeds, link,
effect mode …) arrive through the pydantic models in
``backend.models.schemas``; everything here is a static default.
"""

import math

# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------
ALLOWED_INPUT_EXTENSIONS: set[str] = {".csv"}
ALLOWED_OUTPUT_EXTENSIONS: set[str] = {".json", ".csv"}
MIN_PATIENTS: int = 2

# ---------------------------------------------------------------------------
# Decomposition Defaults
# ---------------------------------------------------------------------------
DEFAULT_VOLUME_THRESHOLD: int = 35  # hospitals below this get intercept-only assignment terms
DEFAULT_DRAWS: int = 1000
DEFAULT_LEVEL: float = 0.95
MIN_DRAWS_FOR_QUANTILES: int = 20
MAX_DROPPED_FRACTION: float = 0.05
QUANTILE_METHOD: str = "linear"

# ---------------------------------------------------------------------------
# Solver Settings
# ---------------------------------------------------------------------------
MAX_ITERATIONS: int = 100
REL_LOGLIK_TOL: float = 1e-10
GRADIENT_TOL: float = 1e-8
MAX_STEP_HALVINGS: int = 30
SEPARATION_NORM: float = 1e4
SEPARATION_PROB: float = 1e-7  # fitted risks this close to 0 or 1 mark (quasi-)separation
RANK_TOL: float = 1e-10

TAU2_FLOOR: float = 1e-10      # τ² boundary; estimates at the floor are reported as 0
TAU2_CEILING: float = 1e8
INNER_MODE_TOL: float = 1e-12
INNER_MODE_MAX_ITER: int = 100
INNER_MODE_MAX_STEP: float = 2.0

# ---------------------------------------------------------------------------
# Simulation Defaults
# ---------------------------------------------------------------------------
DEFAULT_REPLICATIONS: int = 200
DEFAULT_ORACLE_DRAWS: int = 1_000_000
DEFAULT_ORACLE_BATCHES: int = 20
MAX_ASSIGNMENT_ATTEMPTS: int = 100

GAMMA_SD: float = 0.5               # γ_z ~ N(0, 0.25)
PHI_SD: float = math.sqrt(0.5)      # φ_z1, φ_z2 ~ N(0, 0.5)
ALPHA_SD: float = 2.0               # α_z ~ N(0, 2²)
CASEMIX_EFFECTS: tuple[float, float] = (1.0, 2.0)
X2_PROBABILITY: float = 0.5
LOGISTIC_VARIANCE: float = math.pi ** 2 / 3.0

# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
LOG_FORMAT: str = "%(asctime)s │ %(levelname)-8s │ %(name)s │ %(message)s"
LOG_DATE_FORMAT: str = "%H:%M:%S"

# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------
API_HOST: str = "0.0.0.0"
API_PORT: int = 8000
