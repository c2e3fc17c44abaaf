"""
Constants & Environment Configuration
"""

import logging
import os
from pathlib import Path
from typing import Dict, Tuple

# ---------------------------------------------------------------------------
# Load .env FIRST
# ---------------------------------------------------------------------------
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
logging.basicConfig(
    level=os.environ.get("LAWNSIM_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s | %(levelname)-7s | %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger("lawnsim")

# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------
BASE_DIR = Path(__file__).parent
SCENARIO_DIR = Path(os.environ.get("LAWNSIM_SCENARIO_DIR", BASE_DIR / "scenarios"))
REFERENCE_SCENARIO = "reference.json"

# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------
SENSOR_RADIUS = 3
DEFAULT_UAV_ENERGY = 5000.0
MAX_MAP_ATTEMPTS = 50

# ---------------------------------------------------------------------------
# Link
# ---------------------------------------------------------------------------
LINK_P_DOWN = 0.05
LINK_P_UP = 0.25
LINK_BANDWIDTH = 10_000.0
LINK_RTT = 0.05
QUEUE_CAPACITY = 64
BS_ID = 255

# ---------------------------------------------------------------------------
# Fast planner
# ---------------------------------------------------------------------------
HEURISTIC_WEIGHT = 1.0
HEURISTIC_WEIGHT_CAP = 2.0

# ---------------------------------------------------------------------------
# Global planner
# ---------------------------------------------------------------------------
GA_POPULATION = 48
GA_GENERATIONS = 120
GA_CROSSOVER_RATE = 0.9
GA_MUTATION_RATE = 0.3
GA_ELITISM = 2
GA_TOURNAMENT = 3
GA_EVAL_SECONDS = 1e-5  # model-seconds charged per fitness evaluation
BRUTE_FORCE_MAX_WAYPOINTS = 8
BRUTE_FORCE_MAX_UAVS = 3
DISTANCE_CACHE_SIZE = 4096  # BFS fields kept per (map fingerprint, source)

# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------
STM_CAPACITY = 64
STM_REFRESH_KEEP = 16
COMPRESSION_THRESHOLD = 0.20

# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------
SYNC_INTERVAL = 9
SYNC_TIMEOUT = 2.0
CONFIDENCE_THRESHOLD = 0.1
CONFIDENCE_FLOOR = 0.05
FALLBACK_TRIGGER = 3
WEIGHT_STEP = 0.25
CONFIDENCE_STEP = 0.05
LATENCY_BUDGET = 0.5
ENERGY_RESERVE_FLOOR = 0.0

# ---------------------------------------------------------------------------
# Cost model (model-seconds / model-joules)
# ---------------------------------------------------------------------------
COST_DEFAULTS: Dict[str, float] = {
    "t_slm": 0.05,
    "t_llm": 0.8,
    "e_slm": 0.2,
    "e_llm": 8.0,
    "e_flight": 1.0,
    "e_hover": 0.1,
    "e_tx": 0.001,
}

# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------
TICK_SECONDS = 1.0
TICK_LIMIT = 10_000

# ---------------------------------------------------------------------------
# Tools (default roster when a scenario omits `tools`)
# ---------------------------------------------------------------------------
DEFAULT_TOOLS: Tuple[Dict[str, object], ...] = (
    {"name": "sensor_sweep", "tier": "onboard", "tags": ["sense", "local"],
     "latency_cost": 0.005, "energy_cost": 0.02, "resource_floor": 1.0},
    {"name": "astar_op", "tier": "onboard", "tags": ["plan", "weighted", "local"],
     "latency_cost": 0.01, "energy_cost": 0.05, "resource_floor": 2.0},
    {"name": "dstar_lite_op", "tier": "onboard", "tags": ["plan", "incremental", "local"],
     "latency_cost": 0.008, "energy_cost": 0.04, "resource_floor": 2.0},
    {"name": "ga_planner", "tier": "ground", "tags": ["plan", "global"],
     "latency_cost": 0.5, "energy_cost": 5.0, "resource_floor": 0.0},
    {"name": "map_fusion", "tier": "ground", "tags": ["aggregate", "global"],
     "latency_cost": 0.05, "energy_cost": 0.5, "resource_floor": 0.0},
)

# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------
SWEEP_CAP = 256
FLOAT_DECIMALS = 6
CSV_COLUMNS = (
    "mode", "seed", "uav_id", "traj_len", "mean_latency", "max_latency",
    "energy", "uplink_bytes", "downlink_bytes", "fallbacks",
    "waypoints_done", "mission_time",
)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_IO = 4
