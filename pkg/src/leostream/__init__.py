"""Deterministic discrete-event simulator of MPEG-DASH adaptive streaming
over a LEO-satellite-backhauled 5G IAB path, comparing TCP-like and
QUIC-like transports under NewReno, CUBIC, and BBR congestion control."""

__version__ = "0.1.0"

from .engine import Engine, make_rng, substream_seed
from .harness import build_simulation, run_matrix, run_simulation
from .metrics import compute_session, jain_index
from .scenario import DEFAULT_MATRIX, ScenarioConfig, parse_scenario

__all__ = [
    "Engine",
    "make_rng",
    "substream_seed",
    "build_simulation",
    "run_matrix",
    "run_simulation",
    "compute_session",
    "jain_index",
    "DEFAULT_MATRIX",
    "ScenarioConfig",
    "parse_scenario",
]
