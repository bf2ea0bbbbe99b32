"""
Lab configuration.
Central defaults for every tolerance and solver knob, with overrides from the
environment (a local .env file is loaded first).
"""

import os
import logging
from dataclasses import dataclass, field, asdict
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Solver defaults
SOLVER_TOL = 1e-8
MAX_ITER = 500
BARRIER_START = 1.0
BARRIER_END = 1e-10
BARRIER_DECAY = 0.2
START_EPS = 1e-6
DEGENERATE_WEALTH = 1e-12
ARMIJO_SLOPE = 0.25
ARMIJO_SHRINK = 0.5

# Verification tolerances
DUALITY_GAP_TOL = 1e-5
FOC_TOL = 1e-5
COMPLEMENTARITY_TOL = 1e-6
PRODUCT_MARTINGALE_TOL = 1e-6
SHADOW_VALUE_TOL = 1e-5
SHADOW_WEALTH_TOL = 1e-4
SANDWICH_SLACK = -1e-8
COMPENSATOR_TOL = 1e-8
MEASURE_CHANGE_TOL = 1e-10
MARTINGALE_TOL = 1e-9
ADMISSIBILITY_TOL = 1e-8

# Tree and counterexample defaults
PROBABILITY_SUM_TOL = 1e-12
TILT_MIN_WEIGHT = 1e-12
DEPTH_CAP_WARNING = 1e-3
POSITIVITY_THRESHOLD = 1e-3

# Output
DEFAULT_OUT_DIR = 'runs'
DEFAULT_SEED = 0
DEFAULT_UTILITY = 'log'

ENV_PREFIX = 'LAB_'


def _env(name, cast, default):
    """Read LAB_<name> from the environment, falling back to default."""
    raw = os.getenv(ENV_PREFIX + name)
    if raw is None or raw == '':
        return default
    try:
        return cast(raw)
    except ValueError:
        logger.warning(f"Ignoring invalid {ENV_PREFIX}{name}={raw!r}")
        return default


@dataclass(frozen=True)
class SolverOptions:
    """Knobs shared by the primal and dual barrier solvers."""
    tol: float = SOLVER_TOL
    max_iter: int = MAX_ITER
    barrier_start: float = BARRIER_START
    barrier_end: float = BARRIER_END
    barrier_decay: float = BARRIER_DECAY
    start_eps: float = START_EPS

    def to_dict(self):
        return asdict(self)


@dataclass
class Settings:
    """Resolved run settings: CLI flag > environment > built-in default."""
    tol: float = SOLVER_TOL
    max_iter: int = MAX_ITER
    seed: int = DEFAULT_SEED
    out_dir: str = DEFAULT_OUT_DIR
    parallel: int = 1
    utility: str = DEFAULT_UTILITY
    log_level: str = 'INFO'
    sources: dict = field(default_factory=dict)

    def solver_options(self):
        return SolverOptions(tol=self.tol, max_iter=self.max_iter)

    def to_dict(self):
        data = asdict(self)
        data.pop('sources')
        return data


def load_settings(**overrides):
    """
    Resolve settings from keyword overrides, the environment and defaults.

    Args:
        **overrides: values given on the command line; None means "not given".

    Returns:
        Settings with a `sources` map recording where each value came from.
    """
    defaults = Settings()
    casts = {
        'tol': float, 'max_iter': int, 'seed': int, 'out_dir': str,
        'parallel': int, 'utility': str, 'log_level': str,
    }
    resolved = {}
    sources = {}
    for name, cast in casts.items():
        given = overrides.get(name)
        if given is not None:
            resolved[name] = cast(given)
            sources[name] = 'flag'
            continue
        env_name = name.upper()
        if os.getenv(ENV_PREFIX + env_name) not in (None, ''):
            resolved[name] = _env(env_name, cast, getattr(defaults, name))
            sources[name] = 'env'
        else:
            resolved[name] = getattr(defaults, name)
            sources[name] = 'default'
    return Settings(**resolved, sources=sources)
