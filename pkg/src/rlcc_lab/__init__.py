from importlib.metadata import version, PackageNotFoundError

from .config import configure_logging
from .simcore import build_scenario, run, step
from .structs import ScenarioKind, ScenarioSpec, SimConfig

__all__ = ["ScenarioKind", "ScenarioSpec", "SimConfig", "build_scenario", "configure_logging", "run", "step"]

try:
    __version__ = version("rlcc-lab")
except PackageNotFoundError:
    # Package not installed (e.g., running from source)
    __version__ = "0.0.0-dev"
