"""Session-based federated learning with similarity-weighted warm starts."""

from .kernels import BACKEND
from .models import ModelSpec
from .server import VARIANTS, RunLog, TrainSettings, run_sessions, run_training

__all__ = ["BACKEND", "ModelSpec", "RunLog", "TrainSettings", "VARIANTS", "run_sessions", "run_training"]
__version__ = "0.1.0"
