"""Learning dynamics models with a built-in Lyapunov decrease guarantee.

A nominal drift network is corrected along the gradient of an input-convex
Lyapunov network so that the closed loop with a learned controller decreases
V at a prescribed rate. Modules:

- ``diffcore``: small reverse-mode autodiff over numpy arrays
- ``nets``: MLPs, the ICNN Lyapunov candidate and its analytic gradient
- ``stability``: projections, weights, Sontag and structured controllers
- ``training``: loss, Adam, checkpoints
- ``verify``: sampled certification reports
- ``simdata``: benchmark systems, datasets, RK4, disturbance experiments
- ``cli``: command-line entry point
"""
from .errors import CheckpointError, ConfigurationError, DatasetFormatError, InvariantViolation, TrainingDiverged

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DatasetFormatError",
    "InvariantViolation",
    "TrainingDiverged",
]
