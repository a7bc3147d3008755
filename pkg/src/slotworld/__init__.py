"""Slot-factorized world model for block manipulation.

Subpackages by responsibility: `world` (the 2-D block simulator and dataset
generation), `model` (decoder, mixture observation, pairwise dynamics),
`inference` (iterative posterior refinement), `training` (objective and
training loop), `planning` (rollouts, costs, CEM, the MPC driver),
`evaluation` (segmentation and planning metrics), and `cli` (entry points).
"""

from .model import ModelConfig
from .training import TrainConfig
from .world import Action, Trajectory, WorldConfig

__version__ = "0.1.0"

__all__ = ["Action", "ModelConfig", "TrainConfig", "Trajectory", "WorldConfig",
           "__version__"]
