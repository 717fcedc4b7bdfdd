"""Standard-plane localisation in 3D volumes with a Double-DQN agent, landmark-based
warm starts and a learned stopping rule."""

from .geometry import AgentAction, Plane, StepSizes, dihedral_angle, offset_difference, reward
from .volume import Annotation, SliceImage, Volume, extract_slice, generate_phantom

__all__ = [
    "AgentAction",
    "Annotation",
    "Plane",
    "SliceImage",
    "StepSizes",
    "Volume",
    "dihedral_angle",
    "extract_slice",
    "generate_phantom",
    "offset_difference",
    "reward",
]
__version__ = "0.1.0"
