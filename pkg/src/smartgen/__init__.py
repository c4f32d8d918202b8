"""Next-token-prediction motion generation for multi-agent traffic scenes.

Trajectories and lane maps are discretized into motion and road tokens, a
decoder-only transformer with relative pose encodings is trained by next
token prediction, and closed-loop rollouts are scored with histogram
likelihood metrics on synthetic scenarios.
"""
__version__ = "0.1.0"

from .exceptions import (ConfigError, NonFiniteError, SchemaError, SmartgenError,  # noqa: E402
                         ValidationError, VocabularyMismatchError)
from .geometry import AgentClass, Polyline, Pose2, Scenario, Track  # noqa: E402
from .estimators import MotionTokenizer, PowerLawRegressor, RoadTokenizer, SMARTSimulator  # noqa: E402

__all__ = ["__version__", "AgentClass", "Polyline", "Pose2", "Scenario", "Track", "MotionTokenizer",
           "RoadTokenizer", "SMARTSimulator", "PowerLawRegressor", "SmartgenError", "ValidationError",
           "SchemaError", "ConfigError", "NonFiniteError", "VocabularyMismatchError"]
