"""Agentic image geolocalization harness.

Runs a think / tool-call / observe loop against a chat policy with two tools
(crop-and-zoom, web search), scores answers level by level and by geocoded
distance, and computes hierarchical rewards and group-normalized advantages.
"""

__version__ = "0.1.0"

from .geo import (
    EARTH_RADIUS_KM,
    MAX_DISTANCE_KM,
    GeoLabel,
    GeoPoint,
    HierarchicalReward,
    LevelVerdicts,
    RewardGroup,
    SurrogateTermInput,
    clipped_surrogate_term,
    group_advantages,
    haversine_km,
    hierarchical_reward,
)
from .protocol import (
    ProtocolMessage,
    ToolInvocation,
    Trajectory,
    deserialize_trajectory,
    parse_model_output,
    render_system_prompt,
    serialize_trajectory,
)

__all__ = [
    "__version__",
    "EARTH_RADIUS_KM",
    "MAX_DISTANCE_KM",
    "GeoLabel",
    "GeoPoint",
    "HierarchicalReward",
    "LevelVerdicts",
    "RewardGroup",
    "SurrogateTermInput",
    "clipped_surrogate_term",
    "group_advantages",
    "haversine_km",
    "hierarchical_reward",
    "ProtocolMessage",
    "ToolInvocation",
    "Trajectory",
    "deserialize_trajectory",
    "parse_model_output",
    "render_system_prompt",
    "serialize_trajectory",
]
