"""Models package initialization."""

from .schemas import (
    CompareRequest,
    DpConfig,
    ErrorResponse,
    ExperimentConfig,
    FederationConfig,
    LocalTrainConfig,
    LossWeights,
    MetricsResponse,
    ModelConfig,
    RoundRecord,
    RunRequest,
    RunSummary,
    SamplerConfig,
    ScheduleConfig,
    WorldConfig,
)

__all__ = [
    "CompareRequest",
    "DpConfig",
    "ErrorResponse",
    "ExperimentConfig",
    "FederationConfig",
    "LocalTrainConfig",
    "LossWeights",
    "MetricsResponse",
    "ModelConfig",
    "RoundRecord",
    "RunRequest",
    "RunSummary",
    "SamplerConfig",
    "ScheduleConfig",
    "WorldConfig",
]
