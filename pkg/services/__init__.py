"""Services package initialization."""

from .experiment_service import ExperimentService, ablation_variants, with_updates

__all__ = ["ExperimentService", "ablation_variants", "with_updates"]
