"""Router for experiment endpoints."""

from typing import List

from fastapi import APIRouter, Depends, HTTPException

from core.errors import ConfigError
from models.schemas import CompareRequest, ErrorResponse, ExperimentConfig, MetricsResponse, RunRequest, RunSummary
from services.experiment_service import ExperimentService


router = APIRouter(prefix="/api/experiments", tags=["experiments"])


def get_experiment_service() -> ExperimentService:
    """Dependency to get the experiment service."""
    return ExperimentService()


def _load_config(request: RunRequest, service: ExperimentService) -> ExperimentConfig:
    overrides = dict(request.overrides)
    overrides["output_dir"] = str(service.run_dir(request.name))
    try:
        return ExperimentConfig.load(request.config_path, overrides)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e))


@router.post(
    "/run",
    response_model=RunSummary,
    summary="Run one experiment",
    description="Run a federated experiment to completion and return its summary",
    responses={
        200: {"model": RunSummary, "description": "Run finished (check status)"},
        422: {"model": ErrorResponse, "description": "Invalid configuration"},
        500: {"model": ErrorResponse, "description": "Server error"}
    }
)
def run_experiment(request: RunRequest, service: ExperimentService = Depends(get_experiment_service)):
    """Run one experiment.

    Args:
        request: Run name, config file and overrides
        service: The experiment service

    Returns:
        The run summary
    """
    return service.run(_load_config(request, service), name=request.name)


@router.post(
    "/compare",
    response_model=List[RunSummary],
    summary="Compare aggregation strategies",
    description="Run each strategy on the same world and seeds",
    responses={
        422: {"model": ErrorResponse, "description": "Invalid configuration"},
        500: {"model": ErrorResponse, "description": "Server error"}
    }
)
def compare_strategies(request: CompareRequest, service: ExperimentService = Depends(get_experiment_service)):
    """Compare strategies under a matched protocol."""
    return service.compare(_load_config(request, service), request.strategies)


@router.post(
    "/ablate",
    response_model=List[RunSummary],
    summary="Run the ablation matrix",
    description="Run the adapters-only, +DP, +ISFA, +TDC and full variants",
    responses={
        422: {"model": ErrorResponse, "description": "Invalid configuration"},
        500: {"model": ErrorResponse, "description": "Server error"}
    }
)
def ablate(request: RunRequest, service: ExperimentService = Depends(get_experiment_service)):
    """Run the five ablation variants."""
    return service.ablate(_load_config(request, service))


@router.get(
    "/{name}/metrics",
    response_model=MetricsResponse,
    summary="Get per-round metrics",
    responses={
        404: {"model": ErrorResponse, "description": "Unknown run"},
    }
)
def get_metrics(name: str, service: ExperimentService = Depends(get_experiment_service)):
    """Return the rows of a run's metrics CSV.

    Raises:
        HTTPException: If the run has no metrics
    """
    try:
        rows = service.read_metrics(name)
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e))
    return MetricsResponse(name=name, rows=rows)
