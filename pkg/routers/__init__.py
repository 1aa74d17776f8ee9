"""Routers package initialization."""

from .experiments import router as experiments_router

__all__ = ["experiments_router"]
