"""Verifiable ML pipeline: committed data, proved stages, hash-linked stage log."""

from .errors import PipelineError

__version__ = "0.1.0"

__all__ = ["PipelineError", "__version__"]
