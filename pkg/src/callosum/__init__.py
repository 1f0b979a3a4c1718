"""Exact machine unlearning for spatio-temporal graph forecasting."""

from .errors import CallosumError, CertificateError, FrozenModelError, ValidationError
from .stgraph import (DeletionRequest, ForecastTask, MetricsReport, STGraph, compute_metrics,
                      generate_synthetic, ingest_csv)

__version__ = "0.1.0"

__all__ = ["CallosumError", "CertificateError", "FrozenModelError", "ValidationError",
           "DeletionRequest", "ForecastTask", "MetricsReport", "STGraph", "compute_metrics",
           "generate_synthetic", "ingest_csv"]
