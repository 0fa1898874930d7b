"""Simulator and inversion pipeline for metric recovery from internal
transport-map measurement fields on a periodic 2-manifold."""

__version__ = "0.1.0"

from .grid import (CovectorField, GridSpec, MetricField, ScalarField,  # noqa: F401
                   VectorField)
