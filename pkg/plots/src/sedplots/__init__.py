"""Figure rendering for sweep outputs (records.csv / fits.json)."""

from .figures import FigureKind, FigureSpec, SchemaError, render

__all__ = ["FigureKind", "FigureSpec", "SchemaError", "render"]
