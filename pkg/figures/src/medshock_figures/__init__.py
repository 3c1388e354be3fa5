"""Render figures from medshock result files.

Reads the estimator's CSV outputs (results, subsamples, balance tables) and
writes event-study, forest, dose-response, and covariate-balance plots.
"""

__version__ = "0.1.0"

from medshock_figures.render import FIGURE_KINDS, FigureSpec, RenderResult, SchemaError, render

__all__ = ["FIGURE_KINDS", "FigureSpec", "RenderResult", "SchemaError", "render"]
