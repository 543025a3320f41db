"""Game-theoretic predictive overtaking: controllers, simulator, analysis."""

__version__ = "0.1.0"
