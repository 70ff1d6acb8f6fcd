"""Portfolio-management RL training and multi-axis compass evaluation."""

__version__ = "0.1.0"
