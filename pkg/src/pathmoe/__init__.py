"""Knowledge-graph link prediction with mixtures of length and pruning experts."""

__version__ = "0.1.0"
