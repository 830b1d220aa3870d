"""Temperature-conditional normalizing-flow variational inference engine."""

__version__ = "0.1.0"
