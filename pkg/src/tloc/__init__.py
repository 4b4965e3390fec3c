"""Transfer-learning position recovery from cellular measurement reports."""

__version__ = "0.1.0"
