"""Per-frame mass flow regression from run-level aggregate weights."""

__version__ = "0.1.0"
