"""Fault-tolerance control plane for large synchronous training jobs, run inside a discrete-event simulator."""

__version__ = "0.1.0"
