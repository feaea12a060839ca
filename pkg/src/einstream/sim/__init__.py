"""Streaming simulator: channels, node processes, scheduler."""

from .debug import drive
from .engine import SimConfig, SimReport, run

__all__ = ["SimConfig", "SimReport", "drive", "run"]
