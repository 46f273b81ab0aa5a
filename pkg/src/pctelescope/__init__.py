"""Telescoping preconditioners on simulated distributed-memory ranks."""
from .comm import Communicator, DeadlockError, RankFailure, spawn_world

__version__ = "0.1.0"

__all__ = ["Communicator", "DeadlockError", "RankFailure", "spawn_world", "__version__"]
