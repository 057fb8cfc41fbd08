"""Layered terrain-sampling MPC for quadruped locomotion.

A gradient-free terrain-selection layer wrapped around parallel
fixed-mode real-time-iteration MPC instances, closed in a soft-contact
simulator, with a benchmark harness for the sampling-vs-heuristic
stepping-stone comparison.
"""

from .liegroup import State, state_ominus, state_oplus

__all__ = ["State", "state_oplus", "state_ominus"]
__version__ = "0.1.0"
