"""Quantum action laboratory.

Fits local quantum actions to Euclidean transition amplitudes, checks the
ground-state / Riccati / SUSY relations in one dimension and compares the
classical and quantum-action phase space of a mixed 2D system.
"""

__version__ = "0.1.0"
