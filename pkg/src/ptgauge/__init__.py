"""Quantum dynamics in the parallel-transport gauge."""
