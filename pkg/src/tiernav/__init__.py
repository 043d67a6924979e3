"""Tiered aerial navigation testbed.

Synthetic-city simulator, shortest-path teacher, map-encoder policy,
staged imitation + policy-gradient training, benchmark harness.
"""

__version__ = "0.1.0"
