"""Imitation-from-observation benchmark suite.

Learns a latent policy offline from state-only demonstrations, grounds the
latent actions with a few environment interactions, and compares against
behavioral cloning baselines on classic control tasks.
"""

__version__ = "0.1.0"
