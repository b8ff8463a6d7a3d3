"""Desk-scale laboratory for learning and verifying event-triggered control.

Subpackages cover plant simulation, a minimal dense-network engine, the
option-based ETC policy set, the joint PPO trainer, classical ETC baselines,
a ReLU branch-and-bound stability verifier, and the verify-refine loop.
"""

__version__ = "0.1.0"
