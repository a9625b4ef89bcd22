"""Desk-scale curriculum reinforcement learning engine.

Knowledge hierarchy and difficulty-lattice corpora, verifier rewards with
principle-group aggregation, GRPO/SFT losses over a toy policy, a dynamic
curriculum scheduler and a two-dimensional evaluation harness.
"""

__version__ = "0.1.0"
