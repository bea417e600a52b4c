"""Reinforcement fine-tuning toolkit for query-based recommendation.

Graph-shaped rewards, segment-aware token advantages, an online curriculum and
a clipped group-relative trainer for a small log-linear policy.
"""

__version__ = "0.1.0"
