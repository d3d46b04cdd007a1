"""Feature-to-solution proxies for parametric constrained optimization.

Train a network to map observable features straight to near-optimal,
near-feasible decisions, and compare against predict-then-optimize
pipelines on regret, feasibility, and inference speed.
"""

__version__ = "0.1.0"
