"""Policy-initialized Bayesian optimization with a feedback loop that
fine-tunes the initialization policy on the optimizer's own trajectories."""

from .core import Censored, Domain, Exact, Observation, Trajectory, Workload

__all__ = ["Censored", "Domain", "Exact", "Observation", "Trajectory", "Workload"]
__version__ = "0.1.0"
