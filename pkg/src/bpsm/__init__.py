"""Standard and Bayesian propensity score matching for the average treatment effect on the treated."""

__version__ = "0.1.0"
