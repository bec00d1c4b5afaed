"""Multi-objective Bayesian optimization over discrete compositional spaces
with a preference-conditioned flow-network sampler."""

__version__ = "0.1.0"
