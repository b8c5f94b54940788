"""Counterfactual explanations for molecular property predictors via a valence-constrained DQN edit agent."""

__version__ = "0.1.0"
