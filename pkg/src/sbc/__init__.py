"""Structured Bayesian compression of small neural networks."""
