"""Personalized federated learning with Gaussian generative modeling."""

__version__ = "0.1.0"
