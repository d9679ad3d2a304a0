"""Distributed ADMM-DDP trajectory optimization with a differentiable backward pass."""

__version__ = "0.1.0"
