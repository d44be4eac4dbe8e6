"""Generalization error of one-step gradient descent and least squares under Gaussian design."""

__version__ = "0.1.0"
