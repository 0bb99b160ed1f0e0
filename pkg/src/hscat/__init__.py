"""Learned image codec: attention transforms, hyperprior entropy model and range coder."""

__version__ = "0.1.0"
