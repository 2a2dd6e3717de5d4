"""Generative spatial-message communication for heterogeneous collaborative perception."""

__version__ = "0.1.0"
