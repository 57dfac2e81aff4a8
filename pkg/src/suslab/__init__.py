"""Desk-scale lab for the silent-until-sparse backdoor against 2:4 semi-structured sparsity."""

__version__ = "0.1.0"
