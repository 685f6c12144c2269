"""Desk-scale lab for measuring how nondeterminism-introducing (NI) factors
make identically configured just-in-time fault predictors disagree."""

__version__ = "0.1.0"
