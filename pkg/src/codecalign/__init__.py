"""Desk-scale laboratory for preference alignment of codec-token models.

A seeded synthetic world generates "golden" layered codec tokens from an
exactly computable conditional distribution.  A small autoregressive
transformer is fit to that world, preference pairs (golden vs. sampled)
are built from it, and several preference-optimization methods plus an
iterative self-improvement loop are run and measured against the world's
exact likelihoods.
"""

__version__ = "0.1.0"
