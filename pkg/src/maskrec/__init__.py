"""Desk-scale transformer sequential recommender with hierarchical attention masking."""

__version__ = "0.1.0"
