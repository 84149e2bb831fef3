"""Spectral convex-integration constructions for active scalar equations."""
