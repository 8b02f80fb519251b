"""Optimized Schwarz iteration for a hybridizable interior penalty DG
discretization of ``(eta - Laplace) u = f`` on polygonal domains."""

__version__ = "0.1.0"
