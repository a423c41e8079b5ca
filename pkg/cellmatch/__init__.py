"""Cycle-consistent multi-graph matching and Gaussian atlas learning for
stereotyped point-cloud instances."""

__version__ = '0.3.0'
