"""Multilevel preconditioning for the integral fractional Laplacian."""
