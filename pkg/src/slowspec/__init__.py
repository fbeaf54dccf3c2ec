"""Variational estimation of slow processes in 1D stochastic dynamics."""
