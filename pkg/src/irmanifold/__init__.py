"""Simulation and generative-manifold reconstruction for free-breathing ungated IR cardiac MRI."""

__version__ = "0.1.0"
