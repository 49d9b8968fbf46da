"""Learned gradient flow: surrogate ODEs for optimizer dynamics."""
