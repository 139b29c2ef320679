"""Diffusion refinement of proposed driving paths, with a synthetic scene generator,
KS normality checks on proposal noise, and open-loop evaluation."""

__version__ = "0.1.0"
