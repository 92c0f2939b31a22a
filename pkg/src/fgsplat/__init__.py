"""Feed-forward feature-augmented Gaussian splatting.

A desk-scale novel-view-synthesis stack built on a from-scratch autodiff
engine: differentiable tile rasterization of feature-carrying 3D Gaussians,
a dual-domain (frequency + spatial) detail branch, a toy multi-view
transformer that predicts one Gaussian per pixel, and a one-step
feature-guided refiner.
"""

__version__ = "0.1.0"
