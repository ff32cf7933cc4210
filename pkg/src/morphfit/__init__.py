"""Differentiable face rendering and inverse rendering in plain numpy.

Submodules:

* geometry: meshes, weak-perspective cameras, cylindrical unwarp
* render: software Z-buffer rasterizer with analytic gradients
* model: linear (PCA) and MLP morphable shape/texture models
* loss: reconstruction, landmark and pretraining losses, error metrics
* fit: gradient-descent fitting drivers (Adam / plain GD)
* synth: procedural head family used for tests and demos
* gradcheck: finite-difference verification harnesses
* cli: command-line entry points
"""

__version__ = "0.1.0"

from . import geometry, render, model, loss, fit, synth, gradcheck  # noqa: F401,E402
