"""Specific-target action recognition from video clips.

A mixed-convolution residual backbone shares its per-frame 2D stages
between a region proposal network (which localizes one target per frame)
and a 3D action head that classifies the motion of the cropped target.
Everything runs on a small numpy-backed autodiff engine.
"""

from .tensor import Parameter, Tensor, no_grad, using_dtype

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "no_grad", "using_dtype", "__version__"]
