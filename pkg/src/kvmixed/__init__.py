"""Primal-dual mixed finite elements for unique continuation and diffusivity reconstruction in 2D."""

__version__ = "0.1.0"

from ._accel import backend  # noqa: E402
