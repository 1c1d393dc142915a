"""Numerical laboratory for multivariable Langevin dynamics: equilibrium laws,
the density equation on phase-space grids, particle simulation, relative
entropy dissipation and the spectrum of the linearised log-ratio flow."""

__version__ = "0.1.0"

from . import errors  # noqa: E402,F401
from .model import (ModelSpec, PositionSpace, build_model, harmonic, pendulum,  # noqa: E402,F401
                    tabulated, variable_mass_pendulum)
