"""Desk-scale toolkit for a two-species kinetic plasma model.

Two charged species evolve under free streaming, a self-consistent
electrostatic field (Poisson with zero-Neumann data), hard-sphere collisions,
and diffuse reflection at the boundary of a bounded convex domain.  The
package provides the discrete building blocks (domains, phase-space grids,
collision kernels, hydrodynamic projections, field solves, backward
characteristics, the kinetic distance function), a Picard-type iteration
solver for the perturbation around the global Maxwellian, and a verification
harness that checks every computable identity behind them.
"""

__version__ = "0.1.0"
