"""Local discontinuous Galerkin solvers for Dirichlet boundary control of
convection-diffusion equations, with convergence-study drivers."""

__version__ = "0.1.0"
