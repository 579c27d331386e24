"""Numerical laboratory for sedimentation in Stokes flow.

Explicit hydrodynamic kernels, particle microdynamics, macroscopic
transport-Stokes solvers (including the first-order effective-viscosity
correction), and exact optimal-transport diagnostics for comparing them.
"""

from sedlab.kernels import (
    KernelDomainError,
    PhysicalSetup,
    oseen,
    oseen_laplacian,
    single_particle_field,
    stokeslet_strain,
    stresslet_velocity,
)

__all__ = [
    "KernelDomainError",
    "PhysicalSetup",
    "oseen",
    "oseen_laplacian",
    "single_particle_field",
    "stokeslet_strain",
    "stresslet_velocity",
]
