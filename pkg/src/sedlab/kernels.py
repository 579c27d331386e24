"""Closed-form hydrodynamic kernels for sedimenting spheres in Stokes flow.

Everything is dimensionless.  ``oseen`` is the fundamental solution of the
steady Stokes equations (velocity response to a point force), and the other
kernels are the exact derived fields a force- and torque-balanced rigid
sphere produces: the single-particle velocity field, the rate-of-strain of a
Stokeslet, and the velocity induced by a symmetric force dipole (stresslet).

The closed forms below were frozen against a symbolic differentiation oracle
of the Oseen tensor; the sign of the Laplacian term in
``single_particle_field`` is the one that makes the field continuous at the
sphere surface (it agrees with the classical translating-sphere solution
``(1 + R^2 lap / 6) Phi F``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Below this distance a kernel evaluation is considered singular.  Callers
#: must exclude self-interaction instead of relying on clamping.
SINGULARITY_CUTOFF = 1e-12


class KernelDomainError(ValueError):
    """Kernel evaluated at (or numerically at) the singular point x = 0."""


@dataclass(frozen=True)
class PhysicalSetup:
    """Global parameters of the sedimentation problem.

    ``gravity`` is the dimensionless force per particle direction/magnitude,
    ``particle_count`` is N and ``radius`` is the common sphere radius R.
    The derived quantities are the volume fraction phi = (4 pi / 3) N R^3
    and the interaction strength gamma = N R.
    """

    gravity: tuple[float, float, float]
    particle_count: int
    radius: float

    def __post_init__(self):
        g = np.asarray(self.gravity, dtype=float)
        if g.shape != (3,) or not np.all(np.isfinite(g)):
            raise ValueError("gravity must be a finite 3-vector")
        if self.particle_count < 1 or int(self.particle_count) != self.particle_count:
            raise ValueError("particle_count must be a positive integer")
        if not (self.radius > 0.0 and np.isfinite(self.radius)):
            raise ValueError("radius must be a positive real")
        object.__setattr__(self, "gravity", tuple(float(c) for c in g))

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array(self.gravity, dtype=float)

    @property
    def volume_fraction(self) -> float:
        return (4.0 * np.pi / 3.0) * self.particle_count * self.radius**3

    @property
    def interaction_strength(self) -> float:
        return self.particle_count * self.radius

    @property
    def settling_speed(self) -> float:
        """|g| / (6 pi N R), the self-induced speed of a single particle."""
        return float(np.linalg.norm(self.gravity)) / (
            6.0 * np.pi * self.particle_count * self.radius
        )

    @classmethod
    def from_volume_fraction(cls, gravity, particle_count, volume_fraction):
        """Construct the setup with R derived from a prescribed phi."""
        radius = (3.0 * volume_fraction / (4.0 * np.pi * particle_count)) ** (1.0 / 3.0)
        return cls(tuple(gravity), particle_count, radius)


def require_symmetric(s, tol=1e-10):
    """Validate a (batch of) strain matrix(es); returns the array unchanged."""
    s = np.asarray(s, dtype=float)
    if s.shape[-2:] != (3, 3):
        raise ValueError("strain matrix must be 3x3")
    scale = max(1.0, float(np.max(np.abs(s))) if s.size else 1.0)
    if np.max(np.abs(s - np.swapaxes(s, -1, -2))) > tol * scale:
        raise ValueError("strain matrix is not symmetric within tolerance")
    return s


def _radii(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError("kernel argument must have a trailing dimension of 3")
    r = np.linalg.norm(x, axis=-1)
    if np.any(r < SINGULARITY_CUTOFF):
        raise KernelDomainError("kernel evaluated within %.0e of the origin"
                                % SINGULARITY_CUTOFF)
    return x, r


def oseen(x):
    """Oseen tensor Phi(x) = (1/8pi)(I/|x| + x (x) x / |x|^3).

    Accepts a single 3-vector or any (..., 3) batch; returns (..., 3, 3).
    Symmetric, even in x, homogeneous of degree -1.
    """
    x, r = _radii(x)
    eye = np.eye(3)
    outer = x[..., :, None] * x[..., None, :]
    return (eye / r[..., None, None] + outer / r[..., None, None] ** 3) / (8.0 * np.pi)


def oseen_laplacian(x):
    """Vector Laplacian of the Oseen tensor: (1/4pi)(I - 3 xh (x) xh)/|x|^3.

    Traceless and homogeneous of degree -3.  Coincides with grad p of the
    Stokeslet pressure away from the origin.
    """
    x, r = _radii(x)
    xh = x / r[..., None]
    outer = xh[..., :, None] * xh[..., None, :]
    return (np.eye(3) - 3.0 * outer) / (4.0 * np.pi * r[..., None, None] ** 3)


def stokeslet_strain(x, g):
    """Rate of strain e(Phi(.)g)(x) = ((x.g)/(8 pi |x|^3)) (I - 3 xh (x) xh).

    The antisymmetric parts of the Stokeslet gradient cancel exactly, so the
    result is symmetric, traceless and homogeneous of degree -2.
    """
    x, r = _radii(x)
    g = np.asarray(g, dtype=float)
    xh = x / r[..., None]
    xg = np.sum(x * g, axis=-1)
    outer = xh[..., :, None] * xh[..., None, :]
    pref = xg / (8.0 * np.pi * r**3)
    return pref[..., None, None] * (np.eye(3) - 3.0 * outer)


def stresslet_velocity(x, s, check=True):
    """Velocity at x induced by a symmetric force dipole S at the origin.

    Returns (1/8pi)[ x tr(S) - 3 x (xh . S xh) ] / |x|^3, the contraction of
    the e(Phi) three-tensor with S.  It is adjoint to ``stokeslet_strain``:
    a . stresslet_velocity(x, S) == S : stokeslet_strain(x, a) for all a.
    """
    x, r = _radii(x)
    s = require_symmetric(s) if check else np.asarray(s, dtype=float)
    xh = x / r[..., None]
    quad = np.einsum("...i,...ij,...j->...", xh, s, xh)
    tr = np.trace(s, axis1=-2, axis2=-1)
    return (x * (tr - 3.0 * quad)[..., None]) / (8.0 * np.pi * r[..., None] ** 3)


def single_particle_field(x, setup: PhysicalSetup):
    """Velocity field of one sphere dragged by the per-particle gravity g/N.

    Equals g/(6 pi N R) inside (and on) the sphere and
    (1/N) Phi(x) g + (R^2 / 6N) lap Phi(x) g outside; the two branches agree
    on |x| = R, which pins the sign of the Laplacian term.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError("position must have a trailing dimension of 3")
    g = setup.gravity_vector
    n_part, rad = setup.particle_count, setup.radius

    r = np.linalg.norm(x, axis=-1)
    inside = r <= rad
    # Evaluate the exterior branch on a safe copy of the inside points.
    x_safe = np.where(inside[..., None], np.array([2.0 * rad, 0.0, 0.0]), x)
    outer = (np.einsum("...ij,j->...i", oseen(x_safe), g)
             + rad**2 / 6.0 * np.einsum("...ij,j->...i", oseen_laplacian(x_safe), g)) / n_part
    rigid = g / (6.0 * np.pi * n_part * rad)
    return np.where(inside[..., None], rigid, outer)
