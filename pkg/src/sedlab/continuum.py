"""Grid solvers for the macroscopic sedimentation systems.

Three coupled transport/Stokes systems are supported, all of the shape

    -Delta v + grad p = (source),   div v = 0,
    d_t rho + (v + drift) . grad rho = 0,

differing in the velocity law: TAU uses the bare Stokes solve of tau*g,
RHO adds the Einstein strain correction built from a lockstep-evolved
tau, and RHO_EFF solves the effective-viscosity fixed point.

Stokes solves are spectral on a zero-padded grid.  The multiplier is
v_hat = (k^2 I - k kT) Bhat(k) f_hat, where Bhat is the Fourier
transform of the radially truncated biharmonic kernel

    B_L(x) = -|x| / (8 pi) * 1_{|x| <= L},      L = half the padded edge.

Sampling the truncated transform instead of the raw 1/k^4 removes the
periodic images of the padded box: the discrete solve then agrees with
the free-space convolution for every source/target pair closer than L
(the raw multiplier is the L -> infinity limit but carries O(1/L) image
error from the box periodization).  Sources must therefore stay well
inside the unpadded box; see ``stokes_solve`` for the guard.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.fft as sfft


class BoundaryTruncationError(ValueError):
    """Source mass sits too close to the padded boundary for a clean solve."""


class ContractionError(RuntimeError):
    """The effective-viscosity fixed point is outside its contraction regime."""


def _next_pow2(n):
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass(frozen=True)
class GridSpec:
    """Uniform node-centered grid: node (i,j,k) sits at origin + (i,j,k)*cell.

    ``padding_factor`` controls the zero-padded box used for free-space
    convolutions; padded dimensions are rounded up to powers of two.
    """

    origin: tuple
    cell: float
    dims: tuple
    padding_factor: float = 2.0

    def __post_init__(self):
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise ValueError("origin and dims must have three components")
        if not self.cell > 0:
            raise ValueError("cell spacing must be positive")
        if any(int(n) != n or n < 1 for n in self.dims):
            raise ValueError("dims must be positive integers")
        if self.padding_factor < 2:
            raise ValueError("padding_factor must be >= 2")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))

    @property
    def padded_dims(self):
        return tuple(_next_pow2(int(np.ceil(n * self.padding_factor))) for n in self.dims)

    @property
    def box_lengths(self):
        """Extent of the node hull along each axis."""
        return tuple((n - 1) * self.cell for n in self.dims)

    def axes(self):
        o = self.origin
        return tuple(o[a] + self.cell * np.arange(self.dims[a]) for a in range(3))

    def nodes(self):
        """All node coordinates, shape (nx, ny, nz, 3)."""
        x, y, z = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([x, y, z], axis=-1)

    def cell_volume(self):
        return self.cell**3


def _as_grid_array(values, dims, ncomp=None):
    arr = np.asarray(values, dtype=float)
    want = tuple(dims) if ncomp is None else tuple(dims) + (ncomp,)
    if arr.shape != want:
        raise ValueError(f"field values have shape {arr.shape}, expected {want}")
    return arr


def trilinear(values, grid, points, fill=0.0):
    """Trilinear interpolation of node data at arbitrary points.

    ``values`` is (nx,ny,nz) or (nx,ny,nz,c); points outside the node
    hull evaluate to ``fill``.
    """
    pts = np.asarray(points, dtype=float)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    rel = (pts - np.asarray(grid.origin)) / grid.cell
    n = np.asarray(grid.dims)
    inside = np.all((rel >= 0.0) & (rel <= n - 1), axis=1)
    # points exactly on the upper face belong to the last cell
    i0 = np.clip(np.floor(rel).astype(int), 0, n - 2)
    frac = rel - i0
    vec = values.ndim == 4
    out_shape = (len(pts), values.shape[3]) if vec else (len(pts),)
    out = np.zeros(out_shape)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                w = wx * wy * wz
                corner = values[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out += (w[:, None] if vec else w) * corner
    out[~inside] = fill
    return out[0] if squeeze else out


@dataclass
class DensityField:
    """Scalar density sampled at grid nodes (units: length^-3)."""

    grid: GridSpec
    values: np.ndarray
    total_mass: float = field(init=False)

    def __post_init__(self):
        vals = _as_grid_array(self.values, self.grid.dims)
        worst = vals.min()
        if worst < -1e-12:
            raise ValueError(f"density has negative values down to {worst:.3e}")
        self.values = np.clip(vals, 0.0, None)
        self.total_mass = float(self.values.sum() * self.grid.cell_volume())

    @classmethod
    def from_function(cls, grid, fn):
        """Sample ``fn(points) -> densities`` at the grid nodes."""
        pts = grid.nodes()
        vals = np.asarray(fn(pts.reshape(-1, 3)), dtype=float).reshape(grid.dims)
        return cls(grid, vals)

    def require_probability(self, tol=1e-3):
        if abs(self.total_mass - 1.0) > tol:
            raise ValueError(f"density mass {self.total_mass:.6f} is not 1 within {tol}")
        return self

    def sample(self, points):
        return trilinear(self.values, self.grid, points)

    def sup_norm(self):
        return float(self.values.max())


def polynomial_blob(grid, center, radius):
    """Compactly supported C^2 blob c (1 - |x-c|^2/r^2)^3_+ / r^3, mass 1.

    The normalizing constant is 315/(64 pi): the integral of (1-|y|^2)^3
    over the unit ball is 64 pi / 315.
    """
    c = np.asarray(center, dtype=float)
    cpsi = 315.0 / (64.0 * np.pi)

    def fn(pts):
        u2 = np.sum((pts - c) ** 2, axis=1) / radius**2
        return cpsi * np.clip(1.0 - u2, 0.0, None) ** 3 / radius**3

    return DensityField.from_function(grid, fn)


@dataclass
class VelocityField:
    """Vector field at grid nodes with a cached spectral divergence residual."""

    grid: GridSpec
    values: np.ndarray
    divergence_norm: float = None

    def __post_init__(self):
        self.values = _as_grid_array(self.values, self.grid.dims, ncomp=3)
        if self.divergence_norm is None:
            self.divergence_norm = _spectral_divergence_residual(self.grid, self.values)

    def sample(self, points):
        return trilinear(self.values, self.grid, points)

    def magnitude(self):
        return float(np.sqrt(np.mean(np.sum(self.values**2, axis=-1))))

    def max_speed(self):
        return float(np.sqrt(np.sum(self.values**2, axis=-1)).max())


def _truncated_biharmonic_hat(kmag, L):
    """FT of -|x|/(8 pi) 1_{|x|<=L}; entire in k, value -L^4/8 at k=0.

    Exact form (L^2 k^2 cos(Lk)/2 - Lk sin(Lk) - cos(Lk) + 1)/k^4 is
    evaluated with a series branch below Lk = 0.1 to dodge cancellation.
    """
    x = kmag * L
    small = x < 0.1
    xs = np.where(small, 1.0, x)  # safe denominator for the exact branch
    exact = (0.5 * xs**2 * np.cos(xs) - xs * np.sin(xs) - np.cos(xs) + 1.0) / xs**4
    series = -(1.0 / 8.0) + x**2 / 72.0 - x**4 / 1920.0
    return np.where(small, series, exact) * L**4


class _StokesWorkspace:
    """Padded-grid FFT plans and multipliers, cached per GridSpec."""

    _cache = {}

    def __new__(cls, grid):
        ws = cls._cache.get(grid)
        if ws is None:
            ws = super().__new__(cls)
            ws._build(grid)
            cls._cache[grid] = ws
        return ws

    def _build(self, grid):
        self.grid = grid
        self.pdims = grid.padded_dims
        h = grid.cell
        nx, ny, nz = self.pdims
        kx = 2.0 * np.pi * sfft.fftfreq(nx, d=h)
        ky = 2.0 * np.pi * sfft.fftfreq(ny, d=h)
        kz = 2.0 * np.pi * sfft.rfftfreq(nz, d=h)
        self.kvec = (
            kx[:, None, None],
            ky[None, :, None],
            kz[None, None, :],
        )
        self.k2 = kx[:, None, None] ** 2 + ky[None, :, None] ** 2 + kz[None, None, :] ** 2
        self.L = 0.5 * h * min(self.pdims)
        kmag = np.sqrt(self.k2)
        free = _truncated_biharmonic_hat(kmag, self.L)
        # Blend into the periodic 1/k^4 beyond ~a third of the grid band.
        # The image error of 1/k^4 is a smooth low-k effect, fully carried
        # by the truncated branch; the truncated transform, however, keeps
        # oscillating like L^2/k^2 at high k, so k-derivatives of it grow
        # without bound and repeated application (the effective-viscosity
        # iteration) would exponentially amplify any broadband floor.  The
        # periodic branch restores the bounded composed symbol up there.
        k4 = self.k2**2
        k4[self.k2 == 0.0] = 1.0
        periodic = 1.0 / k4
        periodic[self.k2 == 0.0] = 0.0
        chi = np.exp(-((kmag / (0.35 * np.pi / h)) ** 12))
        self.bhat = periodic + chi * (free - periodic)

    def pad(self, vals):
        """Zero-pad trailing side; vals has shape dims or dims+(c,)."""
        nx, ny, nz = self.grid.dims
        if vals.ndim == 3:
            out = np.zeros(self.pdims)
            out[:nx, :ny, :nz] = vals
        else:
            out = np.zeros(self.pdims + (vals.shape[3],))
            out[:nx, :ny, :nz] = vals
        return out

    def crop(self, vals):
        nx, ny, nz = self.grid.dims
        return vals[:nx, :ny, :nz].copy()

    def fft(self, vals):
        return sfft.rfftn(vals, axes=(0, 1, 2))

    def ifft(self, spec):
        return sfft.irfftn(spec, s=self.pdims, axes=(0, 1, 2))

    def project(self, fhat):
        """Apply (k^2 I - k kT) Bhat to a stacked spectrum (..., 3)."""
        kdotf = sum(self.kvec[a] * fhat[..., a] for a in range(3))
        vhat = np.empty_like(fhat)
        for a in range(3):
            vhat[..., a] = self.bhat * (self.k2 * fhat[..., a] - self.kvec[a] * kdotf)
        return vhat

    def divergence_residual(self, vhat):
        div = sum(self.kvec[a] * vhat[..., a] for a in range(3))
        den = 0.0
        for a in range(3):
            den += self.k2 * np.abs(vhat[..., a]) ** 2
        num = np.sqrt(np.sum(np.abs(div) ** 2))
        den = np.sqrt(np.sum(den))
        return float(num / den) if den > 0 else 0.0

    def strain_hat(self, vhat):
        """Spectral symmetric gradient, returned as a (..., 3, 3) stack."""
        shat = np.empty(vhat.shape[:-1] + (3, 3), dtype=complex)
        for a in range(3):
            for b in range(a, 3):
                s = 0.5j * (self.kvec[a] * vhat[..., b] + self.kvec[b] * vhat[..., a])
                shat[..., a, b] = s
                shat[..., b, a] = s
        return shat

    def matrix_divergence_hat(self, mat):
        """FFT of div(M) for a real symmetric matrix field M (..., 3, 3)."""
        mhat = sfft.rfftn(mat, axes=(0, 1, 2))
        dhat = np.empty(mhat.shape[:-2] + (3,), dtype=complex)
        for a in range(3):
            dhat[..., a] = 1j * sum(self.kvec[b] * mhat[..., a, b] for b in range(3))
        return dhat


def _spectral_divergence_residual(grid, values):
    ws = _StokesWorkspace(grid)
    vhat = ws.fft(ws.pad(values))
    return ws.divergence_residual(vhat)


def _check_boundary_clearance(grid, source_abs):
    """Enforce source decay inside the unpadded box.

    Two guards: the boundary shell must carry under 1% of the source
    magnitude (truncation), and its peak must sit below 1e-6 of the
    global peak (decay).  Tails that reach the boundary put source/target
    pairs beyond the kernel truncation radius, which quietly corrupts the
    solution (and destabilizes the effective-viscosity iteration), so
    both violations are hard errors.
    """
    total = float(source_abs.sum())
    if total == 0.0:
        return
    peak = float(source_abs.max())
    if min(grid.dims) > 4:
        interior = float(source_abs[2:-2, 2:-2, 2:-2].sum())
        shell_peak = source_abs.copy()
        shell_peak[2:-2, 2:-2, 2:-2] = 0.0
        shell_peak = float(shell_peak.max())
    else:
        interior, shell_peak = 0.0, peak
    shell = total - interior
    if shell > 1e-2 * total:
        raise BoundaryTruncationError(
            f"{shell / total:.1%} of the source magnitude lies within two nodes "
            "of the unpadded boundary; enlarge the box"
        )
    if shell_peak > 1e-6 * peak:
        raise BoundaryTruncationError(
            f"source decays only to {shell_peak / peak:.1e} of its peak at the "
            "unpadded boundary (need 1e-6); enlarge the box"
        )


def body_force(rho, gravity):
    """The force density rho(x) * g as a vector field on rho's grid."""
    g = np.asarray(gravity, dtype=float)
    vals = rho.values[..., None] * g
    return VelocityField(rho.grid, vals, divergence_norm=float("nan"))


def stokes_solve(source):
    """Free-space Stokes solve -Delta v + grad p = f, div v = 0.

    ``source`` is a VelocityField-shaped force density (use body_force to
    build rho*g).  The result is divergence-free to spectral accuracy and
    matches the free-space convolution with the Oseen tensor for targets
    within half a padded box of the sources.
    """
    grid = source.grid
    _check_boundary_clearance(grid, np.linalg.norm(source.values, axis=-1))
    ws = _StokesWorkspace(grid)
    fhat = ws.fft(ws.pad(source.values))
    vhat = ws.project(fhat)
    res = ws.divergence_residual(vhat)
    v = ws.crop(ws.ifft(vhat))
    return VelocityField(grid, v, divergence_norm=res)


def _einstein_correction_hat(ws, tau_pad, vhat, phi):
    """Spectrum of the Stokes solve of div(5 phi tau S), S = strain of vhat."""
    shat = ws.strain_hat(vhat)
    strain = ws.ifft(shat)
    mat = (5.0 * phi) * tau_pad[..., None, None] * strain
    dhat = ws.matrix_divergence_hat(mat)
    return ws.project(dhat)


def einstein_strain_correction(tau, setup):
    """Velocity correction from the suspension's Einstein stress.

    Computes the strain S of the Stokes flow driven by tau*g, then solves
    Stokes again with source div(5 phi tau S).  This is the weak form of
    the dipole term: each volume element of particle phase responds to
    the local strain with a stresslet of strength 5 phi.
    """
    if tau.total_mass == 0.0 or setup.volume_fraction == 0.0:
        return VelocityField(tau.grid, np.zeros(tau.grid.dims + (3,)), divergence_norm=0.0)
    tau.require_probability()
    grid = tau.grid
    g = setup.gravity_vector
    _check_boundary_clearance(grid, tau.values * np.linalg.norm(g))
    ws = _StokesWorkspace(grid)
    tau_pad = ws.pad(tau.values)
    fhat = ws.fft(tau_pad[..., None] * g)
    vhat = ws.project(fhat)
    chat = _einstein_correction_hat(ws, tau_pad, vhat, setup.volume_fraction)
    res = ws.divergence_residual(chat)
    return VelocityField(grid, ws.crop(ws.ifft(chat)), divergence_norm=res)


@dataclass
class EffectiveSolveResult:
    field: VelocityField
    iterations: int
    updates: list
    residual: float = 0.0


def solve_effective_velocity(rho, setup, tol=1e-10, max_iter=60):
    """Fixed point u = Stokes(rho g + 5 phi div(rho e(u))).

    Requires the contraction margin 5 phi ||rho||_inf < 0.5.  Iterates in
    spectral space from u0 = Stokes(rho g); each relative update must
    shrink geometrically, otherwise a ContractionError is raised.
    """
    rho.require_probability()
    phi = setup.volume_fraction
    if 5.0 * phi * rho.sup_norm() >= 0.5:
        raise ContractionError(
            f"5 phi ||rho||_inf = {5 * phi * rho.sup_norm():.3f} >= 0.5; "
            "outside the contraction regime"
        )
    grid = rho.grid
    g = setup.gravity_vector
    _check_boundary_clearance(grid, rho.values * np.linalg.norm(g))
    ws = _StokesWorkspace(grid)
    rho_pad = ws.pad(rho.values)
    u0hat = ws.project(ws.fft(rho_pad[..., None] * g))
    if phi == 0.0:
        res = ws.divergence_residual(u0hat)
        return EffectiveSolveResult(
            VelocityField(grid, ws.crop(ws.ifft(u0hat)), divergence_norm=res), 1, [0.0]
        )
    uhat = u0hat
    unorm = np.sqrt(np.sum(np.abs(uhat) ** 2))
    updates = []
    grew = 0
    for it in range(1, max_iter + 1):
        unew = u0hat + _einstein_correction_hat(ws, rho_pad, uhat, phi)
        upd = float(np.sqrt(np.sum(np.abs(unew - uhat) ** 2)) / max(unorm, 1e-300))
        updates.append(upd)
        uhat = unew
        unorm = np.sqrt(np.sum(np.abs(uhat) ** 2))
        if upd < tol:
            break
        if len(updates) >= 2 and updates[-1] >= updates[-2]:
            grew += 1
            if grew >= 2:
                raise ContractionError(
                    f"fixed-point updates stopped contracting: {updates[-3:]}"
                )
        else:
            grew = 0
    else:
        raise ContractionError(f"no convergence to {tol} within {max_iter} iterations")
    # weak-form residual of the returned iterate, measured on the padded
    # spectrum (the cropped field alone cannot reproduce it: the velocity
    # extends into the padding)
    final_corr = _einstein_correction_hat(ws, rho_pad, uhat, phi)
    residual = float(
        np.sqrt(np.sum(np.abs(uhat - u0hat - final_corr) ** 2)) / max(unorm, 1e-300)
    )
    res = ws.divergence_residual(uhat)
    return EffectiveSolveResult(
        VelocityField(grid, ws.crop(ws.ifft(uhat)), divergence_norm=res),
        it,
        updates,
        residual,
    )


def transport_step(rho, vel, drift, dt):
    """Semi-Lagrangian step of d_t rho + (vel + drift).grad rho = 0.

    Backtraces each node one RK2 (midpoint) step through the advecting
    field, interpolates rho trilinearly at the foot, and renormalizes the
    total mass to its pre-step value (warning if the correction exceeds
    1e-3).  Feet may leave the node hull (density zero there) but not the
    padded box.
    """
    grid = rho.grid
    if dt == 0.0:
        return DensityField(grid, rho.values.copy())
    drift = np.asarray(drift, dtype=float)
    w = vel.values + drift
    nodes = grid.nodes().reshape(-1, 3)
    w1 = w.reshape(-1, 3)
    mid = nodes - 0.5 * dt * w1
    w2 = trilinear(w, grid, mid, fill=np.nan)
    # outside the hull the advecting field is taken as pure drift
    outside = np.isnan(w2[:, 0])
    w2[outside] = drift
    feet = nodes - dt * w2
    margin = np.array([(p - d) * grid.cell for p, d in zip(grid.padded_dims, grid.dims)])
    lo = np.asarray(grid.origin) - margin / 2
    hi = np.asarray(grid.origin) + (np.asarray(grid.dims) - 1) * grid.cell + margin / 2
    if np.any(feet < lo) or np.any(feet > hi):
        raise ValueError("backtrace exits the padded domain; reduce dt or enlarge box")
    new_vals = trilinear(rho.values, grid, feet, fill=0.0).reshape(grid.dims)
    new_mass = new_vals.sum() * grid.cell_volume()
    if new_mass > 0.0 and rho.total_mass > 0.0:
        correction = rho.total_mass / new_mass
        if abs(correction - 1.0) > 1e-3:
            warnings.warn(
                f"transport mass correction {correction - 1.0:+.2e} exceeds 1e-3",
                stacklevel=2,
            )
        new_vals = new_vals * correction
    return DensityField(grid, new_vals)


class MacroSystem(Enum):
    TAU = "tau"
    RHO = "rho"
    RHO_EFF = "rho_eff"


def evolve_system(which, rho0, setup, t_end, dt, output_stride=1):
    """March one of the macroscopic systems, returning (t, density, velocity).

    TAU:     v = Stokes(tau g)
    RHO:     u = Stokes(rho g) + Einstein correction built from tau, where
             tau is evolved in lockstep from the same initial data
    RHO_EFF: u from the effective-viscosity fixed point

    All three advect with the uniform settling drift g/(6 pi N R) added to
    the velocity.  Snapshots are emitted every ``output_stride`` steps,
    always including t=0 and t_end.
    """
    which = MacroSystem(which)
    rho0.require_probability()
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be an integer number of steps")
    drift = setup.gravity_vector / (6.0 * np.pi * setup.interaction_strength)

    def velocity(state):
        if which is MacroSystem.TAU:
            return stokes_solve(body_force(state["rho"], setup.gravity_vector))
        if which is MacroSystem.RHO:
            u = stokes_solve(body_force(state["rho"], setup.gravity_vector))
            corr = einstein_strain_correction(state["tau"], setup)
            return VelocityField(
                state["rho"].grid,
                u.values + corr.values,
                divergence_norm=max(u.divergence_norm, corr.divergence_norm),
            )
        return solve_effective_velocity(state["rho"], setup).field

    state = {"rho": rho0}
    if which is MacroSystem.RHO:
        state["tau"] = rho0
    out = []
    t = 0.0
    vel = velocity(state)
    out.append((t, state["rho"], vel))
    for step in range(1, n_steps + 1):
        if which is MacroSystem.RHO:
            v_tau = stokes_solve(body_force(state["tau"], setup.gravity_vector))
            state["tau"] = transport_step(state["tau"], v_tau, drift, dt)
        state["rho"] = transport_step(state["rho"], vel, drift, dt)
        t = step * dt
        vel = velocity(state)
        if step % output_stride == 0 or step == n_steps:
            out.append((t, state["rho"], vel))
    return out


# ----------------------------------------------------------------- file I/O

def save_field(path, fld):
    """Raw little-endian float64 blob (x-fastest) plus a text sidecar header."""
    vals = fld.values
    kind = "velocity" if vals.ndim == 4 else "density"
    blocks = []
    if kind == "velocity":
        for c in range(3):
            blocks.append(vals[..., c].astype("<f8").tobytes(order="F"))
    else:
        blocks.append(vals.astype("<f8").tobytes(order="F"))
    with open(path, "wb") as fh:
        for b in blocks:
            fh.write(b)
    g = fld.grid
    header = (
        f"kind {kind}\n"
        f"origin {g.origin[0]!r} {g.origin[1]!r} {g.origin[2]!r}\n"
        f"cell {g.cell!r}\n"
        f"dims {g.dims[0]} {g.dims[1]} {g.dims[2]}\n"
        f"padding {g.padding_factor!r}\n"
    )
    with open(str(path) + ".hdr", "w") as fh:
        fh.write(header)


def load_field(path):
    meta = {}
    with open(str(path) + ".hdr") as fh:
        for line in fh:
            key, *rest = line.split()
            meta[key] = rest
    dims = tuple(int(v) for v in meta["dims"])
    grid = GridSpec(
        origin=tuple(float(v) for v in meta["origin"]),
        cell=float(meta["cell"][0]),
        dims=dims,
        padding_factor=float(meta["padding"][0]),
    )
    raw = np.fromfile(path, dtype="<f8")
    n = int(np.prod(dims))
    if meta["kind"][0] == "velocity":
        comps = [raw[c * n : (c + 1) * n].reshape(dims, order="F") for c in range(3)]
        return VelocityField(grid, np.stack(comps, axis=-1))
    return DensityField(grid, raw.reshape(dims, order="F"))
