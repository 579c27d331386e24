"""Particle dynamics under the hierarchy of mean-field velocity models.

MF0 moves every particle with its settling velocity plus the Stokeslets
of all the others.  MF1 adds the degree-one dipole correction: each
particle carries a stresslet proportional to the mean-field strain at
its center, and the flows those stresslets induce are summed.  Written
out, that correction is a triple sum; it factors into two quadratic
passes (strains first, stresslet flows second), which is what makes it
affordable.  MF1C replaces the particle sum by sampling a precomputed
continuum correction field (``einstein_strain_correction``) at the
particle positions.

``integrate`` advances a configuration with fixed-step RK4, recording
snapshots, separation statistics and the MF1-MF0 gap, and aborts with
``ContactError`` the moment two spheres touch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .configuration import (
    ConfigurationStats,
    ParticleConfiguration,
    compute_stats,
    min_pairwise_distance,
)
from .kernels import oseen, stokeslet_strain, stresslet_velocity

#: Target rows per chunk of the O(N^2) pair sums; keeps the (chunk, N, 3, 3)
#: kernel blocks around a few tens of MB at N = 4096.
_CHUNK = 128

#: Relative slack on 2R below which a step counts as contact.
_CONTACT_SLACK = 1e-6

VARIANTS = ("mf0", "mf1", "mf1c")


class ContactError(RuntimeError):
    """Two spheres reached contact distance during integration."""

    def __init__(self, time, pair, distance):
        self.time = float(time)
        self.pair = (int(pair[0]), int(pair[1]))
        self.distance = float(distance)
        super().__init__(
            f"particles {self.pair[0]} and {self.pair[1]} reached separation "
            f"{self.distance:.6e} at t={self.time:.6g}"
        )


@dataclass(frozen=True)
class VelocityModel:
    """Which velocity law drives the dynamics, plus its attached data.

    ``variant`` is one of ``mf0``, ``mf1``, ``mf1c``; the last one needs
    the continuum ``correction_field`` (a ``VelocityField`` that already
    contains the full dipole correction, 5 phi factor included).
    """

    variant: str
    correction_field: object = None

    def __post_init__(self):
        object.__setattr__(self, "variant", str(self.variant).lower())
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown velocity model {self.variant!r}; pick one of {VARIANTS}")
        if self.variant == "mf1c" and self.correction_field is None:
            raise ValueError("the mf1c model needs a continuum correction field")
        if self.variant != "mf1c" and self.correction_field is not None:
            raise ValueError("only the mf1c model takes a correction field")


# --------------------------------------------------------------------------
# pair sums (raw position arrays; RK stages may not satisfy the
# configuration's non-overlap invariant, so these cannot take a
# ParticleConfiguration)


def _pair_blocks(pos):
    """Yield (row slice, differences X_i - X_j with the diagonal masked).

    The self-difference is replaced by a unit placeholder so the kernels
    never see their singularity; callers zero the diagonal contribution.
    Chunked so the (rows, N, 3, 3) kernel tensors stay small.
    """
    n = len(pos)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        diff = pos[lo:hi, None, :] - pos[None, :, :]
        rows = np.arange(lo, hi)
        diff[rows - lo, rows] = (1.0, 0.0, 0.0)
        yield slice(lo, hi), rows, diff


def _stokeslet_sum(pos, g):
    """(1/N) sum_{j != i} Phi(X_i - X_j) g for every i."""
    n = len(pos)
    out = np.empty((n, 3))
    for sl, rows, diff in _pair_blocks(pos):
        block = np.einsum("...ij,j->...i", oseen(diff), g)
        block[rows - sl.start, rows] = 0.0
        out[sl] = block.sum(axis=1)
    return out / n


def _meanfield_strains(pos, g):
    """S_j = (1/N) sum_{k != j} e(Phi g)(X_j - X_k) for every j."""
    n = len(pos)
    out = np.empty((n, 3, 3))
    for sl, rows, diff in _pair_blocks(pos):
        block = stokeslet_strain(diff, g)
        block[rows - sl.start, rows] = 0.0
        out[sl] = block.sum(axis=1)
    return out / n


def _stresslet_sum(pos, strains):
    """(1/N) sum_{j != i} stresslet_velocity(X_i - X_j, S_j) for every i."""
    n = len(pos)
    out = np.empty((n, 3))
    for sl, rows, diff in _pair_blocks(pos):
        block = stresslet_velocity(diff, strains, check=False)
        block[rows - sl.start, rows] = 0.0
        out[sl] = block.sum(axis=1)
    return out / n


def _mf0(pos, setup):
    v = _stokeslet_sum(pos, setup.gravity_vector)
    v += setup.gravity_vector / (6.0 * np.pi * setup.particle_count * setup.radius)
    return v


def _mf1(pos, setup):
    strains = _meanfield_strains(pos, setup.gravity_vector)
    v = _mf0(pos, setup)
    v += (5.0 * setup.volume_fraction) * _stresslet_sum(pos, strains)
    return v


def _field_bounds(grid):
    lo = np.asarray(grid.origin, dtype=float)
    hi = lo + (np.asarray(grid.dims) - 1) * grid.cell
    return lo, hi


def _mf1c(pos, setup, field):
    lo, hi = _field_bounds(field.grid)
    if np.any(pos < lo) or np.any(pos > hi):
        worst = int(np.argmax(np.maximum(lo - pos, pos - hi).max(axis=1)))
        raise ValueError(
            f"particle {worst} at {pos[worst]} lies outside the correction "
            "field's grid; enlarge the field domain"
        )
    return _mf0(pos, setup) + field.sample(pos)


def _velocity(pos, setup, model):
    if model.variant == "mf0":
        return _mf0(pos, setup)
    if model.variant == "mf1":
        return _mf1(pos, setup)
    return _mf1c(pos, setup, model.correction_field)


def velocities_mf0(cfg):
    """Settling plus mean-field Stokeslet velocities.

    V_i = g/(6 pi N R) + (1/N) sum_{j != i} Phi(X_i - X_j) g.
    """
    return _mf0(cfg.positions, cfg.setup)


def velocities_mf1(cfg):
    """MF0 plus the dipole correction, factored into two O(N^2) passes.

    Pass one builds the mean-field strain S_j at every particle; pass two
    adds (5 phi / N) sum_{j != i} stresslet_velocity(X_i - X_j, S_j).
    """
    return _mf1(cfg.positions, cfg.setup)


def velocities_mf1c(cfg, correction_field):
    """MF0 plus the continuum dipole correction sampled at the particles.

    ``correction_field`` is the full correction velocity (5 phi factor
    included), e.g. ``einstein_strain_correction`` of a mollified density;
    its grid must cover every particle.
    """
    return _mf1c(cfg.positions, cfg.setup, correction_field)


# --------------------------------------------------------------------------
# integration


@dataclass
class SimulationTrace:
    """History of one integration run, one entry per recorded time.

    ``model_gap`` is max_i |V_i^MF1 - V_i^MF0| at the recorded positions,
    the observable size of the dipole correction, whatever model drove
    the run.
    """

    times: np.ndarray
    snapshots: list
    stats: list
    model_gap: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.model_gap = np.asarray(self.model_gap, dtype=float)
        counts = {len(self.times), len(self.snapshots), len(self.stats), len(self.model_gap)}
        if len(counts) != 1:
            raise ValueError("trace columns disagree in length")
        if len(self.times) == 0 or np.any(np.diff(self.times) <= 0.0):
            raise ValueError("trace times must be strictly increasing and non-empty")

    @property
    def final(self):
        return self.snapshots[-1]

    def to_csv(self, path):
        """Write one row per (time, particle): t,i,x,y,z,dmin,alpha2,alpha3,model_gap."""
        blocks = []
        for t, snap, st, gap in zip(self.times, self.snapshots, self.stats, self.model_gap):
            n = len(snap)
            block = np.empty((n, 9))
            block[:, 0] = t
            block[:, 1] = np.arange(n)
            block[:, 2:5] = snap.positions
            block[:, 5] = st.d_min
            block[:, 6] = st.alpha2
            block[:, 7] = st.alpha3
            block[:, 8] = gap
            blocks.append(block)
        np.savetxt(
            path,
            np.vstack(blocks),
            fmt=["%.17g", "%d"] + ["%.17g"] * 7,
            delimiter=",",
            header="t,i,x,y,z,dmin,alpha2,alpha3,model_gap",
            comments="",
        )


def _closest_pair(pos):
    """Minimum pairwise distance and the indices achieving it."""
    if len(pos) < 2:
        return np.inf, (0, 0)
    d, idx = cKDTree(pos).query(pos, k=2)
    i = int(np.argmin(d[:, 1]))
    j = int(idx[i, 1])
    return float(d[i, 1]), (min(i, j), max(i, j))


def _stats_for(cfg):
    """Configuration stats, with the empty-sum values for a lone particle."""
    if len(cfg) < 2:
        return ConfigurationStats(
            d_min=np.inf, alpha1=0.0, alpha2=0.0, alpha3=0.0, lambda_q=0.0, q=1.5, c0=0.0
        )
    return compute_stats(cfg)


def auto_step(cfg, model, cap=0.05, fraction=0.1):
    """Fixed RK4 step from the initial state: min(cap, fraction d_min/max|V|)."""
    model = VelocityModel(model) if isinstance(model, str) else model
    v = _velocity(cfg.positions, cfg.setup, model)
    vmax = float(np.sqrt((v**2).sum(axis=1)).max())
    dmin = min_pairwise_distance(cfg.positions)
    if vmax == 0.0 or not np.isfinite(dmin):
        return cap
    return min(cap, fraction * dmin / vmax)


def integrate(cfg, model, t_end, dt=None, output_stride=1):
    """Advance a configuration under the given model with fixed-step RK4.

    ``model`` is a ``VelocityModel`` (or its variant name, for the models
    that need no attached data).  ``dt`` defaults to ``auto_step``, chosen
    once at the initial state and held fixed so runs are reproducible; the
    final step is shortened to land exactly on ``t_end``.  After every
    step the minimum separation is rechecked and the run aborts with
    ``ContactError`` at d_min <= 2R(1 + 1e-6); non-finite positions raise
    immediately.  Snapshots (with stats and the MF1-MF0 gap) are recorded
    at t = 0 and every ``output_stride``-th step, the final time always
    included.
    """
    model = VelocityModel(model) if isinstance(model, str) else model
    if not (t_end > 0.0 and np.isfinite(t_end)):
        raise ValueError("t_end must be a positive real")
    if output_stride < 1 or int(output_stride) != output_stride:
        raise ValueError("output_stride must be a positive integer")
    setup = cfg.setup
    if dt is None:
        dt = auto_step(cfg, model)
    if not (dt > 0.0 and np.isfinite(dt)):
        raise ValueError("dt must be a positive real")

    t0 = cfg.time
    pos = cfg.positions.copy()
    times = [t0]
    snapshots = [cfg]
    stats = [_stats_for(cfg)]
    gaps = [_model_gap(pos, setup)]

    n_steps = max(1, math.ceil(t_end / dt - 1e-9))
    contact = 2.0 * setup.radius * (1.0 + _CONTACT_SLACK)
    for step in range(1, n_steps + 1):
        t_prev = t0 + min((step - 1) * dt, t_end)
        t = t0 + min(step * dt, t_end)
        h = t - t_prev
        k1 = _velocity(pos, setup, model)
        k2 = _velocity(pos + 0.5 * h * k1, setup, model)
        k3 = _velocity(pos + 0.5 * h * k2, setup, model)
        k4 = _velocity(pos + h * k3, setup, model)
        pos = pos + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(pos)):
            raise RuntimeError(f"non-finite positions at t={t:.6g}")
        dmin, pair = _closest_pair(pos)
        if dmin <= contact:
            raise ContactError(t, pair, dmin)
        if step % output_stride == 0 or step == n_steps:
            snap = ParticleConfiguration(pos.copy(), setup, time=t)
            times.append(t)
            snapshots.append(snap)
            stats.append(_stats_for(snap))
            gaps.append(_model_gap(pos, setup))
    return SimulationTrace(times, snapshots, stats, gaps)


def _model_gap(pos, setup):
    """max_i |V_i^MF1 - V_i^MF0|, the observable dipole-correction size."""
    strains = _meanfield_strains(pos, setup.gravity_vector)
    corr = (5.0 * setup.volume_fraction) * _stresslet_sum(pos, strains)
    return float(np.sqrt((corr**2).sum(axis=1)).max())
