"""Experiment harness: matched micro/macro runs, rates, and reports.

A comparison run generates a well-prepared cloud from a reference blob,
mollifies it into matched initial data for the macroscopic systems, then
advances the particle model and the continuum systems on the same time
grid.  Per output time it records the transport distances between the
empirical measure and each continuum density (W_1, W_2 and the
bottleneck eta), separation statistics, the initial discretization
floor, and probe-set velocity errors.  A sweep repeats this over N (and
optionally over a volume-fraction ladder at a fixed anchor N), fits the
log-log rates the theory predicts, and writes ``records.csv`` and
``fits.json``.
"""

from __future__ import annotations

import functools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .configuration import generate_well_prepared, min_pairwise_distance, mollified_density
from .continuum import (
    DensityField,
    GridSpec,
    einstein_strain_correction,
    evolve_system,
    polynomial_blob,
    trilinear,
)
from .kernels import PhysicalSetup, single_particle_field
from .microdynamics import ContactError, SimulationTrace, VelocityModel, integrate
from .microdynamics import _model_gap as _micro_model_gap
from .microdynamics import _stats_for as _micro_stats
from .wasserstein import (
    DiscreteMeasure,
    sobolev_w12_distance,
    wasserstein_inf,
    wasserstein_p,
)

#: Column order of records.csv; one row per (run, output time).
RECORD_COLUMNS = (
    "N", "phi", "t", "eta_tau", "eta_eff", "w1_tau", "w2_tau",
    "w1_eff", "w2_eff", "dmin", "alpha2", "alpha3", "floor_w2", "vel_err_q2",
)

#: Default blob the experiments sediment: unit mass, compact support,
#: lifted off-center so settling is visible before the support nears the
#: domain boundary.
BLOB_CENTER = (0.0, 0.0, 0.3)
BLOB_RADIUS = 1.2


def initial_blob(grid):
    """The reference density rho_0 every experiment starts from."""
    return polynomial_blob(grid, BLOB_CENTER, BLOB_RADIUS)


#: The initial floor W_2(rho_N(0), rho_0) is measured against an 8N-point
#: sampling of rho_0 (fresh seed, blob-tight fine grid) rather than a
#: fixed-resolution quantization: the surrogate's own error scales like
#: the signal (both ~N^(-1/3)), so the fitted slope is undistorted, while
#: any fixed reference resolution flattens it once N^(-1/3) drops to the
#: atom spacing.
FLOOR_REF_FACTOR = 8


@functools.lru_cache(maxsize=1)
def _floor_reference_density():
    margin = 0.05 * BLOB_RADIUS
    lo = np.asarray(BLOB_CENTER) - BLOB_RADIUS - margin
    span = 2.0 * (BLOB_RADIUS + margin)
    grid = GridSpec(tuple(lo), span / 95, (96, 96, 96))
    return polynomial_blob(grid, BLOB_CENTER, BLOB_RADIUS)


def measure_floor(cfg, seed, max_arcs):
    """W_2 distance from the cloud to an 8N-point surrogate of rho_0."""
    n = len(cfg.positions)
    ref = generate_well_prepared(_floor_reference_density(), FLOOR_REF_FACTOR * n,
                                 0.5, seed=seed + 1, phi0=1e-3)
    value, _ = wasserstein_p(
        DiscreteMeasure.empirical(cfg.positions),
        DiscreteMeasure.empirical(ref.positions),
        2.0, max_arcs=max_arcs,
    )
    return value


@dataclass
class RateFit:
    """Least-squares slope of log10(ordinate) against log10(abscissa)."""

    abscissa: list
    ordinate: list
    slope: float
    intercept: float
    r_squared: float

    def __post_init__(self):
        check = RateFit.fit(self.abscissa, self.ordinate, _validate=False)
        if abs(check.slope - self.slope) > 1e-9 or abs(check.intercept - self.intercept) > 1e-9:
            raise ValueError("slope/intercept do not reproduce the stored data's regression")

    @classmethod
    def fit(cls, abscissa, ordinate, _validate=True):
        x = np.log10(np.asarray(abscissa, dtype=float))
        y = np.log10(np.asarray(ordinate, dtype=float))
        if len(x) < 2 or len(x) != len(y):
            raise ValueError("need at least two matched points to fit a rate")
        slope, intercept = np.polyfit(x, y, 1)
        resid = y - (slope * x + intercept)
        total = y - y.mean()
        r2 = 1.0 - float(resid @ resid) / float(total @ total) if total @ total > 0 else 1.0
        fit = object.__new__(cls)
        fit.abscissa = [float(v) for v in abscissa]
        fit.ordinate = [float(v) for v in ordinate]
        fit.slope = float(slope)
        fit.intercept = float(intercept)
        fit.r_squared = float(r2)
        if _validate:
            fit.__post_init__()
        return fit

    def to_dict(self):
        return {
            "abscissa": self.abscissa,
            "ordinate": self.ordinate,
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
        }


@dataclass(frozen=True)
class SweepPlan:
    """Everything a sweep needs; one comparison run per N (and per phi).

    ``theta`` sets the dilution schedule phi = phi0 N^-theta along
    ``n_values``; ``phi_values`` optionally adds a volume-fraction ladder
    at ``anchor_n`` (default: the largest N) for the phi-rate fits.
    ``workers`` caps the process count (default: one per entry up to the
    core count; 0 runs entries in the calling process).
    """

    n_values: tuple
    theta: float
    t_end: float
    model: str
    grid: GridSpec
    seed: int
    output_dir: str
    gravity: tuple = (0.0, 0.0, -1.0)
    dt: float = 0.1
    output_stride: int = 1
    phi0: float = 0.05
    phi_values: tuple = ()
    anchor_n: int | None = None
    quant_atoms: int = 2000
    max_arcs: int = 2_000_000
    probes: int = 128
    workers: int | None = None
    with_rho_eff: bool = True

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "phi_values", tuple(float(p) for p in self.phi_values))
        if len(self.n_values) == 0 or any(b <= a for a, b in zip(self.n_values, self.n_values[1:])):
            raise ValueError("n_values must be non-empty and strictly increasing")
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1) so dilution improves along the sweep")
        if self.model not in ("mf0", "mf1", "mf1c"):
            raise ValueError(f"unknown velocity model {self.model!r}")
        if self.t_end <= 0.0 or self.dt <= 0.0:
            raise ValueError("t_end and dt must be positive")


@dataclass
class ComparisonResult:
    """One comparison run: its record rows plus per-run diagnostics."""

    n: int
    phi: float
    rows: list
    valid: bool = True
    abort_reason: str | None = None
    dmin_envelope_c: float = 0.0
    eta_tau_end: float = float("nan")
    eta_eff_end: float = float("nan")
    baseline_eta_tau_end: float | None = None
    self_drift: float = 0.0
    tail_bar: float = 0.0


def _probe_points(seed, count):
    """Fixed ball of probe points around the blob center."""
    rng = np.random.default_rng(seed + 7919)
    pts = np.empty((count, 3))
    have = 0
    while have < count:
        cand = rng.uniform(-1.0, 1.0, (count, 3))
        cand = cand[np.sum(cand**2, axis=1) <= 1.0]
        take = min(len(cand), count - have)
        pts[have : have + take] = cand[:take]
        have += take
    return pts + np.asarray(BLOB_CENTER)


def _micro_field_at(points, positions, setup):
    """Superposed single-particle fluid velocity at the probe points."""
    diff = points[:, None, :] - positions[None, :, :]
    return single_particle_field(diff, setup).sum(axis=1)


def _velocity_error(points, vel_field, positions, setup):
    """RMS probe error |v - u_micro|, probes within 2R of a particle dropped."""
    d, _ = cKDTree(positions).query(points, k=1)
    keep = d > 2.0 * setup.radius
    if not np.any(keep):
        return float("nan")
    pts = points[keep]
    v = trilinear(vel_field.values, vel_field.grid, pts)
    u = _micro_field_at(pts, positions, setup)
    return float(np.sqrt(np.mean(np.sum((v - u) ** 2, axis=1))))


#: Total mass the quantized continuum targets may shed from their
#: lightest atoms.  Semi-Lagrangian transport leaks exponentially small
#: mass just outside the advected support; the bottleneck distance is
#: mass-blind, so those crumbs would otherwise dominate eta with pure
#: solver artifacts.  Trimming is a measurement-resolution statement
#: (mass far below one particle's 1/N share is not scored); the incurred
#: W_inf perturbation is reported per run as ``tail_bar``.
TAIL_MASS_BUDGET = 1e-4


def _centroid_quantize(fld, max_atoms):
    """Cell-mass centroid atoms: a quantization that moves with the density.

    Each grid cell contributes an atom carrying its exact trilinear mass,
    placed at the cell's exact mass centroid; cells merge octree-style
    (pooling mass and first moments) while the count exceeds the budget.
    Centroids shift with the density, so transport distances between two
    nearby densities keep first-order sensitivity to displacement;
    fixed-lattice atoms (cell centers) freeze the support and convert
    displacement into sub-threshold mass noise instead.  The reported bar
    is the per-leaf diameter sqrt(3) h 2^level, the worst-case distance
    between leaf mass and its centroid.
    """
    fld.require_probability()
    grid = fld.grid
    h = grid.cell
    v = fld.values
    cells = tuple(d - 1 for d in grid.dims)
    total = np.zeros(cells)
    first = np.zeros(cells + (3,))
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                w = v[a:cells[0] + a, b:cells[1] + b, c:cells[2] + c]
                total += w
                first[..., 0] += (1 + a) * w
                first[..., 1] += (1 + b) * w
                first[..., 2] += (1 + c) * w
    occ = np.argwhere(total > 0.0)
    t_occ = total[tuple(occ.T)]
    off = first[tuple(occ.T)] / (3.0 * t_occ[:, None])  # in [1/3, 2/3]
    mass = t_occ / 8.0 * grid.cell_volume()
    centroid = np.asarray(grid.origin) + (occ + off) * h

    idx, level = occ, 0
    while len(idx) > max_atoms:
        level += 1
        if 2 ** level > 2 * max(cells):
            raise ValueError(
                f"cannot coarsen below {len(idx)} atoms (budget {max_atoms})"
            )
        idx, inverse = np.unique(occ >> level, axis=0, return_inverse=True)
        pooled = np.zeros(len(idx))
        moment = np.zeros((len(idx), 3))
        np.add.at(pooled, inverse, mass)
        np.add.at(moment, inverse, mass[:, None] * centroid)
        if len(idx) <= max_atoms:
            mass, centroid = pooled, moment / pooled[:, None]
    return DiscreteMeasure(
        centroid,
        mass / mass.sum(),
        quantization_bar=float(np.sqrt(3.0) * h * 2 ** level),
    )


def _trim_tail(q, budget=TAIL_MASS_BUDGET):
    """Drop the lightest atoms up to ``budget`` total mass; renormalize.

    Returns (trimmed, tail_bar): tail_bar is the largest distance from a
    dropped atom to the kept support, bounding the bottleneck shift.
    """
    order = np.argsort(q.weights, kind="stable")
    csum = np.cumsum(q.weights[order])
    k = min(int(np.searchsorted(csum, budget, side="right")), len(order) - 1)
    if k == 0:
        return q, 0.0
    keep = np.sort(order[k:])
    weights = q.weights[keep]
    trimmed = DiscreteMeasure(q.points[keep], weights / weights.sum(),
                              quantization_bar=q.quantization_bar)
    d, _ = cKDTree(trimmed.points).query(q.points[order[:k]], k=1)
    return trimmed, float(np.max(d))


def _distances(emp, density, quant_atoms, max_arcs):
    """(W_inf, W_1, W_2, tail_bar): empirical measure vs a grid density."""
    q, tail_bar = _trim_tail(_centroid_quantize(density, quant_atoms))
    eta, _ = wasserstein_inf(emp, q, max_arcs=max_arcs, with_plan=False)
    w1, _ = wasserstein_p(emp, q, 1.0, max_arcs=max_arcs)
    w2, _ = wasserstein_p(emp, q, 2.0, max_arcs=max_arcs)
    return eta, w1, w2, tail_bar


def _normalized(fld):
    return DensityField(fld.grid, fld.values / fld.total_mass)


def _matched_mollified(cfg, grid):
    """Mollified cloud density the macro systems start from.

    The width is widened to 3 grid cells when d_min is finer than the
    grid can resolve, then the mass is normalized exactly.
    """
    width = max(min_pairwise_distance(cfg.positions), 3.0 * grid.cell)
    return _normalized(mollified_density(cfg, grid, width=width))


def _run_micro(cfg, plan, tau_snaps):
    """Advance the particle model on the macro time grid.

    mf0/mf1 integrate in one call; mf1c refreshes its continuum
    correction field from tau(t) every macro step, sharing the cadence
    of the continuum solver.
    """
    if plan.model in ("mf0", "mf1"):
        return integrate(cfg, plan.model, plan.t_end, dt=plan.dt,
                         output_stride=plan.output_stride)
    times = [cfg.time]
    snapshots = [cfg]
    stats = [_micro_stats(cfg)]
    gaps = [_micro_model_gap(cfg.positions, cfg.setup)]
    current = cfg
    n_steps = len(tau_snaps) - 1
    for k in range(n_steps):
        fld = einstein_strain_correction(_normalized(tau_snaps[k][1]), cfg.setup)
        piece = integrate(current, VelocityModel("mf1c", fld), plan.dt, dt=plan.dt)
        current = piece.final
        if (k + 1) % plan.output_stride == 0 or k + 1 == n_steps:
            times.append(tau_snaps[k + 1][0])
            snapshots.append(current)
            stats.append(piece.stats[-1])
            gaps.append(piece.model_gap[-1])
    return SimulationTrace(times, snapshots, stats, gaps)


def run_comparison(n, plan, phi=None, with_baseline=False):
    """One matched micro/macro run at a single N; returns a ComparisonResult.

    ``phi`` overrides the theta-schedule volume fraction (used by the
    phi-ladder runs); ``with_baseline`` additionally integrates an MF0
    cloud from the same initial data and records its final-time eta_tau,
    the baseline the phi-rate fit subtracts.
    """
    grid = plan.grid
    rho0 = initial_blob(grid)
    phi0 = plan.phi0 if phi is None else float(phi) * n**plan.theta
    cfg = generate_well_prepared(rho0, n, plan.theta, seed=plan.seed,
                                 gravity=plan.gravity, phi0=phi0)
    setup = cfg.setup
    result = ComparisonResult(n=n, phi=setup.volume_fraction, rows=[],
                              self_drift=setup.settling_speed)

    floor_w2 = measure_floor(cfg, plan.seed, plan.max_arcs)

    rho_bar = _matched_mollified(cfg, grid)
    tau_stride = 1 if plan.model == "mf1c" else plan.output_stride
    tau_snaps = evolve_system("tau", rho_bar, setup, plan.t_end, plan.dt,
                              output_stride=tau_stride)
    eff_snaps = (
        evolve_system("rho_eff", rho_bar, setup, plan.t_end, plan.dt,
                      output_stride=plan.output_stride)
        if plan.with_rho_eff
        else None
    )

    try:
        trace = _run_micro(cfg, plan, tau_snaps)
    except ContactError as err:
        result.valid = False
        result.abort_reason = str(err)
        return result

    record_times = [t for t, _, _ in tau_snaps]
    if plan.model == "mf1c":
        stride_idx = [k for k in range(len(tau_snaps))
                      if k % plan.output_stride == 0 or k == len(tau_snaps) - 1]
        tau_snaps = [tau_snaps[k] for k in stride_idx]
        record_times = [t for t, _, _ in tau_snaps]
    if not np.allclose(trace.times, record_times, atol=1e-9):
        raise RuntimeError("micro and macro output time grids disagree")

    probes = _probe_points(plan.seed, plan.probes)
    d0 = trace.stats[0].d_min
    env_c = 0.0
    for k, (t, tau_rho, tau_vel) in enumerate(tau_snaps):
        snap, stat = trace.snapshots[k], trace.stats[k]
        emp = DiscreteMeasure.empirical(snap.positions)
        eta_tau, w1_tau, w2_tau, bar = _distances(emp, tau_rho,
                                                  plan.quant_atoms, plan.max_arcs)
        result.tail_bar = max(result.tail_bar, bar)
        if eff_snaps is not None:
            eta_eff, w1_eff, w2_eff, bar = _distances(emp, eff_snaps[k][1],
                                                      plan.quant_atoms, plan.max_arcs)
            result.tail_bar = max(result.tail_bar, bar)
        else:
            eta_eff = w1_eff = w2_eff = float("nan")
        vel_err = _velocity_error(probes, tau_vel, snap.positions, setup)
        result.rows.append({
            "N": n, "phi": setup.volume_fraction, "t": t,
            "eta_tau": eta_tau, "eta_eff": eta_eff,
            "w1_tau": w1_tau, "w2_tau": w2_tau,
            "w1_eff": w1_eff, "w2_eff": w2_eff,
            "dmin": stat.d_min, "alpha2": stat.alpha2, "alpha3": stat.alpha3,
            "floor_w2": floor_w2, "vel_err_q2": vel_err,
        })
        if t > 0.0 and np.isfinite(d0) and stat.d_min < d0:
            env_c = max(env_c, math.log(d0 / stat.d_min) / t)
    result.dmin_envelope_c = env_c
    result.eta_tau_end = result.rows[-1]["eta_tau"]
    result.eta_eff_end = result.rows[-1]["eta_eff"]

    if with_baseline and plan.model != "mf0":
        try:
            base = integrate(cfg, "mf0", plan.t_end, dt=plan.dt, output_stride=10**9)
            emp_b = DiscreteMeasure.empirical(base.final.positions)
            q_tau, _ = _trim_tail(_centroid_quantize(tau_snaps[-1][1], plan.quant_atoms))
            eta_b, _ = wasserstein_inf(emp_b, q_tau, max_arcs=plan.max_arcs, with_plan=False)
            result.baseline_eta_tau_end = eta_b
        except ContactError:
            result.baseline_eta_tau_end = None
    return result


# --------------------------------------------------------------------------
# sweep


def _sweep_entry(args):
    n, plan, phi, with_baseline = args
    return run_comparison(n, plan, phi=phi, with_baseline=with_baseline)


def run_sweep(plan):
    """All comparison runs of a plan, merged in N order, plus the rate fits.

    Returns (results, fits) where ``fits`` is a plain dict ready for
    ``fits.json``.  Entries run one worker per N when the host has the
    cores for it; each entry is internally deterministic, so the merged
    output is as well.  Every entry gets a fresh process: a long run
    leaves the allocator holding most of its peak (transport snapshots,
    sparse solver working sets), and letting that accrete across a
    multi-hour sweep in one process runs small machines out of memory.
    ``workers=0`` opts out and runs everything in the calling process.
    """
    want_baseline = plan.model != "mf0"
    entries = [(n, plan, None, False) for n in plan.n_values]
    anchor = plan.anchor_n or plan.n_values[-1]
    entries += [(anchor, plan, phi, want_baseline) for phi in plan.phi_values]

    if plan.workers is None:
        workers = min(len(entries), os.cpu_count() or 1)
    else:
        workers = plan.workers
    if workers == 0:
        results = [_sweep_entry(e) for e in entries]
    else:
        results = []
        for start in range(0, len(entries), workers):
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results.extend(pool.map(_sweep_entry, entries[start:start + workers]))

    n_runs = results[: len(plan.n_values)]
    phi_runs = results[len(plan.n_values):]
    fits = {"aborts": {}, "self_drift": {}, "tail_bar": {}}
    for res in results:
        key = f"N={res.n},phi={res.phi:.6g}"
        fits["self_drift"][key] = res.self_drift
        fits["tail_bar"][key] = res.tail_bar
        if not res.valid:
            fits["aborts"][key] = res.abort_reason

    good_n = [r for r in n_runs if r.valid]
    if len(good_n) >= 2:
        fits["floor_w2_vs_n"] = RateFit.fit(
            [r.n for r in good_n], [r.rows[0]["floor_w2"] for r in good_n]
        ).to_dict()
        fits["dmin_envelope_c"] = {f"N={r.n}": r.dmin_envelope_c for r in good_n}
        chat = 0.0
        for r in good_n:
            eta0 = r.rows[0]["eta_tau"]
            for row in r.rows[1:]:
                if row["t"] > 0 and row["eta_tau"] > eta0 > 0:
                    chat = max(chat, math.log(row["eta_tau"] / eta0) / row["t"])
        fits["eta_tau_envelope_chat"] = chat

    good_phi = [r for r in phi_runs if r.valid]
    if len(good_phi) >= 2:
        phis = [r.phi for r in good_phi]
        if all(r.baseline_eta_tau_end is not None for r in good_phi) and want_baseline:
            excess = [max(r.eta_tau_end - r.baseline_eta_tau_end, 1e-12) for r in good_phi]
            fits["model_excess_vs_phi"] = RateFit.fit(phis, excess).to_dict()
        if plan.with_rho_eff:
            ratios = [r.eta_eff_end / r.eta_tau_end for r in good_phi]
            fits["eta_ratio_vs_phi"] = RateFit.fit(phis, ratios).to_dict()
            fits["eta_ratio_by_phi"] = {f"{p:.6g}": q for p, q in zip(phis, ratios)}

    return results, fits


def _advect_points(points, vel, drift, dt):
    """Forward midpoint step of tracer points through a grid velocity.

    Mirrors the semi-Lagrangian transport stencil (RK2 midpoint, trilinear
    sampling, pure drift outside the node hull) so tracer clouds follow the
    same numerical flow as the advected densities.
    """
    w = vel.values + np.asarray(drift, dtype=float)

    def sample(pts):
        out = trilinear(w, vel.grid, pts, fill=np.nan)
        out[np.isnan(out[:, 0])] = drift
        return out

    mid = points + 0.5 * dt * sample(points)
    return points + dt * sample(mid)


def run_continuum_rates(phis, grid, t_probe, dt, n_ref=1000,
                        gravity=(0.0, 0.0, -1.0), quant_atoms=2000,
                        max_arcs=2_000_000):
    """Continuum-only rate check: W2 distances between the three macro systems.

    Evolves tau, rho and rho_eff from the same blob for each phi and fits
    log-log slopes of W2(rho_eff, tau) (expected ~1) and W2(rho_eff, rho)
    (expected ~2) at t = t_probe.

    The distances at play are far below the grid cell, where atoms on a
    fixed budget cannot follow: reshuffling mass between atoms spaced ell
    apart prices a displacement delta at sqrt(delta*ell), burying the
    exponents.  The slope fits therefore use a flow-matched estimator: one
    tracer cloud seeded from the shared initial blob is advected through
    each system's per-step velocities, and the same-index coupling between
    two final clouds gives a W2 estimate whose discretization errors cancel
    to first order in the difference.  Each estimate is bracketed by the
    negative-Sobolev lower bound ||rho_a - rho_b||_{H^-1} / sup||.||_inf^1/2
    (reported as ``w2_lower``), and the fixed-lattice LP value is still
    reported with its quantization bars for reference.
    """
    rho0 = initial_blob(grid)
    q0 = _centroid_quantize(rho0, quant_atoms)
    pairs = (("rho_eff", "tau"), ("rho_eff", "rho"))
    est = {p: [] for p in pairs}
    lower = {p: [] for p in pairs}
    quantized = {p: [] for p in pairs}
    bars = []
    for phi in phis:
        setup = PhysicalSetup.from_volume_fraction(gravity, n_ref, phi)
        drift = setup.gravity_vector / (6.0 * np.pi * setup.interaction_strength)
        finals, tracers = {}, {}
        for which in ("tau", "rho", "rho_eff"):
            snaps = evolve_system(which, rho0, setup, t_probe, dt, output_stride=1)
            finals[which] = snaps[-1][1]
            pts = q0.points.copy()
            for _, _, vel in snaps[:-1]:
                pts = _advect_points(pts, vel, drift, dt)
            tracers[which] = pts
        q = {k: _centroid_quantize(v, quant_atoms) for k, v in finals.items()}
        bars.append(q["rho_eff"].quantization_bar + q["tau"].quantization_bar)
        for a, b in pairs:
            gap = tracers[a] - tracers[b]
            est[(a, b)].append(
                math.sqrt(float(np.sum(q0.weights * np.sum(gap**2, axis=1))))
            )
            sup = max(finals[a].sup_norm(), finals[b].sup_norm())
            lower[(a, b)].append(
                sobolev_w12_distance(finals[a], finals[b]) / math.sqrt(sup)
            )
            quantized[(a, b)].append(
                wasserstein_p(q[a], q[b], 2.0, max_arcs=max_arcs)[0]
            )
    return {
        "rho_eff_vs_tau": RateFit.fit(phis, est[pairs[0]]).to_dict(),
        "rho_eff_vs_rho": RateFit.fit(phis, est[pairs[1]]).to_dict(),
        "w2_lower": {
            "rho_eff_vs_tau": [float(v) for v in lower[pairs[0]]],
            "rho_eff_vs_rho": [float(v) for v in lower[pairs[1]]],
        },
        "w2_quantized": {
            "rho_eff_vs_tau": [float(v) for v in quantized[pairs[0]]],
            "rho_eff_vs_rho": [float(v) for v in quantized[pairs[1]]],
        },
        "quantization_bars": [float(b) for b in bars],
    }


# --------------------------------------------------------------------------
# kernel condition


@dataclass
class KernelConditionReport:
    """Fitted constant and uniformity verdict for |K| + |x||grad K| <= C/|x|^alpha."""

    alpha: float
    constant: float
    restricted_constant: float
    decade_constants: dict
    divergence_max: float
    uniform: bool
    passed: bool


def check_kernel_condition(kernel, alpha, samples=10_000, seed=0,
                           radius_range=(1e-2, 1e2), div_tol=1e-6):
    """Sample-based check of the decay condition on a divergence-free kernel.

    ``kernel`` maps (..., 3) positions to (..., 3) velocities.  The bound
    constant is fitted as max (|K| + |x||grad K|) |x|^alpha; the check
    passes when the per-radial-decade constants stay within a factor 10
    of each other (a power-law mismatch grows like a decade per decade)
    and the finite-difference divergence is zero to ``div_tol`` relative
    to the local gradient scale.
    """
    rng = np.random.default_rng(seed)
    lo, hi = radius_range
    r = 10.0 ** rng.uniform(np.log10(lo), np.log10(hi), samples)
    d = rng.normal(size=(samples, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    x = r[:, None] * d

    k_val = np.asarray(kernel(x), dtype=float)
    h = 1e-5 * r
    grad = np.empty((samples, 3, 3))  # grad[:, i, j] = dK_i / dx_j
    for j in range(3):
        step = np.zeros((samples, 3))
        step[:, j] = h
        grad[:, :, j] = (kernel(x + step) - kernel(x - step)) / (2.0 * h[:, None])

    k_norm = np.linalg.norm(k_val, axis=1)
    g_norm = np.linalg.norm(grad.reshape(samples, 9), axis=1)
    local_c = (k_norm + r * g_norm) * r**alpha

    div = np.abs(grad[:, 0, 0] + grad[:, 1, 1] + grad[:, 2, 2])
    div_scaled = float(np.max(div / np.maximum(g_norm, 1e-300)))

    decades = np.floor(np.log10(r)).astype(int)
    decade_constants = {
        int(dec): float(local_c[decades == dec].max()) for dec in np.unique(decades)
    }
    values = np.array(list(decade_constants.values()))
    uniform = bool(values.max() <= 10.0 * values.min())
    near = r <= 1.0
    restricted = float(local_c[near].max()) if np.any(near) else float("nan")
    return KernelConditionReport(
        alpha=float(alpha),
        constant=float(local_c.max()),
        restricted_constant=restricted,
        decade_constants=decade_constants,
        divergence_max=div_scaled,
        uniform=uniform,
        passed=uniform and div_scaled <= div_tol,
    )


# --------------------------------------------------------------------------
# outputs


def rows_to_csv(rows):
    """records.csv text: exact column order, full-precision floats."""
    lines = [",".join(RECORD_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            str(int(row[c])) if c == "N" else format(float(row[c]), ".17g")
            for c in RECORD_COLUMNS
        ))
    return "\n".join(lines) + "\n"


def write_outputs(out_dir, results, fits):
    """Write records.csv (valid runs only) and fits.json; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    rows = [row for res in results if res.valid for row in res.rows]
    csv_path = os.path.join(out_dir, "records.csv")
    with open(csv_path, "w") as fh:
        fh.write(rows_to_csv(rows))
    json_path = os.path.join(out_dir, "fits.json")
    with open(json_path, "w") as fh:
        json.dump(fits, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path
