import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from sedlab.kernels import PhysicalSetup, stresslet_velocity
from sedlab.continuum import (
    BoundaryTruncationError,
    ContractionError,
    DensityField,
    GridSpec,
    MacroSystem,
    VelocityField,
    body_force,
    einstein_strain_correction,
    evolve_system,
    load_field,
    polynomial_blob,
    save_field,
    solve_effective_velocity,
    stokes_solve,
    transport_step,
    trilinear,
)

GRAVITY = np.array([0.2, -0.4, -1.0])


def gaussian_stokes_coeffs(r, sigma):
    """Exact Stokes velocity around a unit-mass Gaussian force blob.

    For f(x) = g * (2 pi sigma^2)^{-3/2} exp(-|x|^2 / 2 sigma^2) the
    solution of -Delta v + grad p = f, div v = 0 is radially structured,

        v(x) = A(r) g + C(r) (xhat . g) xhat,

    and A, C have erf closed forms (A, C -> 1/(8 pi r): Oseen far field).
    """
    xi = r / (np.sqrt(2.0) * sigma)
    e = erf(xi)
    gauss = np.sqrt(2.0) * sigma * np.exp(-(r**2) / (2 * sigma**2)) / (
        8.0 * np.pi**1.5 * r**2
    )
    a = e / (8.0 * np.pi * r) * (1.0 + sigma**2 / r**2) - gauss
    c = e / (8.0 * np.pi * r) * (1.0 - 3.0 * sigma**2 / r**2) + 3.0 * gauss
    return a, c


# Spot values of (A, C) at sigma = 0.05, frozen from an independent
# multiprecision evaluation of the quadrature form of the solution.
COEFF_SPOTS = {
    0.02: (0.8201742660725025, 0.013091045905932922),
    0.05: (0.70142570379763891, 0.068791034017339954),
    0.1: (0.45324689943280592, 0.15939281350962415),
    0.2: (0.21135095726929544, 0.16167143730467436),
    0.3: (0.13631326090686444, 0.12157669320558914),
}


def gaussian_density(grid, sigma):
    norm = (2.0 * np.pi * sigma**2) ** 1.5

    def fn(pts):
        return np.exp(-np.sum(pts**2, axis=1) / (2.0 * sigma**2)) / norm

    return DensityField.from_function(grid, fn)


def zero_velocity(grid):
    return VelocityField(grid, np.zeros(grid.dims + (3,)), divergence_norm=0.0)


# ------------------------------------------------------------- GridSpec ---

def test_grid_nodes_and_axes():
    g = GridSpec((-1.0, 0.0, 2.0), 0.5, (3, 4, 2))
    nodes = g.nodes()
    assert nodes.shape == (3, 4, 2, 3)
    assert np.allclose(nodes[0, 0, 0], [-1.0, 0.0, 2.0])
    assert np.allclose(nodes[2, 3, 1], [0.0, 1.5, 2.5])
    assert np.allclose(g.box_lengths, [1.0, 1.5, 0.5])
    assert g.cell_volume() == pytest.approx(0.125)


def test_grid_padded_dims_round_to_powers_of_two():
    assert GridSpec((0, 0, 0), 1.0, (64, 64, 64)).padded_dims == (128, 128, 128)
    assert GridSpec((0, 0, 0), 1.0, (20, 40, 60)).padded_dims == (64, 128, 128)
    assert GridSpec((0, 0, 0), 1.0, (48, 48, 48), 2.5).padded_dims == (128, 128, 128)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=90),
       st.floats(min_value=2.0, max_value=3.5))
def test_grid_padding_property(n, pf):
    p = GridSpec((0, 0, 0), 1.0, (n, 4, 4), pf).padded_dims[0]
    assert p >= int(np.ceil(n * pf))
    assert p & (p - 1) == 0  # a power of two
    assert p < 2 * int(np.ceil(n * pf)) or p == 1


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec((0, 0), 0.1, (4, 4, 4))
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), -0.1, (4, 4, 4))
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), 0.1, (4, 0, 4))
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), 0.1, (4, 4, 4), padding_factor=1.5)


# ------------------------------------------------------------ trilinear ---

@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=-2.0, max_value=2.0), min_size=8, max_size=8),
       st.integers(min_value=0, max_value=10_000))
def test_trilinear_reproduces_multilinear_functions(coeffs, seed):
    a, b, c, d, e, f, g_, h = coeffs

    def fn(p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        return a + b * x + c * y + d * z + e * x * y + f * x * z + g_ * y * z + h * x * y * z

    grid = GridSpec((-0.3, 0.1, -0.2), 0.27, (5, 6, 4))
    vals = fn(grid.nodes())
    rng = np.random.default_rng(seed)
    lo = np.asarray(grid.origin)
    hi = lo + (np.asarray(grid.dims) - 1) * grid.cell
    pts = rng.uniform(lo, hi, size=(30, 3))
    got = trilinear(vals, grid, pts)
    assert np.allclose(got, fn(pts), rtol=0, atol=1e-10)


def test_trilinear_fill_and_vector_values():
    grid = GridSpec((0.0, 0.0, 0.0), 1.0, (3, 3, 3))
    vec = np.stack([grid.nodes()[..., a] for a in range(3)], axis=-1)
    inside = trilinear(vec, grid, [0.5, 1.25, 2.0])
    assert inside.shape == (3,)
    assert np.allclose(inside, [0.5, 1.25, 2.0])
    outside = trilinear(vec, grid, [[-0.1, 1.0, 1.0], [1.0, 1.0, 2.0 + 1e-9]],
                        fill=-7.0)
    assert np.all(outside[0] == -7.0)
    assert np.all(outside[1] == -7.0)
    # exactly on the upper corner still counts as inside
    corner = trilinear(vec, grid, [2.0, 2.0, 2.0], fill=-7.0)
    assert np.allclose(corner, [2.0, 2.0, 2.0])


# --------------------------------------------------------------- fields ---

def test_density_rejects_negative_but_clips_roundoff():
    grid = GridSpec((0, 0, 0), 0.5, (4, 4, 4))
    vals = np.ones(grid.dims)
    vals[1, 2, 3] = -1e-6
    with pytest.raises(ValueError, match="negative"):
        DensityField(grid, vals)
    vals[1, 2, 3] = -1e-13
    fld = DensityField(grid, vals)
    assert fld.values[1, 2, 3] == 0.0
    assert fld.total_mass == pytest.approx(63 * 0.125)


def test_density_mass_and_probability_gate():
    grid = GridSpec((-0.66, -0.66, -0.66), 1.32 / 47, (48, 48, 48))
    blob = polynomial_blob(grid, (0.0, 0.0, 0.0), 0.45)
    assert abs(blob.total_mass - 1.0) <= 1e-3
    blob.require_probability()
    with pytest.raises(ValueError, match="mass"):
        DensityField(grid, 3.0 * blob.values).require_probability()


def test_polynomial_blob_peak_and_support():
    grid = GridSpec((-0.66, -0.66, -0.66), 1.32 / 47, (48, 48, 48))
    radius = 0.45
    blob = polynomial_blob(grid, grid.nodes()[20, 24, 28], radius)
    peak = 315.0 / (64.0 * np.pi) / radius**3
    assert blob.values[20, 24, 28] == pytest.approx(peak, rel=1e-12)
    r = np.linalg.norm(grid.nodes() - grid.nodes()[20, 24, 28], axis=-1)
    assert np.all(blob.values[r > radius] == 0.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(min_value=0.3, max_value=0.5))
def test_polynomial_blob_mass_is_one(radius):
    grid = GridSpec((-0.66, -0.66, -0.66), 1.32 / 47, (48, 48, 48))
    assert polynomial_blob(grid, (0.01, -0.02, 0.0), radius).total_mass == pytest.approx(
        1.0, abs=1e-3
    )


def test_velocity_field_shape_check_and_speeds():
    grid = GridSpec((0, 0, 0), 0.5, (4, 4, 4))
    with pytest.raises(ValueError, match="shape"):
        VelocityField(grid, np.zeros((4, 4, 4)))
    vals = np.zeros(grid.dims + (3,))
    vals[2, 2, 2] = [3.0, 0.0, 4.0]
    v = VelocityField(grid, vals, divergence_norm=0.0)
    assert v.max_speed() == pytest.approx(5.0)
    assert v.magnitude() == pytest.approx(np.sqrt(25.0 / 64.0))


# ---------------------------------------------------------- stokes solve ---

@pytest.fixture(scope="module")
def gaussian_solve():
    grid = GridSpec((-0.5, -0.5, -0.5), 1.0 / 64, (64, 64, 64))
    rho = gaussian_density(grid, 0.05)
    vel = stokes_solve(body_force(rho, GRAVITY))
    return grid, rho, vel


def test_gaussian_coeff_formulas_match_frozen_values():
    for r, (a_want, c_want) in COEFF_SPOTS.items():
        a, c = gaussian_stokes_coeffs(r, 0.05)
        assert a == pytest.approx(a_want, rel=1e-13)
        assert c == pytest.approx(c_want, rel=1e-13)


def test_stokes_solve_matches_gaussian_closed_form(gaussian_solve):
    grid, _, vel = gaussian_solve
    rng = np.random.default_rng(7)
    idx = rng.integers(8, 64 - 8, size=(80, 3))
    coords = np.asarray(grid.origin) + idx * grid.cell
    radii = np.linalg.norm(coords, axis=1)
    keep = (radii >= 0.02) & (radii <= 0.32)
    idx, coords, radii = idx[keep][:20], coords[keep][:20], radii[keep][:20]
    assert len(idx) == 20
    a, c = gaussian_stokes_coeffs(radii, 0.05)
    xhat = coords / radii[:, None]
    exact = a[:, None] * GRAVITY + (c * (xhat @ GRAVITY))[:, None] * xhat
    got = vel.values[idx[:, 0], idx[:, 1], idx[:, 2]]
    rel = np.linalg.norm(got - exact) / np.linalg.norm(exact)
    assert rel <= 1e-4


def test_stokes_solve_divergence_free(gaussian_solve):
    _, _, vel = gaussian_solve
    assert vel.divergence_norm <= 1e-10


def test_stokes_solve_zero_source_gives_zero_field():
    grid = GridSpec((-0.5, -0.5, -0.5), 1.0 / 31, (32, 32, 32))
    vel = stokes_solve(zero_velocity(grid))
    assert np.all(vel.values == 0.0)


def test_stokes_solve_axis_permutation_equivariance():
    # radial source on a cubic grid: swapping the gravity axis must
    # permute the solution's components and grid axes exactly
    grid = GridSpec((-0.5, -0.5, -0.5), 1.0 / 64, (64, 64, 64))
    rho = gaussian_density(grid, 0.06)
    v_z = stokes_solve(body_force(rho, (0.0, 0.0, 1.0))).values
    v_x = stokes_solve(body_force(rho, (1.0, 0.0, 0.0))).values
    assert np.allclose(v_x[..., 0], v_z[..., 2].transpose(2, 1, 0), atol=1e-12)
    assert np.allclose(v_x[..., 1], v_z[..., 1].transpose(2, 1, 0), atol=1e-12)
    assert np.allclose(v_x[..., 2], v_z[..., 0].transpose(2, 1, 0), atol=1e-12)


def test_stokes_solve_rejects_boundary_mass():
    grid = GridSpec((-0.7, -0.7, -0.7), 1.4 / 31, (32, 32, 32))
    blob = polynomial_blob(grid, (0.55, 0.0, 0.0), 0.3)
    with pytest.raises(BoundaryTruncationError):
        stokes_solve(body_force(blob, GRAVITY))


# ------------------------------------------------- einstein correction ---

@pytest.fixture(scope="module")
def einstein_setup():
    grid = GridSpec((-0.56, -0.56, -0.56), 1.12 / 48, (49, 49, 49))
    setup = PhysicalSetup.from_volume_fraction((0.0, 0.0, -1.0), 1000, 0.0335)
    tau = polynomial_blob(grid, (0.0, 0.0, 0.0), 0.35)
    corr = einstein_strain_correction(tau, setup)
    return grid, setup, tau, corr


def test_einstein_zero_tau_and_zero_phi_give_zero():
    grid = GridSpec((-0.5, -0.5, -0.5), 1.0 / 31, (32, 32, 32))
    setup = PhysicalSetup.from_volume_fraction((0.0, 0.0, -1.0), 8, 0.03)
    out = einstein_strain_correction(DensityField(grid, np.zeros(grid.dims)), setup)
    assert np.all(out.values == 0.0)
    # radius small enough that (4 pi/3) N R^3 underflows to exactly zero
    setup0 = PhysicalSetup((0.0, 0.0, -1.0), 8, 1e-110)
    assert setup0.volume_fraction == 0.0
    blob = polynomial_blob(grid, (0.0, 0.0, 0.0), 0.3)
    assert np.all(einstein_strain_correction(blob, setup0).values == 0.0)


def test_einstein_field_is_even_under_point_reflection(einstein_setup):
    # for radial tau the strain is odd and the stresslet kernel is odd,
    # so the correction field is even: v(-x) = v(x), exactly on a
    # point-symmetric node set
    _, _, _, corr = einstein_setup
    v = corr.values
    assert np.allclose(v[::-1, ::-1, ::-1], v, atol=1e-12)


def test_einstein_center_value_structure(einstein_setup):
    # parity leaves a nonzero center velocity along g; transverse
    # components cancel there
    _, setup, _, corr = einstein_setup
    c = 24
    center = corr.values[c, c, c]
    scale = np.max(np.linalg.norm(corr.values, axis=-1))
    assert abs(center[0]) <= 1e-6 * scale
    assert abs(center[1]) <= 1e-6 * scale
    assert abs(center[2]) > 0.1 * scale  # genuinely nonzero, against g


def test_einstein_center_against_direct_quadrature(einstein_setup):
    # independent route: finite-difference the strain of the public
    # Stokes velocity and sum the stresslet kernel over the blob cells
    grid, setup, tau, corr = einstein_setup
    u = stokes_solve(body_force(tau, setup.gravity_vector))
    h = grid.cell
    grad = np.stack(np.gradient(u.values, h, axis=(0, 1, 2)), axis=-1)
    strain = 0.5 * (grad + np.swapaxes(grad, -1, -2))
    pts = grid.nodes().reshape(-1, 3)
    sf = strain.reshape(-1, 3, 3)
    tf = tau.values.reshape(-1)
    keep = (np.linalg.norm(pts, axis=1) > 1e-12) & (tf > 0.0)
    weights = 5.0 * setup.volume_fraction * tf[keep] * h**3
    vq = np.sum(stresslet_velocity(-pts[keep], sf[keep]) * weights[:, None], axis=0)
    center = corr.values[24, 24, 24]
    assert abs(vq[2] - center[2]) <= 0.1 * abs(center[2])


def test_einstein_correction_is_linear_in_phi(einstein_setup):
    _, _, tau, corr = einstein_setup
    doubled = PhysicalSetup.from_volume_fraction((0.0, 0.0, -1.0), 1000, 0.0670)
    corr2 = einstein_strain_correction(tau, doubled)
    assert np.allclose(corr2.values, 2.0 * corr.values,
                       atol=1e-13 * np.max(np.abs(corr2.values)))


def test_einstein_correction_divergence_free(einstein_setup):
    _, _, _, corr = einstein_setup
    assert corr.divergence_norm <= 1e-10


# ------------------------------------------------- effective viscosity ---

@pytest.fixture(scope="module")
def effective_grid():
    grid = GridSpec((-2.1, -2.1, -2.1), 4.2 / 63, (64, 64, 64))
    return grid, gaussian_density(grid, 0.38)


@pytest.fixture(scope="module")
def effective_02(effective_grid):
    grid, rho = effective_grid
    setup = PhysicalSetup.from_volume_fraction((0.0, 0.0, -1.0), 1000, 0.02)
    return setup, solve_effective_velocity(rho, setup)


def test_effective_zero_phi_is_single_stokes_solve(effective_grid):
    grid, rho = effective_grid
    setup0 = PhysicalSetup((0.0, 0.0, -1.0), 1000, 1e-110)
    result = solve_effective_velocity(rho, setup0)
    assert result.iterations == 1
    assert result.updates == [0.0]
    bare = stokes_solve(body_force(rho, setup0.gravity_vector))
    assert np.array_equal(result.field.values, bare.values)


def test_effective_converges_quickly_at_low_phi(effective_02):
    _, result = effective_02
    assert result.iterations <= 8
    assert result.residual <= 1e-6
    assert result.field.divergence_norm <= 1e-10


def test_effective_updates_contract_geometrically(effective_02):
    _, result = effective_02
    upd = [u for u in result.updates if u > 1e-12]
    assert len(upd) >= 3
    ratios = [b / a for a, b in zip(upd, upd[1:])]
    assert max(ratios) <= 0.2


def test_effective_contracts_at_phi_005(effective_grid):
    grid, rho = effective_grid
    setup = PhysicalSetup.from_volume_fraction((0.0, 0.0, -1.0), 1000, 0.05)
    result = solve_effective_velocity(rho, setup)
    upd = [u for u in result.updates if u > 1e-12]
    ratios = [b / a for a, b in zip(upd, upd[1:])]
    assert max(ratios) <= 0.3
    assert result.residual <= 1e-6


def test_effective_rejects_non_contractive_phi(effective_grid):
    grid, rho = effective_grid
    setup = PhysicalSetup.from_volume_fraction((0.0, 0.0, -1.0), 1000, 0.12)
    with pytest.raises(ContractionError, match="contraction"):
        solve_effective_velocity(rho, setup)


def test_effective_correction_scales_linearly_in_phi(effective_grid, effective_02):
    grid, rho = effective_grid
    setup02, result02 = effective_02
    setup01 = PhysicalSetup.from_volume_fraction((0.0, 0.0, -1.0), 1000, 0.01)
    result01 = solve_effective_velocity(rho, setup01)
    bare = stokes_solve(body_force(rho, setup02.gravity_vector))
    d02 = np.linalg.norm(result02.field.values - bare.values)
    d01 = np.linalg.norm(result01.field.values - bare.values)
    assert d02 / d01 == pytest.approx(2.0, rel=0.1)


# -------------------------------------------------------------- transport ---

def test_transport_zero_dt_is_identity():
    grid = GridSpec((-0.66, -0.66, -0.66), 1.32 / 47, (48, 48, 48))
    blob = polynomial_blob(grid, (0.0, 0.0, 0.0), 0.45)
    out = transport_step(blob, zero_velocity(grid), np.zeros(3), 0.0)
    assert out is not blob
    assert np.array_equal(out.values, blob.values)


def test_transport_pure_drift_translation():
    grid = GridSpec((-0.775, -0.775, -0.775), 0.025, (63, 63, 63))
    rho = polynomial_blob(grid, (0.0, 0.0, 0.1), 0.45)
    drift = np.array([0.2, 0.0, -0.15])
    for _ in range(4):
        rho = transport_step(rho, zero_velocity(grid), drift, 0.025)
    exact = polynomial_blob(grid, np.array([0.0, 0.0, 0.1]) + drift * 0.1, 0.45)
    rel_l1 = np.sum(np.abs(rho.values - exact.values)) / np.sum(exact.values)
    assert rel_l1 <= 0.02


def test_transport_solid_body_rotation_returns_home():
    grid = GridSpec((-0.7, -0.7, -0.7), 1.4 / 63, (64, 64, 64))
    rho0 = polynomial_blob(grid, (0.04, 0.0, 0.0), 0.42)
    nodes = grid.nodes()
    omega = 2.0 * np.pi
    w = np.zeros(grid.dims + (3,))
    w[..., 0] = -omega * nodes[..., 1]
    w[..., 1] = omega * nodes[..., 0]
    vel = VelocityField(grid, w, divergence_norm=0.0)
    rho = rho0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for _ in range(20):
            rho = transport_step(rho, vel, np.zeros(3), 1.0 / 20)
    rel_l1 = np.sum(np.abs(rho.values - rho0.values)) / np.sum(rho0.values)
    assert rel_l1 <= 0.05
    assert rho.total_mass == pytest.approx(rho0.total_mass, rel=1e-12)


def test_transport_warns_when_mass_leaks():
    grid = GridSpec((-0.7, -0.7, -0.7), 1.4 / 31, (32, 32, 32))
    blob = polynomial_blob(grid, (0.0, 0.0, 0.0), 0.3)
    with pytest.warns(UserWarning, match="mass correction"):
        transport_step(blob, zero_velocity(grid), np.array([0.0, 0.0, 1.0]), 0.5)


def test_transport_rejects_backtrace_beyond_padding():
    grid = GridSpec((-0.7, -0.7, -0.7), 1.4 / 31, (32, 32, 32))
    blob = polynomial_blob(grid, (0.0, 0.0, 0.0), 0.3)
    with pytest.raises(ValueError, match="padded domain"):
        transport_step(blob, zero_velocity(grid), np.array([0.0, 0.0, 1.0]), 1.5)


# ---------------------------------------------------------- time marching ---

def test_evolve_snapshot_schedule_and_string_dispatch():
    grid = GridSpec((-0.66, -0.66, -0.66), 1.32 / 23, (24, 24, 24))
    blob = polynomial_blob(grid, (0.0, 0.0, 0.0), 0.35)
    rho0 = DensityField(grid, blob.values / blob.total_mass)
    setup = PhysicalSetup((0.0, 0.0, -1.0), 1000, 2.9e-5)
    with warnings.catch_warnings():
        # the deliberately coarse grid loses ~0.2% mass per step
        warnings.simplefilter("ignore", UserWarning)
        out = evolve_system("tau", rho0, setup, t_end=0.1, dt=0.025, output_stride=2)
    assert [t for t, _, _ in out] == pytest.approx([0.0, 0.05, 0.1])
    with pytest.raises(ValueError, match="integer number of steps"):
        evolve_system("tau", rho0, setup, t_end=0.1, dt=0.03)


def test_evolve_systems_agree_at_vanishing_phi():
    # phi ~ 1e-10: the Einstein correction and the effective fixed point
    # are O(phi) perturbations, so all three systems must coincide far
    # below the 1e-8 gate while the drift stays finite
    grid = GridSpec((-1.3, -1.3, -1.3), 2.6 / 31, (32, 32, 32))
    setup = PhysicalSetup((0.0, 0.0, -1.0), 1000, 2.9e-5)
    assert setup.volume_fraction < 1e-9
    rho0 = polynomial_blob(grid, (0.0, 0.0, 0.0), 0.8)
    finals = {}
    for which in MacroSystem:
        out = evolve_system(which, rho0, setup, t_end=0.1, dt=0.025)
        finals[which] = out[-1]
    t_tau, rho_tau, vel_tau = finals[MacroSystem.TAU]
    assert t_tau == pytest.approx(0.1)
    for which in (MacroSystem.RHO, MacroSystem.RHO_EFF):
        _, rho_w, vel_w = finals[which]
        assert np.max(np.abs(rho_w.values - rho_tau.values)) <= 1e-8
        assert np.max(np.abs(vel_w.values - vel_tau.values)) <= 1e-8


@pytest.fixture(scope="module")
def nested_tau_runs():
    # same box sampled at h, h/2 and h/4 with nested node sets
    setup = PhysicalSetup.from_volume_fraction((0.0, 0.0, -1.0), 1000, 0.02)
    runs = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for dims, cell in ((32, 0.05), (63, 0.025), (125, 0.0125)):
            grid = GridSpec((-0.775, -0.775, -0.775), cell, (dims, dims, dims))
            rho0 = polynomial_blob(grid, (0.0, 0.0, 0.1), 0.45)
            runs[dims] = evolve_system(MacroSystem.TAU, rho0, setup,
                                       t_end=0.5, dt=0.125)
    return runs


def test_evolve_grid_self_error_drops_by_three(nested_tau_runs):
    coarse = nested_tau_runs[32][-1][1].values
    mid = nested_tau_runs[63][-1][1].values
    fine = nested_tau_runs[125][-1][1].values
    err_coarse = np.mean(np.abs(coarse - mid[::2, ::2, ::2]))
    err_mid = np.mean(np.abs(mid - fine[::2, ::2, ::2]))
    assert err_coarse / err_mid >= 3.0


def test_evolve_preserves_mass_and_maximum(nested_tau_runs):
    snaps = nested_tau_runs[63]
    sup0 = snaps[0][1].sup_norm()
    for _, rho, _ in snaps:
        assert abs(rho.total_mass - 1.0) <= 1e-3
        assert rho.sup_norm() <= (1.0 + 1e-2) * sup0


# -------------------------------------------------------------- file I/O ---

def test_save_load_density_roundtrip(tmp_path):
    grid = GridSpec((-0.66, -0.66, -0.66), 1.32 / 15, (16, 16, 16))
    blob = polynomial_blob(grid, (0.05, -0.1, 0.0), 0.4)
    path = tmp_path / "rho.f64"
    save_field(path, blob)
    back = load_field(path)
    assert isinstance(back, DensityField)
    assert back.grid == grid
    assert np.array_equal(back.values, blob.values)


def test_save_load_velocity_roundtrip(tmp_path):
    grid = GridSpec((0.0, 0.0, 0.0), 0.25, (8, 8, 8))
    rng = np.random.default_rng(11)
    vel = VelocityField(grid, rng.normal(size=grid.dims + (3,)), divergence_norm=0.0)
    path = tmp_path / "vel.f64"
    save_field(path, vel)
    back = load_field(path)
    assert isinstance(back, VelocityField)
    assert back.grid == grid
    assert np.array_equal(back.values, vel.values)


def test_save_layout_is_x_fastest(tmp_path):
    grid = GridSpec((0.0, 0.0, 0.0), 1.0, (4, 4, 4))
    idx = np.indices(grid.dims)
    vals = idx[0] + 10.0 * idx[1] + 100.0 * idx[2]
    path = tmp_path / "layout.f64"
    save_field(path, DensityField(grid, vals))
    raw = np.fromfile(path, dtype="<f8")
    assert raw[0] == 0.0
    assert raw[1] == 1.0   # (1,0,0): x varies fastest
    assert raw[4] == 10.0  # (0,1,0)
    assert raw[16] == 100.0  # (0,0,1)
