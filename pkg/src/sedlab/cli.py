"""Command-line front end: config-file driven experiments.

Subcommands: ``kernels-check`` (decay/divergence self-test),
``simulate-micro`` (particle run, trace CSV), ``simulate-macro``
(continuum run, field snapshots), ``compare`` (one matched run,
records.csv), ``sweep`` (full rate study, records.csv + fits.json) and
``wdist`` (transport distance between two saved measures).

The config file is INI-style with sections [setup], [grid], [sweep] and
[output]; every key has a default (see ``DEFAULTS``), so an empty file
is a valid, if slow, experiment.

Exit codes: 0 success, 2 partial failure (some runs aborted), 1 error.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from .configuration import generate_well_prepared, load_configuration, save_configuration
from .continuum import GridSpec, evolve_system, load_field, save_field
from .kernels import PhysicalSetup, oseen, stresslet_velocity
from .lab import (
    SweepPlan,
    check_kernel_condition,
    initial_blob,
    run_comparison,
    run_continuum_rates,
    run_sweep,
    write_outputs,
)
from .microdynamics import ContactError, integrate
from .wasserstein import DiscreteMeasure, quantize, wasserstein_inf, wasserstein_p

#: Every config key and its default, by section.  Values are strings as
#: configparser sees them; lists are whitespace-separated.
DEFAULTS = {
    "setup": {
        "n": "512",
        "theta": "0.5",
        "phi0": "0.05",
        "model": "mf0",
        "gravity": "0 0 -1",
        "seed": "1",
        "system": "tau",
    },
    "grid": {
        "origin": "-2.1 -2.1 -2.1",
        "cell": str(4.2 / 63),
        "dims": "64 64 64",
    },
    "sweep": {
        "n_values": "512 1024 2048 4096",
        "t_end": "0.5",
        "dt": "0.1",
        "output_stride": "1",
        "quant_atoms": "2000",
        "max_arcs": "2000000",
        "probes": "128",
        "phi_values": "",
        "anchor_n": "",
        "continuum_phis": "",
        "t_probe": "0.5",
        "workers": "",
        "with_rho_eff": "true",
    },
    "output": {
        "dir": "out",
    },
}


def load_config(path):
    """Parse an INI config, layering file values over DEFAULTS."""
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file {path!r} does not exist")
        parser.read(path)
    return parser


def _floats(text):
    return tuple(float(v) for v in text.split())


def _ints(text):
    return tuple(int(v) for v in text.split())


def _grid(cfg):
    g = cfg["grid"]
    return GridSpec(_floats(g["origin"]), float(g["cell"]), _ints(g["dims"]))


def _plan(cfg):
    s, sw, out = cfg["setup"], cfg["sweep"], cfg["output"]
    workers = sw["workers"].strip()
    anchor = sw["anchor_n"].strip()
    return SweepPlan(
        n_values=_ints(sw["n_values"]),
        theta=float(s["theta"]),
        t_end=float(sw["t_end"]),
        model=s["model"],
        grid=_grid(cfg),
        seed=int(s["seed"]),
        output_dir=out["dir"],
        gravity=_floats(s["gravity"]),
        dt=float(sw["dt"]),
        output_stride=int(sw["output_stride"]),
        phi0=float(s["phi0"]),
        phi_values=_floats(sw["phi_values"]) if sw["phi_values"].strip() else (),
        anchor_n=int(anchor) if anchor else None,
        quant_atoms=int(sw["quant_atoms"]),
        max_arcs=int(sw["max_arcs"]),
        probes=int(sw["probes"]),
        workers=int(workers) if workers else None,
        with_rho_eff=cfg.getboolean("sweep", "with_rho_eff"),
    )


def _cloud(cfg):
    s = cfg["setup"]
    rho0 = initial_blob(_grid(cfg))
    return generate_well_prepared(
        rho0, int(s["n"]), float(s["theta"]), seed=int(s["seed"]),
        gravity=_floats(s["gravity"]), phi0=float(s["phi0"]),
    )


def cmd_kernels_check(args):
    cfg = load_config(args.config)
    g = np.asarray(_floats(cfg["setup"]["gravity"]))
    s0 = np.diag([1.0, 1.0, -2.0]) / (8.0 * np.pi)

    def stokeslet(x):
        return np.einsum("...ij,j->...i", oseen(x), g)

    def dipole(x):
        return stresslet_velocity(x, s0, check=False)

    checks = [
        ("Phi g", stokeslet, 1.0, True),
        ("Phi g", stokeslet, 0.5, False),
        ("Phi g (|x|<=1 only)", stokeslet, 2.0, None),
        ("e(Phi) dipole", dipole, 2.0, True),
    ]
    failed = False
    for name, kernel, alpha, expect in checks:
        rep = check_kernel_condition(kernel, alpha, samples=args.samples, seed=args.seed)
        verdict = "pass" if rep.passed else "FAIL"
        note = "" if rep.uniform else "  (non-uniform: constant drifts across decades)"
        print(f"{name:22s} alpha={alpha:<4g} C={rep.constant:.4g} "
              f"C(|x|<=1)={rep.restricted_constant:.4g} "
              f"div={rep.divergence_max:.2e}  {verdict}{note}")
        if expect is not None and rep.passed != expect:
            failed = True
    return 1 if failed else 0


def cmd_simulate_micro(args):
    cfg = load_config(args.config)
    sw, out_dir = cfg["sweep"], cfg["output"]["dir"]
    cloud = _cloud(cfg)
    try:
        trace = integrate(cloud, cfg["setup"]["model"], float(sw["t_end"]),
                          dt=float(sw["dt"]), output_stride=int(sw["output_stride"]))
    except ContactError as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 2
    os.makedirs(out_dir, exist_ok=True)
    trace.to_csv(os.path.join(out_dir, "trace.csv"))
    save_configuration(os.path.join(out_dir, "final_configuration.txt"), trace.final)
    print(f"{len(trace.times)} snapshots -> {out_dir}/trace.csv; "
          f"final d_min {trace.stats[-1].d_min:.6g}")
    return 0


def cmd_simulate_macro(args):
    cfg = load_config(args.config)
    s, sw, out_dir = cfg["setup"], cfg["sweep"], cfg["output"]["dir"]
    setup = PhysicalSetup.from_volume_fraction(
        _floats(s["gravity"]), int(s["n"]),
        float(s["phi0"]) * int(s["n"]) ** -float(s["theta"]),
    )
    rho0 = initial_blob(_grid(cfg))
    snaps = evolve_system(s["system"], rho0, setup, float(sw["t_end"]),
                          float(sw["dt"]), output_stride=int(sw["output_stride"]))
    os.makedirs(out_dir, exist_ok=True)
    save_field(os.path.join(out_dir, f"final_{s['system']}.f64"), snaps[-1][1])
    with open(os.path.join(out_dir, "macro_times.csv"), "w") as fh:
        fh.write("t,mass,sup\n")
        for t, rho, _ in snaps:
            fh.write(f"{t:.17g},{rho.total_mass:.17g},{rho.sup_norm():.17g}\n")
    print(f"{len(snaps)} snapshots -> {out_dir}/final_{s['system']}.f64")
    return 0


def cmd_compare(args):
    cfg = load_config(args.config)
    plan = _plan(cfg)
    result = run_comparison(int(cfg["setup"]["n"]), plan)
    write_outputs(plan.output_dir, [result], {
        "self_drift": {f"N={result.n}": result.self_drift},
        "dmin_envelope_c": {f"N={result.n}": result.dmin_envelope_c},
        "aborts": {} if result.valid else {f"N={result.n}": result.abort_reason},
    })
    if not result.valid:
        print(f"aborted: {result.abort_reason}", file=sys.stderr)
        return 2
    print(f"{len(result.rows)} records -> {plan.output_dir}/records.csv; "
          f"eta_tau(t_end) {result.eta_tau_end:.6g}")
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config)
    plan = _plan(cfg)
    results, fits = run_sweep(plan)
    phis = cfg["sweep"]["continuum_phis"].strip()
    if phis:
        fits["continuum"] = run_continuum_rates(
            _floats(phis), plan.grid, float(cfg["sweep"]["t_probe"]), plan.dt,
            gravity=plan.gravity, quant_atoms=plan.quant_atoms, max_arcs=plan.max_arcs,
        )
    csv_path, json_path = write_outputs(plan.output_dir, results, fits)
    print(f"{sum(len(r.rows) for r in results if r.valid)} records -> {csv_path}; "
          f"fits -> {json_path}")
    if fits["aborts"]:
        for key, why in fits["aborts"].items():
            print(f"aborted {key}: {why}", file=sys.stderr)
        return 2
    return 0


def _load_measure(path, atoms):
    """A saved density (.f64) or configuration (.txt) as a discrete measure."""
    if path.endswith(".f64"):
        fld = load_field(path)
        if fld.values.ndim != 3:
            raise ValueError(f"{path}: expected a density field, got a velocity field")
        return quantize(fld, atoms)
    return DiscreteMeasure.empirical(load_configuration(path).positions)


def cmd_wdist(args):
    mu = _load_measure(args.a, args.atoms)
    nu = _load_measure(args.b, args.atoms)
    if args.p == "inf":
        value, _ = wasserstein_inf(mu, nu, max_arcs=args.max_arcs, with_plan=False)
    else:
        value, _ = wasserstein_p(mu, nu, float(args.p), max_arcs=args.max_arcs)
    print(f"{value:.17g}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="sedlab", description="sedimentation experiments: micro/macro runs and rate fits"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pk = sub.add_parser("kernels-check", help="decay/divergence self-test of the kernels")
    pk.add_argument("--config", default=None)
    pk.add_argument("--samples", type=int, default=10_000)
    pk.add_argument("--seed", type=int, default=0)
    pk.set_defaults(fn=cmd_kernels_check)

    for name, fn in (("simulate-micro", cmd_simulate_micro),
                     ("simulate-macro", cmd_simulate_macro),
                     ("compare", cmd_compare),
                     ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="INI config (defaults used if omitted)")
        p.set_defaults(fn=fn)

    pw = sub.add_parser("wdist", help="transport distance between two saved measures")
    pw.add_argument("a", help="density (.f64) or configuration (.txt) file")
    pw.add_argument("b")
    pw.add_argument("--p", default="2", help="order: 1, 2, ... or 'inf'")
    pw.add_argument("--atoms", type=int, default=2000)
    pw.add_argument("--max-arcs", type=int, default=400_000, dest="max_arcs")
    pw.set_defaults(fn=cmd_wdist)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports, code 1
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
