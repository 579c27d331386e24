"""Publication figures for sweep outputs.

Reads the sweep deliverables (``records.csv`` and ``fits.json``) and
renders three figure kinds as SVG files:

* ``RATE`` -- log-log discretization floor against N with the fitted
  power law overlaid and its exponent annotated,
* ``ETA``  -- transport error ``eta_tau(t)`` per run against the
  exponential envelope ``e^(C_hat t) (eta(0) + e_N)``, where ``e_N`` is
  the run's measured floor,
* ``DMIN`` -- minimum inter-particle gap per run against the fitted
  contraction envelope ``d_min(0) e^(-C t)``.

Rendering is a pure function of the two input files: repeated calls
produce byte-identical vector output (fixed size and fonts, no clock,
no random state).  Nothing here imports the simulation package; the CSV
and JSON files are the entire interface.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

__all__ = ["FigureKind", "FigureSpec", "SchemaError", "render"]


class SchemaError(ValueError):
    """An input file does not match the documented records/fits schema."""


class FigureKind(enum.Enum):
    RATE = "rate"
    ETA = "eta"
    DMIN = "dmin"


@dataclass(frozen=True)
class FigureSpec:
    """One figure to render.

    Parameters
    ----------
    records, fits:
        Paths to the sweep's ``records.csv`` and ``fits.json``.
    kind:
        Which figure to draw.
    output:
        Destination file (SVG); parent directories are created.
    annotate_fit:
        Print the fitted constants (slope, C_hat, C) on the axes.
    legend:
        Draw the per-run legend.
    """

    records: str | Path
    fits: str | Path
    kind: FigureKind
    output: str | Path
    annotate_fit: bool = True
    legend: bool = True


#: Columns a figure kind reads, beyond the run keys (N, phi, t).
KIND_COLUMNS = {
    FigureKind.RATE: ("floor_w2",),
    FigureKind.ETA: ("eta_tau", "floor_w2"),
    FigureKind.DMIN: ("dmin",),
}

#: fits.json entries a figure kind requires.
KIND_FITS = {
    FigureKind.RATE: ("floor_w2_vs_n",),
    FigureKind.ETA: ("eta_tau_envelope_chat",),
    FigureKind.DMIN: ("dmin_envelope_c",),
}

#: Everything below is pinned so that the output bytes depend only on
#: the input files (and the matplotlib version), not on user rc files.
_RC = {
    "figure.figsize": (6.4, 4.4),
    "figure.dpi": 100.0,
    "font.family": "DejaVu Sans",
    "font.size": 10.0,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 9.0,
    "svg.fonttype": "none",
    "svg.hashsalt": "sedplots",
}

_ENVELOPE_SAMPLES = 200


# ------------------------------------------------------------- input files --

def _read_rows(path):
    """records.csv as (header tuple, list of raw string rows)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: records file is empty")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: records file has a header but no rows")
    return tuple(reader.fieldnames), rows


def _read_fits(path, needed):
    with open(path) as fh:
        fits = json.load(fh)
    for key in needed:
        if key not in fits:
            raise SchemaError(f"{path}: missing required fit entry '{key}'")
    return fits


def _group_runs(header, rows, value_columns, path):
    """Rows grouped into runs keyed by (N, phi), each sorted by t.

    Raises SchemaError naming the first column that is absent from the
    header or holds a non-numeric value.
    """
    columns = ("N", "phi", "t") + tuple(value_columns)
    for col in columns:
        if col not in header:
            raise SchemaError(f"{path}: missing required column '{col}'")
    runs: dict[tuple[int, float], list[dict[str, float]]] = {}
    for row in rows:
        parsed = {}
        for col in columns:
            raw = row.get(col)
            try:
                parsed[col] = float(raw)
            except (TypeError, ValueError):
                raise SchemaError(
                    f"{path}: column '{col}' holds non-numeric value {raw!r}"
                ) from None
        runs.setdefault((int(parsed["N"]), parsed["phi"]), []).append(parsed)
    for run in runs.values():
        run.sort(key=lambda r: r["t"])
    return dict(sorted(runs.items()))


def _run_label(n, phi, runs):
    """N alone when unambiguous; N with phi when runs share an N."""
    if sum(1 for (m, _) in runs if m == n) == 1:
        return f"N = {n}"
    return f"N = {n}, phi = {phi:.3g}"


def _slope_stderr(fit):
    """Standard error of a fitted log-log slope, from r^2 and the point
    count the fit ships with it (zero when the fit is exact or has no
    spare degrees of freedom)."""
    n = len(fit.get("abscissa", ()))
    r2 = float(fit.get("r_squared", 1.0))
    if n < 3 or r2 <= 0.0 or r2 >= 1.0:
        return 0.0
    return abs(float(fit["slope"])) * math.sqrt((1.0 - r2) / (r2 * (n - 2)))


# ----------------------------------------------------------------- figures --

def _colors():
    return matplotlib.rcParams["axes.prop_cycle"].by_key()["color"]


def _build_rate(spec, header, rows):
    runs = _group_runs(header, rows, KIND_COLUMNS[FigureKind.RATE], spec.records)
    fit = _read_fits(spec.fits, KIND_FITS[FigureKind.RATE])["floor_w2_vs_n"]
    fig = Figure()
    ax = fig.add_subplot()
    ns = np.array([n for (n, _) in runs], dtype=float)
    floors = np.array([run[0]["floor_w2"] for run in runs.values()])
    ax.loglog(ns, floors, "o", color=_colors()[0], label="measured floor")
    line_x = np.geomspace(ns.min(), ns.max(), _ENVELOPE_SAMPLES)
    line_y = 10.0 ** float(fit["intercept"]) * line_x ** float(fit["slope"])
    ax.loglog(line_x, line_y, "--", color=_colors()[1],
              label=f"fit $N^{{{float(fit['slope']):.2f}}}$")
    if spec.annotate_fit:
        ax.text(0.04, 0.08,
                f"slope = {float(fit['slope']):.2f} ± {_slope_stderr(fit):.2f}",
                transform=ax.transAxes)
    ax.set_xlabel("N")
    ax.set_ylabel("floor_w2")
    ax.set_title("Discretization floor vs N")
    if spec.legend:
        ax.legend()
    return fig


def _build_eta(spec, header, rows):
    runs = _group_runs(header, rows, KIND_COLUMNS[FigureKind.ETA], spec.records)
    chat = float(_read_fits(spec.fits, KIND_FITS[FigureKind.ETA])
                 ["eta_tau_envelope_chat"])
    fig = Figure()
    ax = fig.add_subplot()
    colors = _colors()
    for i, ((n, phi), run) in enumerate(runs.items()):
        t = np.array([r["t"] for r in run])
        eta = np.array([r["eta_tau"] for r in run])
        color = colors[i % len(colors)]
        ax.plot(t, eta, "o-", color=color, label=_run_label(n, phi, runs))
        env_t = np.linspace(t[0], t[-1], _ENVELOPE_SAMPLES)
        env = np.exp(chat * env_t) * (eta[0] + run[0]["floor_w2"])
        ax.plot(env_t, env, "--", color=color, linewidth=1.0,
                label="envelope" if i == 0 else None)
    if spec.annotate_fit:
        ax.text(0.04, 0.92, f"C_hat = {chat:.3f}", transform=ax.transAxes)
    ax.set_xlabel("t")
    ax.set_ylabel("eta_tau")
    ax.set_title("Transport error vs exponential envelope")
    if spec.legend:
        ax.legend()
    return fig


def _build_dmin(spec, header, rows):
    runs = _group_runs(header, rows, KIND_COLUMNS[FigureKind.DMIN], spec.records)
    cmap = _read_fits(spec.fits, KIND_FITS[FigureKind.DMIN])["dmin_envelope_c"]
    fig = Figure()
    ax = fig.add_subplot()
    colors = _colors()
    n_counts = Counter(n for (n, _) in runs)
    drawn = []
    for i, ((n, phi), run) in enumerate(runs.items()):
        t = np.array([r["t"] for r in run])
        dmin = np.array([r["dmin"] for r in run])
        color = colors[i % len(colors)]
        ax.semilogy(t, dmin, "o-", color=color, label=_run_label(n, phi, runs))
        # The fitted constants cover the schedule runs, keyed by N alone;
        # attach one only when the N identifies a single run.
        if n_counts[n] == 1 and f"N={n}" in cmap:
            c = float(cmap[f"N={n}"])
            env_t = np.linspace(t[0], t[-1], _ENVELOPE_SAMPLES)
            ax.semilogy(env_t, dmin[0] * np.exp(-c * env_t), "--", color=color,
                        linewidth=1.0, label="envelope" if not drawn else None)
            drawn.append(c)
    if spec.annotate_fit and drawn:
        ax.text(0.04, 0.08, f"max C = {max(drawn):.3g}", transform=ax.transAxes)
    ax.set_xlabel("t")
    ax.set_ylabel("dmin")
    ax.set_title("Minimum gap vs contraction envelope")
    if spec.legend:
        ax.legend()
    return fig


_BUILDERS = {
    FigureKind.RATE: _build_rate,
    FigureKind.ETA: _build_eta,
    FigureKind.DMIN: _build_dmin,
}


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the path written.

    Raises SchemaError when the inputs lack a column or fit entry the
    kind needs (the message names it), and propagates OSError /
    json.JSONDecodeError for unreadable inputs.
    """
    header, rows = _read_rows(spec.records)
    output = Path(spec.output)
    with matplotlib.rc_context(_RC):
        fig = _BUILDERS[spec.kind](spec, header, rows)
        FigureCanvasSVG(fig)
        output.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(output, format="svg", metadata={"Date": None})
    return output
