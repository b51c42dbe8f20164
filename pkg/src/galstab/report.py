"""Figure rendering for stability time series.

Kept separate from the data-producing commands: the CSV is the primary
artifact, the figures are a convenience layer on top of it.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .stability import StabilityTimeSeries


def render_stability_figures(series: StabilityTimeSeries, outdir, stem="stability"):
    """Write the distance and conservation figures as PNGs; returns paths."""
    os.makedirs(outdir, exist_ok=True)
    t = series.column("t")
    paths = []

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(t, series.column("m"), label=r"$m = d + \mathrm{field\ diff}$", lw=1.8)
    ax.plot(t, series.column("d"), label=r"$d(f, f_0)$", lw=1.0)
    ax.plot(t, series.column("field_diff"), label="field diff", lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("distance to the steady state")
    ax.set_ylim(bottom=0.0)
    ax.legend(frameon=False)
    ax.set_title(f"max m(t)/m(0) = {series.bound_ratio():.3f}")
    fig.tight_layout()
    p = os.path.join(outdir, f"{stem}_distance.png")
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name, label in [("hamiltonian", "energy"), ("casimir", "Casimir"), ("mass", "mass")]:
        vals = series.column(name)
        ref = vals[0] if vals[0] != 0 else 1.0
        ax.plot(t, np.abs(vals / ref - 1.0), label=label, lw=1.2)
    ax.set_xlabel("t")
    ax.set_ylabel("relative drift")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    p = os.path.join(outdir, f"{stem}_conservation.png")
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(p)
    return paths
