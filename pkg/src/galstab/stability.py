"""Perturb-and-evolve experiments around steady states.

A stability run samples a steady state, applies a Casimir-preserving
perturbation, integrates the self-gravitating particle dynamics, and records
the energy-Casimir distance d plus the field mismatch as functions of time.
The sum m(t) = d + field_diff is the quantity controlled by the stability
estimate and should stay bounded by a constant times m(0).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .errors import DomainError, UsageError
from .functionals import (
    FunctionalReport,
    evaluate_ensemble,
    evaluate_profile,
    field_difference,
    stability_distance,
)
from .steadystate import ScalingTransform, SteadyStateProfile, apply_scaling


# -- perturbations ------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationSpec:
    """Casimir-preserving perturbation recipes.

    kind: "dilation" (positions * 1/b, velocities * b), "boost" (add a bulk
    velocity, 3D only), "amplitude" (multiply f by 1 + strength, then a
    compensating dilation restores the Casimir), or "plummer_scale" (the
    mass-changing symmetry transformation, exact-solution family only).
    """

    kind: str
    b: float = 1.0
    a: float | None = None  # defaults to 1/b; any other value violates C
    velocity: tuple = (0.0, 0.0, 0.0)
    strength: float = 0.0
    lam: float = 1.0

    def to_dict(self):
        return {"kind": self.kind, "b": self.b, "a": self.a,
                "velocity": list(self.velocity),
                "strength": self.strength, "lam": self.lam}


def perturb(ensemble, spec: PerturbationSpec, model, casimir_tol: float = 1e-10):
    """Apply a perturbation; verify the Casimir sum is preserved."""
    c_before = ensemble.casimir(model)
    if spec.kind == "dilation":
        if spec.b <= 0:
            raise UsageError("dilation factor must be positive")
        a = spec.a if spec.a is not None else 1.0 / spec.b
        out = apply_scaling(ensemble, ScalingTransform.dilation(a, spec.b))
    elif spec.kind == "boost":
        if ensemble.backend != dyn.CARTESIAN3D:
            raise UsageError("a bulk velocity boost needs the 3D backend")
        out = ensemble.copy()
        out.v = out.v + np.asarray(spec.velocity, dtype=float)[None, :]
    elif spec.kind == "amplitude":
        out = ensemble.copy()
        out.f = out.f * (1.0 + spec.strength)
        # restore the Casimir with a compensating dilation: C scales as (ab)^-3
        c_new = out.casimir(model)
        ab = (c_new / c_before) ** (1.0 / 3.0)
        out = apply_scaling(out, ScalingTransform.dilation(ab, 1.0))
    elif spec.kind == "plummer_scale":
        out = apply_scaling(ensemble, ScalingTransform.plummer(spec.lam))
    else:
        raise UsageError(f"unknown perturbation kind {spec.kind!r}")

    c_after = out.casimir(model)
    rel = abs(c_after - c_before) / max(abs(c_before), 1e-300)
    if spec.kind != "plummer_scale" and rel > casimir_tol:
        raise DomainError(
            f"perturbation changed the Casimir sum by a relative {rel:.2e}"
        )
    return out


# -- minimization over the symmetry group -------------------------------------


def best_shift(ensemble, profile, rounds: int = 4):
    """Spatial shift minimizing the field mismatch (3D only).

    Starts from the mass centroid and runs a shrinking coordinate search;
    radial ensembles are centered by construction.
    """
    if ensemble.backend == dyn.RADIAL:
        return np.zeros(3)
    masses = ensemble.masses
    a = np.sum(masses[:, None] * ensemble.x, axis=0) / np.sum(masses)
    scale = profile.half_mass_radius()
    best = field_difference(ensemble, profile, shift=a)
    step_size = 0.2 * scale
    for _ in range(rounds):
        improved = True
        while improved:
            improved = False
            for axis in range(3):
                for sign in (1.0, -1.0):
                    trial = a.copy()
                    trial[axis] += sign * step_size
                    val = field_difference(ensemble, profile, shift=trial)
                    if val < best:
                        best, a, improved = val, trial, True
        step_size *= 0.25
    return a


def best_scale(
    ensemble,
    profile: SteadyStateProfile,
    reference_report: FunctionalReport | None = None,
    lo: float = 0.5,
    hi: float = 2.0,
    tol: float = 1e-4,
):
    """Golden-section search for the symmetry parameter lambda in [lo, hi]
    minimizing m = d + field_diff against the rescaled reference state.

    Only meaningful for the closed-form family whose mass-changing symmetry
    is available; the total energy of the reference is scale-invariant, so
    one reference report serves every lambda.
    """
    if profile.plummer_c0 is None:
        raise DomainError("scale optimization needs the closed-form family")

    def m_of(lam):
        ref = apply_scaling(profile, ScalingTransform.plummer(lam))
        rep = stability_distance(ensemble, ref, reference_report=reference_report)
        return rep.m, rep

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = math.log(lo), math.log(hi)
    c = b - invphi * (b - a)
    d_ = a + invphi * (b - a)
    fc, _ = m_of(math.exp(c))
    fd, _ = m_of(math.exp(d_))
    while b - a > tol:
        if fc < fd:
            b, d_, fd = d_, c, fc
            c = b - invphi * (b - a)
            fc, _ = m_of(math.exp(c))
        else:
            a, c, fc = c, d_, fd
            d_ = a + invphi * (b - a)
            fd, _ = m_of(math.exp(d_))
    lam = math.exp(0.5 * (a + b))
    val, rep = m_of(lam)
    return lam, rep


# -- time series --------------------------------------------------------------

_SERIES_COLUMNS = [
    "t", "hamiltonian", "casimir", "mass", "d", "d_raw", "field_diff", "m",
    "shift_x", "shift_y", "shift_z", "scale",
]


@dataclass
class StabilityTimeSeries:
    rows: list = field(default_factory=list)

    def append(self, row: dict):
        self.rows.append({k: row.get(k, 0.0) for k in _SERIES_COLUMNS})

    def column(self, name) -> np.ndarray:
        return np.array([row[name] for row in self.rows])

    def to_csv(self, path_or_buf):
        if hasattr(path_or_buf, "write"):
            self._write(path_or_buf)
        else:
            with open(path_or_buf, "w", newline="") as fh:
                self._write(fh)

    def _write(self, fh):
        writer = csv.DictWriter(fh, fieldnames=_SERIES_COLUMNS)
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: repr(float(v)) for k, v in row.items()})

    @classmethod
    def from_csv(cls, path) -> "StabilityTimeSeries":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.rows.append({k: float(row[k]) for k in _SERIES_COLUMNS})
        return out

    def bound_ratio(self) -> float:
        """max_t m(t) / m(0), the constant in the stability estimate."""
        m = self.column("m")
        return float(np.max(m) / max(m[0], 1e-300))

    def trend(self, discard_fraction: float = 0.25):
        """Least-squares slope of m(t) after an initial transient window.

        Returns (slope, stderr); secular growth means slope - 2*stderr > 0.
        """
        t, m = self.column("t"), self.column("m")
        start = int(len(t) * discard_fraction)
        t, m = t[start:], m[start:]
        if len(t) < 3:
            raise UsageError("too few records for a trend estimate")
        coef, cov = np.polyfit(t, m, 1, cov=True)
        return float(coef[0]), float(math.sqrt(cov[0, 0]))

    def secular_growth(self, discard_fraction: float = 0.25) -> bool:
        slope, err = self.trend(discard_fraction)
        typical = np.mean(self.column("m"))
        span = self.rows[-1]["t"] - self.rows[0]["t"]
        # growth is secular if significant and material over the run
        return slope - 2.0 * err > 0 and slope * span > 0.1 * typical


# -- the experiment driver ----------------------------------------------------


@dataclass
class StabilityRunConfig:
    n_particles: int = 20000
    seed: int = 1
    backend: str = dyn.RADIAL
    t_end_dyn: float = 5.0      # run length in dynamical times
    steps_per_dyn: int = 200    # leapfrog steps per dynamical time
    cadence: int = 20           # steps between monitor records
    softening: float = 0.0
    optimize_shift: bool = False
    optimize_scale: bool = False
    frozen_field: bool = False

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def stability_run(
    profile: SteadyStateProfile,
    perturbation: PerturbationSpec | None,
    config: StabilityRunConfig,
):
    """Sample, perturb, evolve, and monitor.  Returns (ensemble, series, manifest)."""
    model = profile.model
    base_report = evaluate_profile(profile)
    t_dyn = dyn.dynamical_time(profile)
    softening = config.softening
    if config.backend == dyn.CARTESIAN3D and softening == 0.0:
        # desk-scale default: a fraction of the mean interparticle spacing
        softening = 0.5 * profile.half_mass_radius() * config.n_particles ** (-1.0 / 3.0)

    ens = dyn.sample_steady_state(
        profile, config.n_particles, backend=config.backend, seed=config.seed
    )
    if perturbation is not None:
        ens = perturb(ens, perturbation, model)

    integ = dyn.IntegratorConfig(dt=t_dyn / config.steps_per_dyn, softening=softening)
    n_steps = int(round(config.t_end_dyn * config.steps_per_dyn))

    series = StabilityTimeSeries()

    def monitor(e):
        if config.frozen_field:
            rep = evaluate_ensemble(e, model=model, field=profile)
            # conserved frozen-field energy: E_kin + sum m U_ext
            ham = rep.e_kin + 2.0 * rep.e_pot_field
        else:
            rep = evaluate_ensemble(e, model=model, softening=softening)
            ham = rep.hamiltonian
        shift = np.zeros(3)
        scale = 1.0
        if config.optimize_shift and e.backend == dyn.CARTESIAN3D:
            shift = best_shift(e, profile)
        if config.optimize_scale:
            scale, dist = best_scale(e, profile, reference_report=base_report)
        else:
            sh = shift if e.backend == dyn.CARTESIAN3D else None
            dist = stability_distance(e, profile, shift=sh, reference_report=base_report)
        return {
            "hamiltonian": ham,
            "casimir": rep.casimir,
            "mass": rep.mass,
            "d": dist.d,
            "d_raw": dist.d_raw,
            "field_diff": dist.field_diff,
            "m": dist.m,
            "shift_x": shift[0], "shift_y": shift[1], "shift_z": shift[2],
            "scale": scale,
        }

    field_src = profile if config.frozen_field else None
    final, records = dyn.run(
        ens, integ, monitors={"_": monitor}, field=field_src,
        cadence=config.cadence, n_steps=n_steps,
    )
    for row in records:
        series.append(row)

    manifest = {
        "profile_sha256": hashlib.sha256(profile.to_json().encode()).hexdigest(),
        "perturbation": perturbation.to_dict() if perturbation else None,
        "config": config.to_dict(),
        "t_dyn": t_dyn,
        "softening": softening,
        "n_steps": n_steps,
        "bound_ratio": series.bound_ratio(),
    }
    return final, series, manifest


def write_run_outputs(series: StabilityTimeSeries, manifest: dict, outdir, stem="stability"):
    import os

    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, f"{stem}.csv")
    series.to_csv(csv_path)
    manifest_path = os.path.join(outdir, f"{stem}_manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return csv_path, manifest_path
