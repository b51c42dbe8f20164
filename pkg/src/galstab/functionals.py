"""Energy and Casimir functionals for profiles and particle ensembles.

The potential energy is always reported in two mathematically equivalent
forms -- a field integral and a double (interaction) form -- whose agreement
is the main internal consistency check.  Both forms describe the same
truncated mass distribution, so they agree to quadrature accuracy even when
the density has an infinite tail beyond the stored grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.integrate import simpson, cumulative_simpson, cumulative_trapezoid

from .casimir import phi_of_depth
from .errors import DomainError, NumericalError, UsageError
from .steadystate import DepthKernel, SteadyStateProfile
from . import casimir as _cas


@dataclass
class FunctionalReport:
    e_kin: float
    e_pot_field: float
    e_pot_double: float
    hamiltonian: float
    casimir: float
    mass: float
    e_pot_rel_gap: float
    softening: float = 0.0

    @property
    def e_pot(self) -> float:
        return self.e_pot_field

    def to_json(self) -> str:
        payload = asdict(self)
        payload["e_pot"] = self.e_pot
        return json.dumps(payload, indent=2)


def _tabulate(profile: SteadyStateProfile, density_fn) -> np.ndarray:
    """Velocity-moment values on the profile grid via a depth-space table."""
    depth = profile.e0 - profile.U
    dmax = float(np.max(depth))
    if dmax <= 0:
        return np.zeros_like(profile.r)
    kernel = DepthKernel(profile.model, profile.lambda0, dmax, density_fn)
    return kernel(depth)


def evaluate_profile(profile: SteadyStateProfile) -> FunctionalReport:
    """All functionals of a steady-state profile by radial quadrature."""
    r, rho, m_enc = profile.r, profile.rho, profile.M_enc
    if profile.total_mass == 0.0 or not np.any(rho > 0):
        return FunctionalReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    kin = _tabulate(profile, _cas.kinetic_density_of_potential)
    e_kin = simpson(4.0 * math.pi * r**2 * kin, x=r)

    # field form: -(1/2) int M^2/r^2 dr, plus the exterior of the stored grid
    # where the (truncated) enclosed mass is constant
    integrand = np.zeros_like(r)
    integrand[1:] = m_enc[1:] ** 2 / r[1:] ** 2
    tail = m_enc[-1] ** 2 / r[-1]
    e_pot_field = -0.5 * (simpson(integrand, x=r) + tail)

    # double form: (1/2) int rho U_trunc with the potential generated by the
    # truncated density itself
    outer = cumulative_simpson(4.0 * math.pi * r * rho, x=r, initial=0.0)
    outer = outer[-1] - outer  # int_r^rmax 4 pi s rho ds
    u_self = np.empty_like(r)
    u_self[1:] = -m_enc[1:] / r[1:] - outer[1:]
    u_self[0] = -outer[0]
    e_pot_double = 0.5 * simpson(4.0 * math.pi * r**2 * rho * u_self, x=r)

    cas = _tabulate(profile, _cas.casimir_density_of_potential)
    casimir = simpson(4.0 * math.pi * r**2 * cas, x=r)
    mass = simpson(4.0 * math.pi * r**2 * rho, x=r)

    gap = abs(e_pot_field - e_pot_double) / max(abs(e_pot_field), 1e-300)
    return FunctionalReport(
        e_kin=float(e_kin),
        e_pot_field=float(e_pot_field),
        e_pot_double=float(e_pot_double),
        hamiltonian=float(e_kin + e_pot_field),
        casimir=float(casimir),
        mass=float(mass),
        e_pot_rel_gap=float(gap),
    )


# -- ensemble functionals -----------------------------------------------------


def radial_potential_energy(r, masses):
    """Field and interaction potential energies of spherical mass shells.

    Field form integrates M(r)^2/r^2 between sorted shells (each particle's
    own shell contributes half its mass at its radius); interaction form is
    the exact shell-shell double sum.  The two differ only through the
    discreteness convention at coincident radii.
    """
    order = np.argsort(r, kind="stable")
    rs, ms = r[order], masses[order]
    cum = np.cumsum(ms)
    # field form: M constant between consecutive radii, Kepler tail outside
    inv = 1.0 / np.maximum(rs, 1e-300)
    seg = cum[:-1] ** 2 * (inv[:-1] - inv[1:])
    e_field = -0.5 * (np.sum(seg) + cum[-1] ** 2 * inv[-1])
    # interaction form: -sum_i m_i * (mass strictly inside r_i) / r_i
    inside = cum - ms
    e_double = -np.sum(ms * inside * inv)
    return float(e_field), float(e_double)


def pairwise_potential_energy(x, masses, softening=0.0, chunk=2048):
    """Softened direct-sum interaction energy, chunked O(N^2)."""
    n = len(masses)
    eps2 = softening * softening
    total = 0.0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = x[None, :, :] - x[start:stop, None, :]
        dist2 = np.sum(d * d, axis=2) + eps2
        rows = np.arange(stop - start)
        dist2[rows, start + rows] = np.inf
        total += np.sum(masses[start:stop, None] * masses[None, :] / np.sqrt(dist2))
    return -0.5 * float(total)


def evaluate_ensemble(ensemble, model=None, field=None, softening=0.0) -> FunctionalReport:
    """Functionals of a particle ensemble.

    With field=None the potential energy is the ensemble's self-energy;
    passing a profile evaluates the particles in that frozen external field
    instead (then E_pot = (1/2) sum m U_ext, the frozen-field invariant).
    """
    masses = ensemble.masses
    e_kin = float(np.sum(masses * ensemble.specific_kinetic()))
    mass = float(np.sum(masses))
    cas = float(np.sum(ensemble.omega * model.q(ensemble.f))) if model is not None else math.nan

    if field is not None:
        u_ext = np.atleast_1d(field.potential_at(ensemble.radii()))
        e_field = e_double = 0.5 * float(np.sum(masses * u_ext))
    elif ensemble.backend == "radial":
        e_field, e_double = radial_potential_energy(ensemble.r, masses)
    else:
        e_field = e_double = pairwise_potential_energy(ensemble.x, masses, softening)

    gap = abs(e_field - e_double) / max(abs(e_field), 1e-300)
    return FunctionalReport(
        e_kin=e_kin,
        e_pot_field=e_field,
        e_pot_double=e_double,
        hamiltonian=e_kin + e_field,
        casimir=cas,
        mass=mass,
        e_pot_rel_gap=gap,
        softening=softening,
    )


def hamiltonian(ensemble, softening=0.0) -> float:
    """Self-consistent total energy of an ensemble (kinetic + field form)."""
    rep = evaluate_ensemble(ensemble, softening=softening)
    return rep.hamiltonian


# -- energy-Casimir distance to a reference steady state ----------------------


@dataclass
class DistanceReport:
    d: float
    field_diff: float
    d_raw: float
    constraint_gap: float
    constraint_ok: bool

    @property
    def m(self) -> float:
        return self.d + self.field_diff

    def __iter__(self):  # allows d, field_diff = stability_distance(...)
        return iter((self.d, self.field_diff))


def _reference_energies(profile, report=None):
    if report is None:
        report = evaluate_profile(profile)
    return report


def field_difference(ensemble, profile, shift=None) -> float:
    """(1/2) int (M_f - M_0)^2 / r^2 dr on the merged radius grid.

    For 3D ensembles the particle mass profile is taken about the shifted
    center, i.e. the spherically averaged field mismatch.
    """
    if shift is not None and ensemble.backend != "cartesian3d":
        raise UsageError("spatial shifts require a cartesian3d ensemble")
    pos_r = ensemble.radii() if shift is None else np.sqrt(
        np.sum((ensemble.x - np.asarray(shift)[None, :]) ** 2, axis=1)
    )
    masses = ensemble.masses
    order = np.argsort(pos_r, kind="stable")
    rp, mp = pos_r[order], np.cumsum(masses[order])

    grid = np.unique(np.concatenate([rp, profile.r[profile.r > 0]]))
    grid = grid[grid > 0]
    m_f = np.zeros_like(grid)
    idx = np.searchsorted(rp, grid, side="right")
    m_f = np.where(idx > 0, mp[np.minimum(idx, len(mp)) - 1], 0.0)
    m_f[idx == 0] = 0.0
    m_0 = np.atleast_1d(profile.enclosed_mass_at(grid))

    diff2 = (m_f - m_0) ** 2 / grid**2
    val = np.trapezoid(diff2, grid)
    # exterior: both masses constant beyond the last merged radius
    val += (mp[-1] - profile.total_mass) ** 2 / grid[-1]
    return 0.5 * float(val)


def stability_distance(
    ensemble,
    profile: SteadyStateProfile,
    shift=None,
    reference_report: FunctionalReport | None = None,
    constraint_tol: float = 1e-3,
) -> DistanceReport:
    """Energy-Casimir distance d(f, f0) and the field mismatch term.

    d is evaluated in the multiplier-compensated form

        d = sum_p omega_p [ (E_p f_p - lambda0 Q(f_p))
                          - (E_p f0(E_p) - lambda0 Q(f0(E_p))) ],

    whose summands are pointwise nonnegative by convexity of Q, so the
    estimate stays >= 0 at machine precision.  On the constraint set
    C(f) = C(f0) this equals the textbook expression

        d_raw = sum omega f (|v|^2/2 + U0) - [E_kin(f0) + 2 E_pot(f0)],

    which is also reported; the two differ by lambda0 (C(f) - C(f0)) plus
    Monte-Carlo quadrature noise in the reference moment.
    """
    model, lam0 = profile.model, profile.lambda0
    if shift is not None and ensemble.backend != "cartesian3d":
        raise UsageError("spatial shifts require a cartesian3d ensemble")
    radii = ensemble.radii() if shift is None else np.sqrt(
        np.sum((ensemble.x - np.asarray(shift)[None, :]) ** 2, axis=1)
    )
    u0 = np.atleast_1d(profile.potential_at(radii))
    energy = ensemble.specific_kinetic() + u0
    f0_here = phi_of_depth(model, lam0, profile.e0 - energy)

    summand = (
        energy * ensemble.f - lam0 * model.q(ensemble.f)
        - (energy * f0_here - lam0 * model.q(f0_here))
    )
    d = float(np.sum(ensemble.omega * summand))

    ref = _reference_energies(profile, reference_report)
    d_raw = float(
        np.sum(ensemble.omega * ensemble.f * energy) - (ref.e_kin + 2.0 * ref.e_pot_field)
    )

    c_ens = float(np.sum(ensemble.omega * model.q(ensemble.f)))
    c_ref = profile.casimir_mass
    gap = abs(c_ens - c_ref) / max(abs(c_ref), 1e-300)
    ok = gap <= constraint_tol

    fd = field_difference(ensemble, profile, shift=shift)
    if ok and d < -1e-10 * max(abs(ref.e_pot_field), 1e-300):
        raise NumericalError(
            f"energy-Casimir distance came out negative (d={d:.3e}) despite the "
            "Casimir constraint holding; the ensemble weights are inconsistent"
        )
    return DistanceReport(d=d, field_diff=fd, d_raw=d_raw, constraint_gap=gap, constraint_ok=ok)


def interpolation_ratio(profile: SteadyStateProfile, n: float | None = None) -> float:
    """Monitor for the kinetic interpolation estimate: the ratio

        int rho^(1+1/n) dx / E_kin^(3/(2n)) ,

    reported (not asserted) for every constructed state; n defaults to the
    polytropic index k + 3/2."""
    if n is None:
        n = profile.model.k + 1.5
    rep = evaluate_profile(profile)
    num = simpson(4.0 * math.pi * profile.r**2 * profile.rho ** (1.0 + 1.0 / n),
                  x=profile.r)
    if rep.e_kin <= 0:
        raise DomainError("interpolation monitor needs positive kinetic energy")
    return float(num / rep.e_kin ** (3.0 / (2.0 * n)))


def weighted_l2_lower_bound(ensemble, profile: SteadyStateProfile) -> float:
    """The weighted-L2 diagnostic (1/2)(-lambda0) c_Q sum omega (f - f0)^2 with
    c_Q = inf Q'' on (0, f_max]; only meaningful for models whose Q'' is
    bounded below there (polytropic k <= 1 and the jump model)."""
    model = profile.model
    f_max = max(float(np.max(ensemble.f)), profile.central_depth and 1.0)
    grid = np.geomspace(1e-12, max(f_max, 1e-6), 256)
    qpp = np.gradient(model.qprime(grid), grid)
    c_q = float(np.min(qpp))
    if c_q <= 0:
        raise DomainError("Q'' is not bounded below on (0, f_max]")
    radii = ensemble.radii()
    energy = ensemble.specific_kinetic() + np.atleast_1d(profile.potential_at(radii))
    f0_here = phi_of_depth(model, profile.lambda0, profile.e0 - energy)
    return (
        0.5 * (-profile.lambda0) * c_q
        * float(np.sum(ensemble.omega * (ensemble.f - f0_here) ** 2))
    )


def recompute_lambda0(profile: SteadyStateProfile) -> float:
    """Recover the multiplier from the variational identity

        lambda0 * int Q'(f0) f0 = int (|v|^2/2 + U0) f0 = E_kin + 2 E_pot.
    """
    rep = evaluate_profile(profile)
    qw = _tabulate(profile, _cas.qprime_weighted_density)
    denom = simpson(4.0 * math.pi * profile.r**2 * qw, x=profile.r)
    if denom == 0.0:
        raise DomainError("profile carries no mass; multiplier undefined")
    return float((rep.e_kin + 2.0 * rep.e_pot_field) / denom)
