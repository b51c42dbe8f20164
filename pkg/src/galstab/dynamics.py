"""Characteristic-particle integration of the collisionless dynamics.

Particles carry conserved phase-space volumes omega_p and phase-space
density values f_p; mass and the Casimir sum are therefore conserved to
round-off by construction, and only the phase coordinates evolve.  Two
backends: an exact spherically symmetric one using sorted enclosed mass,
and a desk-scale softened direct-sum 3D one.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import PchipInterpolator

from .casimir import phi_of_depth
from .errors import ConvergenceError, DomainError, NumericalError, UsageError
from .steadystate import SteadyStateProfile

RADIAL = "radial"
CARTESIAN3D = "cartesian3d"

_SNAP_MAGIC = b"GSTB"
_BACKEND_CODES = {RADIAL: 1, CARTESIAN3D: 2}
_BACKEND_NAMES = {v: k for k, v in _BACKEND_CODES.items()}


@dataclass
class ParticleEnsemble:
    """Weighted characteristic particles.

    radial backend: r (radius), w (radial velocity), L (angular momentum
    modulus squared).  3D backend: x, v with shape (N, 3).  omega and f are
    never touched by the integrator.
    """

    backend: str
    omega: np.ndarray
    f: np.ndarray
    r: np.ndarray | None = None
    w: np.ndarray | None = None
    L: np.ndarray | None = None
    x: np.ndarray | None = None
    v: np.ndarray | None = None
    t: float = 0.0

    def __post_init__(self):
        if self.backend not in (RADIAL, CARTESIAN3D):
            raise UsageError(f"unknown backend {self.backend!r}")
        if np.any(self.omega <= 0) or np.any(self.f < 0):
            raise DomainError("weights must be positive and f-values nonnegative")

    @property
    def n(self) -> int:
        return len(self.omega)

    @property
    def masses(self) -> np.ndarray:
        return self.omega * self.f

    def total_mass(self) -> float:
        return float(np.sum(self.omega * self.f))

    def casimir(self, model) -> float:
        return float(np.sum(self.omega * model.q(self.f)))

    def kinetic_energy(self) -> float:
        return float(np.sum(self.masses * self.specific_kinetic()))

    def specific_kinetic(self) -> np.ndarray:
        if self.backend == RADIAL:
            return 0.5 * (self.w**2 + self.L / np.maximum(self.r, 1e-300) ** 2)
        return 0.5 * np.sum(self.v * self.v, axis=1)

    def radii(self) -> np.ndarray:
        if self.backend == RADIAL:
            return self.r
        return np.sqrt(np.sum(self.x * self.x, axis=1))

    def copy(self) -> "ParticleEnsemble":
        kw = {}
        for name in ("r", "w", "L", "x", "v"):
            arr = getattr(self, name)
            kw[name] = arr.copy() if arr is not None else None
        return replace(self, omega=self.omega.copy(), f=self.f.copy(), **kw)

    # -- snapshot persistence (little-endian float64 columns) -------------

    def save(self, path):
        cols = (
            [self.r, self.w, self.L]
            if self.backend == RADIAL
            else [self.x[:, 0], self.x[:, 1], self.x[:, 2],
                  self.v[:, 0], self.v[:, 1], self.v[:, 2]]
        )
        cols += [self.omega, self.f]
        with open(path, "wb") as fh:
            fh.write(_SNAP_MAGIC)
            fh.write(struct.pack("<BIQd", 1, _BACKEND_CODES[self.backend], self.n, self.t))
            for c in cols:
                fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParticleEnsemble":
        with open(path, "rb") as fh:
            if fh.read(4) != _SNAP_MAGIC:
                raise UsageError(f"{path} is not an ensemble snapshot")
            _ver, code, n, t = struct.unpack("<BIQd", fh.read(21))
            backend = _BACKEND_NAMES[code]
            ncols = 5 if backend == RADIAL else 8
            data = np.frombuffer(fh.read(8 * n * ncols), dtype="<f8").reshape(ncols, n)
        data = data.astype(float)
        if backend == RADIAL:
            return cls(backend=RADIAL, r=data[0], w=data[1], L=data[2],
                       omega=data[3], f=data[4], t=t)
        return cls(backend=CARTESIAN3D,
                   x=np.ascontiguousarray(data[0:3].T), v=np.ascontiguousarray(data[3:6].T),
                   omega=data[6], f=data[7], t=t)


@dataclass
class IntegratorConfig:
    dt: float
    t_end: float = math.inf
    softening: float = 0.0
    field_update_every: int = 1
    barrier_floor: float = 1e-12
    # pericenter safety: particles whose centrifugal timescale sqrt(L)/v^2
    # is shorter than dt/eta are advanced with internal substeps
    substep_eta: float = 0.05
    max_substeps: int = 100000

    def __post_init__(self):
        if self.dt <= 0:
            raise UsageError("dt must be positive")
        if self.softening < 0:
            raise UsageError("softening must be nonnegative")


def dynamical_time(profile: SteadyStateProfile) -> float:
    """t_dyn = 2 pi sqrt(R_h^3 / M) with R_h the half-mass radius."""
    rh = profile.half_mass_radius()
    return 2.0 * math.pi * math.sqrt(rh**3 / profile.total_mass)


# -- sampling -----------------------------------------------------------------


def sample_steady_state(
    profile: SteadyStateProfile,
    n: int,
    backend: str = RADIAL,
    seed: int = 0,
    r_max: float | None = None,
    envelope_margin: float = 1.2,
) -> ParticleEnsemble:
    """Draw an equal-mass particle realization of the steady state.

    Radii come from inverse-CDF sampling of M_enc; speeds from rejection
    sampling of phi(E) w^2 on [0, w_max(r)]; directions are isotropic.
    Deterministic for a given seed.
    """
    if n < 1:
        raise UsageError("need at least one particle")
    if backend not in (RADIAL, CARTESIAN3D):
        raise UsageError(f"unknown backend {backend!r}")
    rng = np.random.default_rng(seed)
    model, lam0, e0 = profile.model, profile.lambda0, profile.e0

    if r_max is None:
        r_max = profile.r[-1] if not math.isfinite(profile.r_support) else profile.r_support
    # inverse CDF of enclosed mass on a strictly increasing table
    r_tab = np.linspace(0.0, r_max, 4097)
    m_tab = np.atleast_1d(profile.enclosed_mass_at(r_tab))
    keep = np.concatenate([[True], np.diff(m_tab) > 0])
    r_tab, m_tab = r_tab[keep], m_tab[keep]
    radii = np.interp(rng.uniform(0.0, m_tab[-1], n), m_tab, r_tab)

    u_r = np.atleast_1d(profile.potential_at(radii))
    depth_r = e0 - u_r  # maximal kinetic depth
    wmax = np.sqrt(2.0 * np.clip(depth_r, 0.0, None))

    # per-particle envelope of phi(depth - w^2/2) w^2 from a coarse scan
    s = np.linspace(0.0, 1.0, 33)[None, :]
    wgrid = wmax[:, None] * s
    dens = phi_of_depth(model, lam0, depth_r[:, None] - 0.5 * wgrid**2) * wgrid**2
    env = envelope_margin * np.max(dens, axis=1)
    env = np.maximum(env, 1e-300)

    speed = np.zeros(n)
    todo = np.arange(n)
    for attempt in range(2000):
        cand = rng.uniform(0.0, wmax[todo])
        p = phi_of_depth(model, lam0, depth_r[todo] - 0.5 * cand**2) * cand**2
        height = rng.uniform(0.0, env[todo])
        over = p > env[todo]
        if np.any(over):  # adaptive envelope retry
            env[todo[over]] = envelope_margin * p[over]
        ok = (height <= p) & ~over
        speed[todo[ok]] = cand[ok]
        todo = todo[~ok]
        if todo.size == 0:
            break
    else:
        raise ConvergenceError(
            f"rejection sampling stalled with {todo.size} particles unaccepted"
        )

    energy = 0.5 * speed**2 + u_r
    f_vals = phi_of_depth(model, lam0, e0 - energy)
    f_vals = np.maximum(f_vals, 1e-300)
    m_p = profile.total_mass / n
    omega = m_p / f_vals

    mu = rng.uniform(-1.0, 1.0, n)  # cosine between v and the radial direction
    if backend == RADIAL:
        w = speed * mu
        L = radii**2 * speed**2 * (1.0 - mu**2)
        return ParticleEnsemble(backend=RADIAL, r=radii, w=w, L=L, omega=omega, f=f_vals)

    xdir = _isotropic_unit(rng, n)
    phi_ang = rng.uniform(0.0, 2.0 * math.pi, n)
    # build v with prescribed radial cosine mu relative to xdir
    perp = _perpendicular_basis(xdir, phi_ang)
    sint = np.sqrt(np.clip(1.0 - mu**2, 0.0, None))
    vdir = mu[:, None] * xdir + sint[:, None] * perp
    return ParticleEnsemble(
        backend=CARTESIAN3D,
        x=radii[:, None] * xdir,
        v=speed[:, None] * vdir,
        omega=omega,
        f=f_vals,
    )


def _isotropic_unit(rng, n):
    mu = rng.uniform(-1.0, 1.0, n)
    ph = rng.uniform(0.0, 2.0 * math.pi, n)
    s = np.sqrt(1.0 - mu**2)
    return np.stack([s * np.cos(ph), s * np.sin(ph), mu], axis=1)


def _perpendicular_basis(u, angle):
    """Unit vectors perpendicular to each row of u, rotated by angle."""
    helper = np.where(np.abs(u[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(helper, u)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    return np.cos(angle)[:, None] * e1 + np.sin(angle)[:, None] * e2


# -- forces -------------------------------------------------------------------


def _radial_enclosed_mass(r, masses, floor=0.0):
    """Self-consistent enclosed mass at each particle: interior mass plus
    half its own shell (sorted ranking, O(N log N))."""
    order = np.argsort(r, kind="stable")
    cum = np.cumsum(masses[order])
    m_at = np.empty_like(cum)
    m_at[order] = cum - 0.5 * masses[order]
    return m_at


def _radial_field_fn(ens, field=None, knots=64):
    """Enclosed-mass lookup frozen for the duration of one global step.

    The self-consistent field is a monotone C^1 interpolant through quantile
    knots of the sorted cumulative mass (half-self-shell convention).  The
    smoothing suppresses the shell-crossing force kinks that otherwise
    dominate the secular energy error; the measured drift at fixed dt is
    substantially smaller than with the raw staircase or per-particle
    linear interpolation.
    """
    if field is not None:
        return lambda r: np.atleast_1d(field.enclosed_mass_at(r))
    order = np.argsort(ens.r, kind="stable")
    rs = ens.r[order]
    cs = np.cumsum(ens.masses[order]) - 0.5 * ens.masses[order]
    n = len(rs)
    if n > 2 * knots:
        pick = np.unique(np.linspace(0, n - 1, knots).astype(int))
        rs, cs = rs[pick], cs[pick]
    rk = np.concatenate([[0.0], rs])
    ck = np.concatenate([[0.0], cs])
    interp = PchipInterpolator(rk, ck)
    r_edge, m_tot = rk[-1], ck[-1]

    def m_at(r):
        return np.where(r >= r_edge, m_tot, interp(np.minimum(r, r_edge)))

    return m_at


def _radial_acceleration(ens, field=None):
    r = np.maximum(ens.r, 1e-300)
    m_at = _radial_field_fn(ens, field)(r)
    return ens.L / r**3 - m_at / r**2


def direct_sum_acceleration(x, masses, softening=0.0, chunk=2048):
    """Softened direct-sum gravitational acceleration, O(N^2), chunked."""
    n = len(masses)
    acc = np.empty_like(x)
    eps2 = softening * softening
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = x[None, :, :] - x[start:stop, None, :]  # d[i, j] = x_j - x_i
        dist2 = np.sum(d * d, axis=2) + eps2
        rows = np.arange(stop - start)
        dist2[rows, start + rows] = np.inf  # exclude self-interaction
        kernel = masses[None, :] * dist2**-1.5
        acc[start:stop] = np.einsum("ij,ijk->ik", kernel, d)
    return acc


def _cartesian_acceleration(ens, field=None, softening=0.0):
    if field is None:
        return direct_sum_acceleration(ens.x, ens.masses, softening)
    r = np.maximum(np.sqrt(np.sum(ens.x * ens.x, axis=1)), 1e-300)
    m_at = np.atleast_1d(field.enclosed_mass_at(r))
    return -(m_at / r**3)[:, None] * ens.x


def _acceleration(ens, config, field=None):
    if ens.backend == RADIAL:
        return _radial_acceleration(ens, field)
    return _cartesian_acceleration(ens, field, config.softening)


# -- integration --------------------------------------------------------------


def _substep_radial(ens, idx, dt, m_at, config):
    """Adaptive kick-drift-kick for the pericenter-stiff particles idx,
    advanced through the full dt against the frozen field lookup m_at.
    Substeps are bounded by eta * sqrt(L)/v^2, each particle's local
    centrifugal-barrier timescale."""
    floor, eta = config.barrier_floor, config.substep_eta
    r, w, L = ens.r, ens.w, ens.L
    t_left = np.full(len(idx), dt)
    for _ in range(config.max_substeps):
        ri = np.maximum(r[idx], floor)
        Li, wi = L[idx], w[idx]
        v2 = wi * wi + Li / ri**2
        tau = np.sqrt(Li) / np.maximum(v2, 1e-300)
        h = np.minimum(t_left, np.maximum(eta * tau, dt * 1e-4))

        acc = Li / ri**3 - m_at(ri) / ri**2
        wh = wi + 0.5 * h * acc
        rn = np.maximum(ri + h * wh, floor)
        acc = Li / rn**3 - m_at(rn) / rn**2
        r[idx] = rn
        w[idx] = wh + 0.5 * h * acc
        t_left = t_left - h

        keep = t_left > 1e-15 * dt
        if not np.any(keep):
            return
        idx, t_left = idx[keep], t_left[keep]
    raise NumericalError("radial substepping exceeded the iteration budget")


def _advance_radial(ens, dt, config, field=None):
    """One global kick-drift-kick step of the radial backend.

    Smooth particles take a plain leapfrog step whose closing kick uses the
    field rebuilt from the drifted positions (standard synchronized KDK);
    particles within a barrier timescale of pericenter are advanced by
    internal substeps against the start-of-step field instead.
    """
    floor, eta = config.barrier_floor, config.substep_eta
    m_at = _radial_field_fn(ens, field)
    r, w, L = ens.r, ens.w, ens.L
    ri = np.maximum(r, floor)
    v2 = w * w + L / ri**2
    tau = np.where(L > 0.0, np.sqrt(L) / np.maximum(v2, 1e-300), np.inf)
    stiff = eta * tau < dt

    acc = L / ri**3 - m_at(ri) / ri**2
    smooth = ~stiff
    w[smooth] += 0.5 * dt * acc[smooth]
    rn = r[smooth] + dt * w[smooth]
    crossed = rn < 0.0
    if np.any(crossed):  # reflection through the center (L = 0 infall)
        rn[crossed] = -rn[crossed]
        sm_idx = np.nonzero(smooth)[0]
        w[sm_idx[crossed]] = -w[sm_idx[crossed]]
    r[smooth] = np.maximum(rn, floor)

    if np.any(stiff):
        _substep_radial(ens, np.nonzero(stiff)[0], dt, m_at, config)

    m_at = _radial_field_fn(ens, field)
    rs = np.maximum(r[smooth], floor)
    acc_s = L[smooth] / rs**3 - m_at(rs) / rs**2
    w[smooth] += 0.5 * dt * acc_s


def step(ensemble: ParticleEnsemble, config: IntegratorConfig, field=None) -> ParticleEnsemble:
    """One kick-drift-kick step of size config.dt (returns a new ensemble)."""
    ens = ensemble.copy()
    if ens.backend == RADIAL:
        _advance_radial(ens, config.dt, config, field)
    else:
        acc = _cartesian_acceleration(ens, field, config.softening)
        ens.v = ens.v + 0.5 * config.dt * acc
        ens.x = ens.x + config.dt * ens.v
        acc = _cartesian_acceleration(ens, field, config.softening)
        ens.v = ens.v + 0.5 * config.dt * acc
    ens.t += config.dt
    return ens


def run(
    ensemble: ParticleEnsemble,
    config: IntegratorConfig,
    monitors=None,
    field=None,
    cadence: int = 1,
    n_steps: int | None = None,
):
    """Advance to t_end (or n_steps), emitting one monitor record per cadence.

    monitors is a mapping name -> callable(ensemble) returning a scalar or a
    dict of scalars; records always include t.  Returns (ensemble, records).
    """
    ens = ensemble.copy()
    if n_steps is None:
        if not math.isfinite(config.t_end):
            raise UsageError("need t_end or n_steps")
        n_steps = max(1, int(round((config.t_end - ens.t) / config.dt)))
    monitors = monitors or {}

    def record():
        row = {"t": ens.t}
        for name, fn in monitors.items():
            out = fn(ens)
            if isinstance(out, dict):
                row.update(out)
            else:
                row[name] = out
        return row

    records = [record()]
    if ens.backend == RADIAL:
        for istep in range(1, n_steps + 1):
            _advance_radial(ens, config.dt, config, field)
            ens.t += config.dt
            if istep % cadence == 0 or istep == n_steps:
                records.append(record())
        return ens, records

    acc = _cartesian_acceleration(ens, field, config.softening)
    for istep in range(1, n_steps + 1):
        ens.v = ens.v + 0.5 * config.dt * acc
        ens.x = ens.x + config.dt * ens.v
        acc = _cartesian_acceleration(ens, field, config.softening)
        ens.v = ens.v + 0.5 * config.dt * acc
        ens.t += config.dt
        if istep % cadence == 0 or istep == n_steps:
            records.append(record())
    return ens, records
