"""Self-consistent radial steady states and their scaling transforms.

The radial Poisson problem (1/r^2)(r^2 U')' = 4 pi h(U) is integrated from
the center as an IVP.  Exact steady states with vacuum boundary condition
U(inf) = 0 form a one-parameter family per model, so the Lagrange
multiplier is converged internally until the cutoff energy E0 = lambda0 Q'(0)
coincides with -M/R at the support radius; the caller's lambda0 acts as a
seed and the central depth E0 - U(0) is the shape parameter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson, solve_ivp
from scipy.interpolate import PchipInterpolator
from scipy.special import beta as beta_fn

from . import casimir as cas
from .casimir import CasimirModel, EnergyCutoff
from .errors import ConvergenceError, DomainError, UsageError

FOUR_PI = 4.0 * math.pi


@dataclass
class GridControl:
    """Radial output grid: geometric with n points, r_max = factor * R_support
    for compact profiles or an explicit r_max for infinite ones."""

    n: int = 4096
    r_max_factor: float = 1.5
    r_max: float | None = None


@dataclass
class SteadyStateProfile:
    """Radial tabulation of a constructed equilibrium.

    Arrays share one grid; U is the potential with U(inf) = 0, rho the mass
    density, M_enc the enclosed mass.  R_support is +inf for the Plummer
    sphere.  plummer_c0/plummer_scale activate closed-form accessors.
    """

    r: np.ndarray
    U: np.ndarray
    rho: np.ndarray
    M_enc: np.ndarray
    e0: float
    lambda0: float
    r_support: float
    total_mass: float
    casimir_mass: float
    model: CasimirModel
    plummer_c0: float | None = None
    plummer_scale: float = 1.0

    # -- field accessors ------------------------------------------------

    @property
    def cutoff(self) -> EnergyCutoff:
        return EnergyCutoff(lambda0=self.lambda0, e0=self.e0)

    @property
    def central_depth(self) -> float:
        return float(self.e0 - self.U[0])

    def potential_at(self, r):
        r = np.asarray(r, dtype=float)
        if self.plummer_c0 is not None:
            s = self.plummer_scale
            out = -self.plummer_c0 / np.sqrt(1.0 + (r / s) ** 2)
        else:
            out = np.interp(r, self.r, self.U)
            outside = r > self.r[-1]
            if np.any(outside):
                out = np.where(outside, -self.total_mass / np.maximum(r, 1e-300), out)
        return out if out.ndim else float(out)

    def enclosed_mass_at(self, r):
        r = np.asarray(r, dtype=float)
        if self.plummer_c0 is not None:
            s = self.plummer_scale
            x = r / s
            out = self.plummer_c0 * s * x**3 / (1.0 + x * x) ** 1.5
        else:
            out = np.interp(r, self.r, self.M_enc)
            out = np.where(r > self.r[-1], self.total_mass, out)
        return out if out.ndim else float(out)

    def density_at(self, r):
        r = np.asarray(r, dtype=float)
        if self.plummer_c0 is not None:
            s = self.plummer_scale
            out = 3.0 * self.plummer_c0 / (FOUR_PI * s * s) * (1.0 + (r / s) ** 2) ** -2.5
        else:
            out = np.interp(r, self.r, self.rho)
            out = np.where(r > self.r[-1], 0.0, out)
        return out if out.ndim else float(out)

    def half_mass_radius(self) -> float:
        if self.plummer_c0 is not None:
            # x^3/(1+x^2)^1.5 = 1/2
            x = 1.0 / math.sqrt(2.0 ** (2.0 / 3.0) - 1.0)
            return float(x * self.plummer_scale)
        return float(np.interp(0.5 * self.total_mass, self.M_enc, self.r))

    # -- persistence ------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "model": cas.model_to_config(self.model),
            "lambda0": self.lambda0,
            "e0": self.e0,
            "r_support": self.r_support if math.isfinite(self.r_support) else "inf",
            "total_mass": self.total_mass,
            "casimir_mass": self.casimir_mass,
            "plummer_c0": self.plummer_c0,
            "plummer_scale": self.plummer_scale,
            "r": self.r.tolist(),
            "U": self.U.tolist(),
            "rho": self.rho.tolist(),
            "M_enc": self.M_enc.tolist(),
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "SteadyStateProfile":
        d = json.loads(text)
        rs = d["r_support"]
        return cls(
            r=np.asarray(d["r"], dtype=float),
            U=np.asarray(d["U"], dtype=float),
            rho=np.asarray(d["rho"], dtype=float),
            M_enc=np.asarray(d["M_enc"], dtype=float),
            e0=float(d["e0"]),
            lambda0=float(d["lambda0"]),
            r_support=math.inf if rs == "inf" else float(rs),
            total_mass=float(d["total_mass"]),
            casimir_mass=float(d["casimir_mass"]),
            model=cas.model_from_config(d["model"]),
            plummer_c0=d.get("plummer_c0"),
            plummer_scale=float(d.get("plummer_scale", 1.0)),
        )

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SteadyStateProfile":
        with open(path) as fh:
            return cls.from_json(fh.read())


# -- depth-space kernels ------------------------------------------------------


class DepthKernel:
    """Tabulated radial densities as functions of depth w = E0 - U.

    Values come from the adaptive quadratures in the casimir module; the
    tabulation interpolates h^(1/p) with p the measured small-w exponent so
    the power-law behaviour near the support edge survives interpolation.
    """

    def __init__(self, model, lambda0, depth_max, density_fn, n=257, tol=1e-12):
        cutoff = EnergyCutoff.for_model(model, lambda0)
        t = np.linspace(0.0, 1.0, n)
        w = depth_max * t * t
        vals = np.array([density_fn(model, cutoff, cutoff.e0 - wi, tol) for wi in w])
        w1, w2 = depth_max * 1e-6, depth_max * 1e-3
        h1 = density_fn(model, cutoff, cutoff.e0 - w1, tol)
        h2 = density_fn(model, cutoff, cutoff.e0 - w2, tol)
        if h1 > 0 and h2 > 0:
            p = math.log(h2 / h1) / math.log(w2 / w1)
        else:
            p = model.k + 1.5
        self.p = max(p, 1.0)
        self._interp = PchipInterpolator(w, np.maximum(vals, 0.0) ** (1.0 / self.p))
        self.depth_max = depth_max

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        out = np.where(w > 0.0, self._interp(np.clip(w, 0.0, self.depth_max)) ** self.p, 0.0)
        return out if out.ndim else float(out)


# -- low-level integrator -----------------------------------------------------


def integrate_emden(rhs_of_u, u_center, r_max, e0=None, rtol=1e-10, atol=1e-12):
    """Integrate u'' + (2/r) u' = F(u) from the center.

    rhs_of_u is F(u) (already including the 4 pi factor); the coordinate
    singularity at r = 0 is handled by the series start u'(r) ~ F(u0) r / 3.
    If e0 is given, integration terminates at the support edge u = e0.
    Returns the solve_ivp result (dense output enabled).
    """
    F0 = rhs_of_u(u_center)
    scale = math.sqrt(6.0 * abs(u_center) / F0) if F0 > 0 else r_max
    r0 = min(1e-8 * scale, 1e-8 * r_max)
    y0 = [u_center + F0 * r0 * r0 / 6.0, F0 * r0 / 3.0]

    def rhs(r, y):
        return [y[1], rhs_of_u(y[0]) - 2.0 * y[1] / r]

    events = None
    if e0 is not None:
        def support_edge(r, y):
            return y[0] - e0
        support_edge.terminal = True
        support_edge.direction = 1.0
        events = [support_edge]

    sol = solve_ivp(
        rhs, (r0, r_max), y0, method="DOP853",
        rtol=rtol, atol=atol, dense_output=True, events=events,
    )
    if not sol.success:
        raise ConvergenceError(f"potential integration failed: {sol.message}")
    return sol


def _shoot(kernel: DepthKernel, e0: float, depth: float):
    """Run the IVP for one kernel/cutoff and return (sol, R_support, M_tot)."""
    def F(u):
        return FOUR_PI * kernel(e0 - u)

    h0 = kernel(depth)
    scale = math.sqrt(6.0 * depth / (FOUR_PI * h0))
    r_max = 50.0 * scale
    for _ in range(4):
        sol = integrate_emden(F, e0 - depth, r_max, e0=e0)
        if sol.t_events[0].size:
            R = float(sol.t_events[0][0])
            M = float(R * R * sol.sol(R)[1])
            return sol, R, M
        r_max *= 10.0
    raise ConvergenceError(
        f"density never vanished out to r = {r_max:g}; model may lack compact support"
    )


# -- constructors -------------------------------------------------------------


def solve_emden_fowler(
    model: CasimirModel,
    lambda0: float,
    central_depth: float,
    grid: GridControl | None = None,
) -> SteadyStateProfile:
    """Construct a compact steady state with given central depth E0 - U(0).

    lambda0 (negative) seeds the fixed-point iteration for the multiplier;
    the returned profile's lambda0 satisfies E0 = lambda0 Q'(0) = -M/R exactly,
    which makes the profile an exact steady state with U(inf) = 0.
    """
    if model.kind == cas.PLUMMER_POWER or model.k >= 3.5:
        raise DomainError(
            "k = 7/2 has infinite support; use plummer_closed_form instead"
        )
    if not lambda0 < 0:
        raise DomainError("lambda0 seed must be negative")
    if not central_depth > 0:
        raise DomainError("central_depth must be positive")
    q0 = model.qprime0
    if q0 <= 0:
        raise DomainError("Q'(0) must be positive for a compact-support model")
    grid = grid or GridControl()

    lam = lambda0
    sol = R = M = kernel = None
    for _ in range(100):
        kernel = DepthKernel(model, lam, central_depth, cas.density_of_potential)
        e0 = lam * q0
        sol, R, M = _shoot(kernel, e0, central_depth)
        lam_next = -(M / R) / q0
        if abs(lam_next - lam) <= 1e-9 * abs(lam):
            lam = lam_next
            break
        lam = lam_next
    else:
        raise ConvergenceError("multiplier iteration did not converge")

    # final consistent solve
    kernel = DepthKernel(model, lam, central_depth, cas.density_of_potential)
    e0 = lam * q0
    sol, R, M = _shoot(kernel, e0, central_depth)

    r_max = grid.r_max if grid.r_max is not None else grid.r_max_factor * R
    r = np.concatenate([[0.0], np.geomspace(R * 1e-6, r_max, grid.n)])
    inside = r <= R
    U = np.empty_like(r)
    M_enc = np.empty_like(r)
    ri = np.clip(r[inside], sol.t[0], R)
    yi = sol.sol(ri)
    U[inside] = yi[0]
    M_enc[inside] = ri * ri * yi[1]
    U[0], M_enc[0] = e0 - central_depth, 0.0
    U[~inside] = -M / r[~inside]
    M_enc[~inside] = M
    rho = kernel(e0 - U)

    cas_kernel = DepthKernel(model, lam, central_depth, cas.casimir_density_of_potential)
    casimir_mass = _radial_integral(r[inside], cas_kernel(e0 - U[inside]))

    return SteadyStateProfile(
        r=r, U=U, rho=rho, M_enc=M_enc, e0=e0, lambda0=lam,
        r_support=R, total_mass=M, casimir_mass=float(casimir_mass), model=model,
    )


def _radial_integral(r, values):
    """int 4 pi r^2 values dr on the sample grid (Simpson)."""
    return simpson(FOUR_PI * r * r * values, x=r)


def plummer_closed_form(c0: float, grid: GridControl | None = None) -> SteadyStateProfile:
    """The k = 7/2 limiting state: U0 = -c0 (1+r^2)^(-1/2), infinite support.

    The implied multiplier for Q(f) = f^(9/7) follows from matching
    rho0 = (3 c0 / 4 pi)(1+r^2)^(-5/2) to the polytropic density reduction
    with exponent 5; it is reported on the profile rather than asserted in
    closed form.
    """
    if c0 <= 0:
        raise DomainError("c0 must be positive")
    grid = grid or GridControl(r_max=1e3)
    r_max = grid.r_max if grid.r_max is not None else 1e3
    model = CasimirModel(kind=cas.PLUMMER_POWER)

    # (7/(9(-lam)))^{7/2} * 4 pi sqrt(2) B(9/2, 3/2) = 3 / (4 pi c0^4)
    B = beta_fn(4.5, 1.5)
    lam = -(7.0 / 9.0) * (16.0 * math.sqrt(2.0) * math.pi**2 * B * c0**4 / 3.0) ** (2.0 / 7.0)

    r = np.concatenate([[0.0], np.geomspace(1e-6, r_max, grid.n)])
    U = -c0 / np.sqrt(1.0 + r * r)
    rho = 3.0 * c0 / FOUR_PI * (1.0 + r * r) ** -2.5
    M_enc = c0 * r**3 * (1.0 + r * r) ** -1.5

    cutoff = EnergyCutoff(lambda0=lam, e0=0.0)
    cas_vals = np.array(
        [cas.casimir_density_of_potential(model, cutoff, u) for u in U]
    )
    casimir_mass = float(_radial_integral(r, cas_vals))

    return SteadyStateProfile(
        r=r, U=U, rho=rho, M_enc=M_enc, e0=0.0, lambda0=float(lam),
        r_support=math.inf, total_mass=c0, casimir_mass=casimir_mass,
        model=model, plummer_c0=c0, plummer_scale=1.0,
    )


def match_target_mass(
    model: CasimirModel,
    target_mass: float,
    lambda0_seed: float = -1.0,
    depth_seed: float = 1.0,
    rel_tol: float = 1e-6,
    grid: GridControl | None = None,
) -> SteadyStateProfile:
    """Root-find the central depth so that the Casimir constraint C(f0) hits
    target_mass.  Along the steady family C scales like depth^(3/4), which the
    update exploits; a log-space secant handles models that deviate from the
    pure scaling."""
    if model.kind == cas.PLUMMER_POWER:
        raise UsageError("the Plummer family is scale-degenerate; use plummer_closed_form")
    if target_mass <= 0:
        raise DomainError("target mass must be positive")

    d = depth_seed
    prof = solve_emden_fowler(model, lambda0_seed, d, grid)
    pts = [(math.log(d), math.log(prof.casimir_mass))]
    target = math.log(target_mass)
    for _ in range(60):
        if abs(prof.casimir_mass - target_mass) <= rel_tol * target_mass:
            return prof
        if len(pts) == 1:
            slope = 0.75  # exact for the scaling-covariant family
        else:
            (x0, y0), (x1, y1) = pts[-2], pts[-1]
            slope = (y1 - y0) / (x1 - x0) if x1 != x0 else 0.75
            if not (0.05 < slope < 20.0):
                slope = 0.75
        d = math.exp(math.log(d) + (target - pts[-1][1]) / slope)
        prof = solve_emden_fowler(model, prof.lambda0, d, grid)
        pts.append((math.log(d), math.log(prof.casimir_mass)))
    attained = sorted(math.exp(y) for _, y in pts)
    raise ConvergenceError(
        f"target mass {target_mass:g} not matched; attainable range seen "
        f"[{attained[0]:g}, {attained[-1]:g}]"
    )


# -- scaling transforms -------------------------------------------------------


@dataclass(frozen=True)
class ScalingTransform:
    """Either the (a,b) dilation fbar(x,v) = f(ax, bv) or the Plummer map
    S_lambda f = lambda^-7 f(lambda^-4 x, lambda v), which also rescales
    amplitude and is therefore kept as a distinct variant."""

    kind: str  # "ab" | "plummer"
    a: float = 1.0
    b: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ab", "plummer"):
            raise UsageError(f"unknown transform kind {self.kind!r}")
        if min(self.a, self.b, self.lam) <= 0:
            raise DomainError("scaling factors must be strictly positive")

    @classmethod
    def dilation(cls, a: float, b: float) -> "ScalingTransform":
        return cls(kind="ab", a=a, b=b)

    @classmethod
    def plummer(cls, lam: float) -> "ScalingTransform":
        return cls(kind="plummer", lam=lam)

    # exact functional transformation laws
    def factors(self) -> dict:
        if self.kind == "ab":
            ab = self.a * self.b
            return {
                "mass": ab**-3,
                "casimir": ab**-3,
                "e_kin": self.a**-3 * self.b**-5,
                "e_pot": self.a**-5 * self.b**-6,
            }
        return {"mass": self.lam**2, "casimir": 1.0, "e_kin": 1.0, "e_pot": 1.0}


def apply_scaling(obj, t: ScalingTransform):
    """Apply a transform to a profile or a particle ensemble (new object)."""
    if isinstance(obj, SteadyStateProfile):
        return _scale_profile(obj, t)
    if hasattr(obj, "backend"):  # ParticleEnsemble, duck-typed to avoid a cycle
        return _scale_ensemble(obj, t)
    raise UsageError(f"cannot scale object of type {type(obj).__name__}")


def _scale_profile(p: SteadyStateProfile, t: ScalingTransform) -> SteadyStateProfile:
    fac = t.factors()
    if t.kind == "ab":
        a, b = t.a, t.b
        e_scale = a**-2 * b**-3  # potential scale; energy scale only if b = a^-2
        steady = abs(b - a**-2) <= 1e-12 * abs(b)
        return SteadyStateProfile(
            r=p.r / a,
            U=e_scale * p.U,
            rho=b**-3 * p.rho,
            M_enc=fac["mass"] * p.M_enc,
            e0=e_scale * p.e0 if steady else math.nan,
            lambda0=e_scale * p.lambda0 if steady else math.nan,
            r_support=p.r_support / a,
            total_mass=fac["mass"] * p.total_mass,
            casimir_mass=fac["casimir"] * p.casimir_mass,
            model=p.model,
            plummer_c0=None,
        )
    lam = t.lam
    return SteadyStateProfile(
        r=lam**4 * p.r,
        U=lam**-2 * p.U,
        rho=lam**-10 * p.rho,
        M_enc=lam**2 * p.M_enc,
        e0=lam**-2 * p.e0,
        lambda0=p.lambda0,
        r_support=p.r_support * lam**4,
        total_mass=lam**2 * p.total_mass,
        casimir_mass=p.casimir_mass,
        model=p.model,
        plummer_c0=(lam**-2 * p.plummer_c0) if p.plummer_c0 is not None else None,
        plummer_scale=lam**4 * p.plummer_scale,
    )


def _scale_ensemble(ens, t: ScalingTransform):
    fac = t.factors()
    out = ens.copy()
    if t.kind == "ab":
        a, b = t.a, t.b
        if ens.backend == "radial":
            out.r = ens.r / a
            out.w = ens.w / b
            out.L = ens.L / (a * b) ** 2
        else:
            out.x = ens.x / a
            out.v = ens.v / b
        out.omega = ens.omega * fac["mass"]
    else:
        lam = t.lam
        if ens.backend == "radial":
            out.r = ens.r * lam**4
            out.w = ens.w / lam
            out.L = ens.L * lam**6  # (lam^4 r)^2 (v_t/lam)^2
        else:
            out.x = ens.x * lam**4
            out.v = ens.v / lam
        out.f = ens.f * lam**-7
        out.omega = ens.omega * lam**9
    return out
