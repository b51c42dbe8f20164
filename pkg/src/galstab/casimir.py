"""Convex Casimir integrands Q and the densities they induce.

A model carries Q, its derivative Q', and the exponent k of the growth
assumption Q(f) >= C (f + f^(1+1/k)).  Inverting lambda0 * Q'(f) = E gives
the steady-state profile function phi(E), and reducing the velocity
integrals gives the radial mass / kinetic / Casimir densities as functions
of the local potential value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator
from scipy.special import beta as _beta

from .errors import DomainError, NumericalError, RangeError, UsageError

FOUR_PI_SQRT2 = 4.0 * math.pi * math.sqrt(2.0)

POLYTROPIC = "polytropic_plus_linear"
PURE_JUMP = "pure_jump"
PLUMMER_POWER = "plummer_power"
TABULATED = "tabulated"

_KINDS = (POLYTROPIC, PURE_JUMP, PLUMMER_POWER, TABULATED)


@dataclass(frozen=True)
class CasimirModel:
    """Immutable description of the convex integrand Q.

    kind:
        polytropic_plus_linear  Q(f) = f + f^(1+1/k), 0 < k < 7/2
        pure_jump               Q(f) = f for f<=1, (f^2+1)/2 for f>1 (k=1)
        plummer_power           Q(f) = f^(9/7), the limiting k=7/2 case
        tabulated               monotone-cubic interpolation of Q samples
    """

    kind: str
    k: float = 1.0
    growth_constant: float | None = None
    f_table: tuple[float, ...] | None = None
    q_table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise UsageError(f"unknown model kind {self.kind!r}")
        if self.kind == PLUMMER_POWER:
            object.__setattr__(self, "k", 3.5)
        elif self.kind == PURE_JUMP:
            object.__setattr__(self, "k", 1.0)
        if not (0.0 < self.k <= 3.5):
            raise UsageError(f"exponent k={self.k} outside (0, 7/2]")
        if self.k == 3.5 and self.kind != PLUMMER_POWER:
            raise UsageError("k = 7/2 is only allowed for the plummer_power model")
        if self.kind == TABULATED:
            if self.f_table is None or self.q_table is None:
                raise UsageError("tabulated model needs f_table and q_table")
            f = np.asarray(self.f_table, dtype=float)
            q = np.asarray(self.q_table, dtype=float)
            if f.ndim != 1 or f.shape != q.shape or len(f) < 4:
                raise UsageError("tabulated model needs matching 1-d tables, >= 4 samples")
            if f[0] != 0.0 or np.any(np.diff(f) <= 0):
                raise UsageError("f_table must start at 0 and increase strictly")
            interp = PchipInterpolator(f, q)
            object.__setattr__(self, "_interp", interp)
            object.__setattr__(self, "_interp_d", interp.derivative())

    # -- Q and Q' -----------------------------------------------------------

    def q(self, f):
        f = np.asarray(f, dtype=float)
        if self.kind == POLYTROPIC:
            out = f + f ** (1.0 + 1.0 / self.k)
        elif self.kind == PURE_JUMP:
            out = np.where(f <= 1.0, f, 0.5 * (f * f + 1.0))
        elif self.kind == PLUMMER_POWER:
            out = f ** (9.0 / 7.0)
        else:
            out = self._interp(f)
        return out if out.ndim else float(out)

    def qprime(self, f):
        f = np.asarray(f, dtype=float)
        if self.kind == POLYTROPIC:
            out = 1.0 + (1.0 + 1.0 / self.k) * f ** (1.0 / self.k)
        elif self.kind == PURE_JUMP:
            out = np.where(f <= 1.0, 1.0, f)
        elif self.kind == PLUMMER_POWER:
            out = (9.0 / 7.0) * f ** (2.0 / 7.0)
        else:
            out = self._interp_d(f)
        return out if out.ndim else float(out)

    @property
    def qprime0(self) -> float:
        return float(self.qprime(0.0))

    @property
    def f_max(self) -> float | None:
        """Upper end of the tabulated f-range, None for analytic kinds."""
        return self.f_table[-1] if self.kind == TABULATED else None


@dataclass(frozen=True)
class EnergyCutoff:
    """Lagrange multiplier lambda0 < 0 and cutoff energy E0 = lambda0 * Q'(0)."""

    lambda0: float
    e0: float

    def __post_init__(self):
        if not self.lambda0 < 0.0:
            raise DomainError(f"lambda0 must be negative, got {self.lambda0}")

    @classmethod
    def for_model(cls, model: CasimirModel, lambda0: float) -> "EnergyCutoff":
        if not lambda0 < 0.0:
            raise DomainError(f"lambda0 must be negative, got {lambda0}")
        return cls(lambda0=lambda0, e0=lambda0 * model.qprime0)


# -- validation --------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    first_violation: float | None = None


@dataclass
class ValidationReport:
    model_kind: str
    checks: list[CheckResult] = field(default_factory=list)
    largest_admissible_growth_constant: float | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def validate_model(model: CasimirModel, f_grid) -> ValidationReport:
    """Check Q >= 0, Q(0) = 0, convexity, and the growth bound on a sample grid.

    The growth constant of the lower bound is never fixed by theory for a
    concrete Q, so the report always includes the largest constant admissible
    on the grid; a user-supplied growth_constant is checked against it.
    """
    f = np.asarray(f_grid, dtype=float)
    if f.size == 0:
        raise UsageError("empty f_grid")
    if np.any(f < 0) or np.any(np.diff(f) < 0):
        raise UsageError("f_grid must be sorted and nonnegative")

    report = ValidationReport(model_kind=model.kind)
    qv = np.atleast_1d(model.q(f))

    bad = np.where(qv < 0)[0]
    report.checks.append(
        CheckResult(
            "nonnegative",
            bad.size == 0,
            first_violation=float(f[bad[0]]) if bad.size else None,
        )
    )
    q0 = float(model.q(0.0))
    report.checks.append(CheckResult("zero_at_origin", abs(q0) <= 1e-14, detail=f"Q(0)={q0:g}"))

    # convexity: secant slopes over consecutive grid points must be nondecreasing
    ok = True
    viol = None
    fu = np.unique(f)
    if fu.size >= 3:
        slopes = np.diff(np.atleast_1d(model.q(fu))) / np.diff(fu)
        drops = np.where(np.diff(slopes) < -1e-12 * np.maximum(1.0, np.abs(slopes[1:])))[0]
        if drops.size:
            ok = False
            viol = float(fu[drops[0] + 1])
    report.checks.append(CheckResult("convex", ok, first_violation=viol))

    if model.kind != PLUMMER_POWER:
        pos = f[f > 0]
        if pos.size:
            denom = pos + pos ** (1.0 + 1.0 / model.k)
            ratios = np.atleast_1d(model.q(pos)) / denom
            c_max = float(np.min(ratios))
            report.largest_admissible_growth_constant = c_max
            if model.growth_constant is not None:
                ok = model.growth_constant <= c_max + 1e-12
                viol = None if ok else float(pos[int(np.argmin(ratios))])
                report.checks.append(
                    CheckResult(
                        "growth_bound",
                        ok,
                        detail=f"largest admissible C = {c_max:g}",
                        first_violation=viol,
                    )
                )
            else:
                report.checks.append(
                    CheckResult("growth_bound", True, detail=f"largest admissible C = {c_max:g}")
                )
    return report


# -- inversion of Q' ---------------------------------------------------------

_BISECT_RTOL = 1e-12
_BISECT_MAXIT = 200


def invert_qprime(model: CasimirModel, cutoff: EnergyCutoff, E: float) -> float:
    """phi(E) = inf{f >= 0 : Q'(f) = E/lambda0}, by monotone bisection.

    On flat segments of Q' the infimum (left endpoint) is returned; for
    E >= E0 the result is exactly 0.
    """
    if cutoff.lambda0 >= 0:
        raise DomainError("lambda0 must be negative")
    if E >= cutoff.e0:
        return 0.0
    target = E / cutoff.lambda0
    # bracket: Q'(lo) < target <= Q'(hi)
    lo = 0.0
    hi = 1.0
    fmax = model.f_max
    while model.qprime(hi) < target:
        hi *= 2.0
        if fmax is not None and hi > fmax:
            if model.qprime(fmax) < target:
                raise RangeError(
                    f"Q' of tabulated model never reaches {target:g} on its f-range"
                )
            hi = fmax
            break
        if hi > 1e300:
            raise RangeError(f"could not bracket Q'(f) = {target:g}")
    for _ in range(_BISECT_MAXIT):
        mid = 0.5 * (lo + hi)
        if model.qprime(mid) >= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= _BISECT_RTOL * max(1.0, hi):
            break
    return hi


def phi_of_depth(model: CasimirModel, lambda0: float, w):
    """Vectorized phi as a function of depth below cutoff, w = E0 - E >= 0.

    Since Q'(phi) = Q'(0) + w/(-lambda0), phi depends on E only through the
    depth w.  Analytic kinds invert in closed form; tabulated models use a
    vectorized bisection equivalent to invert_qprime.
    """
    if lambda0 >= 0:
        raise DomainError("lambda0 must be negative")
    w = np.asarray(w, dtype=float)
    pos = np.clip(w, 0.0, None)
    if model.kind == POLYTROPIC:
        out = (pos / ((-lambda0) * (1.0 + 1.0 / model.k))) ** model.k
    elif model.kind == PURE_JUMP:
        out = np.where(pos > 0.0, 1.0 + pos / (-lambda0), 0.0)
    elif model.kind == PLUMMER_POWER:
        out = (7.0 * pos / (9.0 * (-lambda0))) ** 3.5
    else:
        target = model.qprime0 + pos / (-lambda0)
        fmax = model.f_table[-1]
        if np.any(np.atleast_1d(model.qprime(fmax) < target) & np.atleast_1d(pos > 0)):
            raise RangeError("depth beyond the tabulated Q' range")
        lo = np.zeros_like(pos)
        hi = np.full_like(pos, fmax)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            up = model.qprime(mid) >= target
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
        out = np.where(pos > 0.0, hi, 0.0)
    return out if out.ndim else float(out)


# -- radial densities --------------------------------------------------------


def _composition_terms(model, lambda0, tag):
    """fn(phi(w)) as a power series sum_j c_j w^kappa_j for analytic kinds.

    tag selects fn: "f" (identity), "q" (Q), "qpf" (Q'(f) f).  Returns None
    when no closed form exists (tabulated models)."""
    if model.kind == POLYTROPIC:
        k = model.k
        amp = ((-lambda0) * (1.0 + 1.0 / k)) ** -k
        amp2 = amp ** (1.0 + 1.0 / k)
        if tag == "f":
            return [(amp, k)]
        if tag == "q":
            return [(amp, k), (amp2, k + 1.0)]
        if tag == "qpf":
            return [(amp, k), ((1.0 + 1.0 / k) * amp2, k + 1.0)]
    elif model.kind == PLUMMER_POWER:
        amp = (7.0 / (9.0 * (-lambda0))) ** 3.5
        amp2 = amp ** (9.0 / 7.0)
        if tag == "f":
            return [(amp, 3.5)]
        if tag == "q":
            return [(amp2, 4.5)]
        if tag == "qpf":
            return [((9.0 / 7.0) * amp2, 4.5)]
    elif model.kind == PURE_JUMP:
        a = 1.0 / (-lambda0)  # phi = 1 + a w on w > 0
        if tag == "f":
            return [(1.0, 0.0), (a, 1.0)]
        if tag == "q":  # (phi^2 + 1)/2
            return [(1.0, 0.0), (a, 1.0), (0.5 * a * a, 2.0)]
        if tag == "qpf":  # phi^2 on phi > 1
            return [(1.0, 0.0), (2.0 * a, 1.0), (a * a, 2.0)]
    return None


def _depth_integral(model, cutoff, u, weight_power, fn, tol, tag=None):
    """8 pi sqrt(2) * int_0^sqrt(W) fn(phi(W - s^2)) s^(2+weight) ds, W = E0 - u.

    The substitution E = u + s^2 removes the sqrt(E-u) endpoint singularity of
    the raw energy integral.  When fn(phi(w)) is a closed-form power series the
    integral reduces to beta functions; otherwise adaptive quadrature is used.
    """
    W = cutoff.e0 - u
    if W <= 0.0:
        return 0.0
    terms = _composition_terms(model, cutoff.lambda0, tag) if tag else None
    if terms is not None:
        half_p = 0.5 * (3.0 + weight_power)
        val = sum(
            c * W ** (kappa + half_p) * 0.5 * _beta(half_p, kappa + 1.0)
            for c, kappa in terms
        )
        return 2.0 * FOUR_PI_SQRT2 * val
    smax = math.sqrt(W)

    def integrand(s):
        val = phi_of_depth(model, cutoff.lambda0, W - s * s)
        return fn(val) * s ** (2 + weight_power)

    val, err = quad(integrand, 0.0, smax, epsabs=tol, epsrel=1e-10, limit=200)
    scaled = 2.0 * FOUR_PI_SQRT2 * val
    if 2.0 * FOUR_PI_SQRT2 * err > max(1e3 * tol, 1e-7 * abs(scaled)):
        raise NumericalError(
            f"density quadrature residual {2.0 * FOUR_PI_SQRT2 * err:g} above tolerance"
        )
    return scaled


def density_of_potential(model: CasimirModel, cutoff: EnergyCutoff, u: float, tol: float = 1e-10) -> float:
    """Mass density 4 pi sqrt(2) int_u^E0 phi(E) sqrt(E - u) dE; zero for u >= E0."""
    return _depth_integral(model, cutoff, u, 0, lambda f: f, tol, tag="f")


def kinetic_density_of_potential(model, cutoff, u: float, tol: float = 1e-10) -> float:
    """Kinetic energy density 4 pi sqrt(2) int_u^E0 phi(E) (E - u)^(3/2) dE."""
    return _depth_integral(model, cutoff, u, 2, lambda f: f, tol, tag="f")


def casimir_density_of_potential(model, cutoff, u: float, tol: float = 1e-10) -> float:
    """Casimir density 4 pi sqrt(2) int_u^E0 Q(phi(E)) sqrt(E - u) dE."""
    return _depth_integral(model, cutoff, u, 0, model.q, tol, tag="q")


def qprime_weighted_density(model, cutoff, u: float, tol: float = 1e-10) -> float:
    """4 pi sqrt(2) int_u^E0 Q'(phi(E)) phi(E) sqrt(E - u) dE.

    Radial reduction of int Q'(f0) f0 dv, used to recompute the Lagrange
    multiplier from a constructed profile.
    """
    return _depth_integral(model, cutoff, u, 0, lambda f: model.qprime(f) * f, tol, tag="qpf")


# -- config ------------------------------------------------------------------

_KIND_ALIASES = {
    "poly": POLYTROPIC,
    "polytrope": POLYTROPIC,
    POLYTROPIC: POLYTROPIC,
    "jump": PURE_JUMP,
    PURE_JUMP: PURE_JUMP,
    "plummer": PLUMMER_POWER,
    PLUMMER_POWER: PLUMMER_POWER,
    TABULATED: TABULATED,
}


def model_from_config(cfg: dict) -> CasimirModel:
    """Build a model from a flat key-value mapping (kind, k, growth_constant)."""
    kind = _KIND_ALIASES.get(str(cfg.get("kind", "")).lower())
    if kind is None:
        raise UsageError(f"unknown model kind {cfg.get('kind')!r}")
    kwargs = {"kind": kind}
    if "k" in cfg:
        kwargs["k"] = float(cfg["k"])
    if "growth_constant" in cfg and cfg["growth_constant"] is not None:
        kwargs["growth_constant"] = float(cfg["growth_constant"])
    if kind == TABULATED:
        kwargs["f_table"] = tuple(float(x) for x in cfg["f_table"])
        kwargs["q_table"] = tuple(float(x) for x in cfg["q_table"])
    return CasimirModel(**kwargs)


def model_to_config(model: CasimirModel) -> dict:
    cfg = {"kind": model.kind, "k": model.k}
    if model.growth_constant is not None:
        cfg["growth_constant"] = model.growth_constant
    if model.kind == TABULATED:
        cfg["f_table"] = list(model.f_table)
        cfg["q_table"] = list(model.q_table)
    return cfg
