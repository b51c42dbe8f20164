"""Command-line front end for reproducible batch runs.

Every command is deterministic given (config, seed).  Outputs are JSON
profiles, binary particle snapshots, and CSV time series; the report
command renders figures from an existing CSV.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import casimir as cas
from . import dynamics as dyn
from . import functionals as func
from . import stability as stab
from . import steadystate as ss
from .errors import DomainError, GalstabError, NumericalError, UsageError

SERIES_COLUMNS_DOC = (
    "stability CSV columns: t, hamiltonian, casimir, mass, d, d_raw, "
    "field_diff, m (= d + field_diff), shift_x/y/z, scale.  "
    "simulate CSV columns: t, hamiltonian, casimir, mass."
)


def _model_from_args(args) -> cas.CasimirModel:
    cfg = {"kind": args.model, "k": args.k}
    if getattr(args, "growth_constant", None) is not None:
        cfg["growth_constant"] = args.growth_constant
    return cas.model_from_config(cfg)


def _outdir(args) -> str:
    out = args.outdir or os.environ.get("GALSTAB_OUTDIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _add_model_args(p):
    p.add_argument("--model", default="poly",
                   choices=["poly", "jump", "plummer", "polytropic_plus_linear",
                            "pure_jump", "plummer_power"])
    p.add_argument("--k", type=float, default=1.0, help="polytropic exponent in (0, 7/2)")
    p.add_argument("--growth-constant", type=float, default=None,
                   help="coefficient of the linear part of Q for the poly model")


def _add_common(p):
    p.add_argument("--outdir", default=None,
                   help="output directory (env GALSTAB_OUTDIR as fallback)")
    p.add_argument("--config", default=None,
                   help="flat key=value file providing defaults; flags win")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP thread pools")


def _load_profile(path) -> ss.SteadyStateProfile:
    if not os.path.exists(path):
        raise UsageError(f"profile file not found: {path}")
    return ss.SteadyStateProfile.load(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="galstab",
        description="Construct isotropic steady states, evaluate their energy and "
                    "Casimir functionals, and test nonlinear stability by perturbed "
                    "particle dynamics.",
        epilog=SERIES_COLUMNS_DOC,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("construct", help="solve for a steady state and persist it")
    _add_model_args(p)
    _add_common(p)
    p.add_argument("--mass", type=float, default=None, help="target Casimir mass")
    p.add_argument("--depth", type=float, default=None, help="central depth E0 - U(0)")
    p.add_argument("--lambda0", type=float, default=-1.0, help="multiplier seed (negative)")
    p.add_argument("--c0", type=float, default=None, help="closed-form family amplitude")
    p.add_argument("--stem", default="profile")

    p = sub.add_parser("plummer", help="closed-form k=7/2 state")
    _add_common(p)
    p.add_argument("--c0", type=float, required=True)
    p.add_argument("--r-max", type=float, default=1e3)
    p.add_argument("--stem", default="plummer")

    p = sub.add_parser("evaluate", help="energy/Casimir functionals of a stored profile")
    _add_common(p)
    p.add_argument("--profile", required=True)
    p.add_argument("--stem", default="functionals")

    p = sub.add_parser("sample", help="draw a particle realization of a profile")
    _add_common(p)
    p.add_argument("--profile", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--backend", choices=[dyn.RADIAL, dyn.CARTESIAN3D], default=dyn.RADIAL)
    p.add_argument("--stem", default="ensemble")

    p = sub.add_parser("simulate", help="integrate an ensemble, monitoring conservation")
    _add_common(p)
    p.add_argument("--profile", required=True)
    p.add_argument("--snapshot", default=None,
                   help="start from a stored snapshot instead of sampling")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--backend", choices=[dyn.RADIAL, dyn.CARTESIAN3D], default=dyn.RADIAL)
    p.add_argument("--t-end-dyn", type=float, default=5.0)
    p.add_argument("--steps-per-dyn", type=int, default=200)
    p.add_argument("--cadence", type=int, default=20)
    p.add_argument("--softening", type=float, default=0.0)
    p.add_argument("--frozen-field", action="store_true")
    p.add_argument("--stem", default="simulation")

    p = sub.add_parser("stability", help="construct -> sample -> perturb -> evolve -> distances")
    _add_common(p)
    p.add_argument("--profile", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--backend", choices=[dyn.RADIAL, dyn.CARTESIAN3D], default=dyn.RADIAL)
    p.add_argument("--perturb", choices=["none", "dilation", "boost", "amplitude",
                                         "plummer-scale"], default="dilation")
    p.add_argument("--b", type=float, default=1.02, help="dilation factor")
    p.add_argument("--a", type=float, default=None,
                   help="spatial dilation override (defaults to 1/b; anything "
                        "else violates the Casimir constraint and is refused)")
    p.add_argument("--velocity", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--strength", type=float, default=0.05, help="amplitude perturbation")
    p.add_argument("--lam", type=float, default=1.0, help="symmetry scale parameter")
    p.add_argument("--t-end-dyn", type=float, default=5.0)
    p.add_argument("--steps-per-dyn", type=int, default=200)
    p.add_argument("--cadence", type=int, default=20)
    p.add_argument("--softening", type=float, default=0.0)
    p.add_argument("--frozen-field", action="store_true")
    p.add_argument("--optimize-shift", action="store_true")
    p.add_argument("--optimize-scale", action="store_true")
    p.add_argument("--stem", default="stability")

    p = sub.add_parser("scaling-check", help="mass-scaling ratio and symmetry invariance")
    _add_model_args(p)
    _add_common(p)
    p.add_argument("--mass", type=float, default=1.0)
    p.add_argument("--c0", type=float, default=1.0,
                   help="closed-form amplitude for the plummer variant")
    p.add_argument("--lam-grid", type=float, nargs="+", default=(0.5, 1.0, 2.0))
    p.add_argument("--stem", default="scaling_check")

    p = sub.add_parser("report", help="render figures for a stability CSV")
    _add_common(p)
    p.add_argument("--series", required=True, help="stability CSV produced by this tool")
    p.add_argument("--stem", default=None)

    return parser


# -- command bodies -----------------------------------------------------------


def _cmd_construct(args):
    out = _outdir(args)
    if args.model in ("plummer", "plummer_power") or args.c0 is not None:
        if args.c0 is None:
            raise UsageError("the closed-form family needs --c0")
        prof = ss.plummer_closed_form(args.c0)
    else:
        model = _model_from_args(args)
        if args.mass is not None:
            prof = ss.match_target_mass(model, args.mass, lambda0_seed=args.lambda0)
        elif args.depth is not None:
            prof = ss.solve_emden_fowler(model, args.lambda0, args.depth)
        else:
            raise UsageError("construct needs --mass or --depth (or --c0)")
    path = os.path.join(out, f"{args.stem}.json")
    prof.save(path)
    rep = func.evaluate_profile(prof)
    rep_path = os.path.join(out, f"{args.stem}_functionals.json")
    with open(rep_path, "w") as fh:
        fh.write(rep.to_json())
    print(f"profile -> {path}")
    print(f"functionals -> {rep_path}")
    print(f"U(0) = {prof.U[0]:.10g}  lambda0 = {prof.lambda0:.10g}  "
          f"casimir_mass = {prof.casimir_mass:.10g}")
    return 0


def _cmd_plummer(args):
    out = _outdir(args)
    prof = ss.plummer_closed_form(args.c0, ss.GridControl(r_max=args.r_max))
    path = os.path.join(out, f"{args.stem}.json")
    prof.save(path)
    print(f"profile -> {path}")
    print(f"U(0) = {prof.U[0]:.10g}  lambda0 = {prof.lambda0:.10g}  "
          f"mass = {prof.total_mass:.10g}")
    return 0


def _cmd_evaluate(args):
    out = _outdir(args)
    prof = _load_profile(args.profile)
    rep = func.evaluate_profile(prof)
    path = os.path.join(out, f"{args.stem}.json")
    with open(path, "w") as fh:
        fh.write(rep.to_json())
    print(rep.to_json())
    print(f"functionals -> {path}", file=sys.stderr)
    return 0


def _cmd_sample(args):
    out = _outdir(args)
    prof = _load_profile(args.profile)
    ens = dyn.sample_steady_state(prof, args.n, backend=args.backend, seed=args.seed)
    path = os.path.join(out, f"{args.stem}.snap")
    ens.save(path)
    print(f"ensemble ({ens.n} particles, {ens.backend}) -> {path}")
    print(f"mass = {ens.total_mass():.10g}  casimir = {ens.casimir(prof.model):.10g}")
    return 0


def _cmd_simulate(args):
    out = _outdir(args)
    prof = _load_profile(args.profile)
    if args.snapshot:
        ens = dyn.ParticleEnsemble.load(args.snapshot)
    else:
        ens = dyn.sample_steady_state(prof, args.n, backend=args.backend, seed=args.seed)
    t_dyn = dyn.dynamical_time(prof)
    cfg = dyn.IntegratorConfig(dt=t_dyn / args.steps_per_dyn, softening=args.softening)
    model = prof.model

    def monitor(e):
        rep = func.evaluate_ensemble(e, model=model, softening=args.softening)
        return {"hamiltonian": rep.hamiltonian, "casimir": rep.casimir, "mass": rep.mass}

    final, records = dyn.run(
        ens, cfg, monitors={"_": monitor},
        field=prof if args.frozen_field else None,
        cadence=args.cadence,
        n_steps=int(round(args.t_end_dyn * args.steps_per_dyn)),
    )
    csv_path = os.path.join(out, f"{args.stem}.csv")
    with open(csv_path, "w") as fh:
        fh.write("t,hamiltonian,casimir,mass\n")
        for row in records:
            fh.write(f"{row['t']!r},{row['hamiltonian']!r},"
                     f"{row['casimir']!r},{row['mass']!r}\n")
    snap_path = os.path.join(out, f"{args.stem}_final.snap")
    final.save(snap_path)
    h = np.array([r["hamiltonian"] for r in records])
    print(f"series -> {csv_path}")
    print(f"final snapshot -> {snap_path}")
    print(f"relative energy drift = {abs(h[-1] / h[0] - 1.0):.3e}")
    return 0


def _perturbation_from_args(args):
    if args.perturb == "none":
        return None
    kind = args.perturb.replace("-", "_")
    return stab.PerturbationSpec(
        kind=kind, b=args.b, a=args.a, velocity=tuple(args.velocity),
        strength=args.strength, lam=args.lam,
    )


def _cmd_stability(args):
    out = _outdir(args)
    prof = _load_profile(args.profile)
    spec = _perturbation_from_args(args)
    cfg = stab.StabilityRunConfig(
        n_particles=args.n, seed=args.seed, backend=args.backend,
        t_end_dyn=args.t_end_dyn, steps_per_dyn=args.steps_per_dyn,
        cadence=args.cadence, softening=args.softening,
        optimize_shift=args.optimize_shift, optimize_scale=args.optimize_scale,
        frozen_field=args.frozen_field,
    )
    final, series, manifest = stab.stability_run(prof, spec, cfg)
    csv_path, man_path = stab.write_run_outputs(series, manifest, out, stem=args.stem)
    final.save(os.path.join(out, f"{args.stem}_final.snap"))
    print(f"series -> {csv_path}")
    print(f"manifest -> {man_path}")
    print(f"max m(t)/m(0) = {series.bound_ratio():.6g}")
    return 0


def _cmd_scaling_check(args):
    out = _outdir(args)
    report = {}
    if args.model in ("plummer", "plummer_power"):
        prof = ss.plummer_closed_form(args.c0)
        base = func.evaluate_profile(prof)
        devs = {}
        for lam in args.lam_grid:
            scaled = ss.apply_scaling(prof, ss.ScalingTransform.plummer(lam))
            rep = func.evaluate_profile(scaled)
            devs[str(lam)] = {
                "dH_rel": abs(rep.hamiltonian / base.hamiltonian - 1.0),
                "dC_rel": abs(rep.casimir / base.casimir - 1.0),
                "mass_ratio": rep.mass / base.mass,
            }
        report = {"kind": "symmetry_invariance", "c0": args.c0, "deviations": devs,
                  "max_dH_rel": max(v["dH_rel"] for v in devs.values())}
        print(f"max |dH|/|H| over the lambda grid = {report['max_dH_rel']:.3e}")
    else:
        model = _model_from_args(args)
        p1 = ss.match_target_mass(model, args.mass)
        p2 = ss.match_target_mass(model, 2.0 * args.mass)
        r1, r2 = func.evaluate_profile(p1), func.evaluate_profile(p2)
        ratio = r2.hamiltonian / r1.hamiltonian
        expected = 2.0 ** (7.0 / 3.0)
        report = {
            "kind": "mass_scaling", "mass": args.mass,
            "h_small": r1.hamiltonian, "h_large": r2.hamiltonian,
            "ratio": ratio, "expected": expected,
            "rel_dev": abs(ratio / expected - 1.0),
        }
        print(f"H(2M)/H(M) = {ratio:.6f} (expected {expected:.6f}, "
              f"relative deviation {report['rel_dev']:.2e})")
    path = os.path.join(out, f"{args.stem}.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"report -> {path}", file=sys.stderr)
    return 0


def _cmd_report(args):
    from .report import render_stability_figures

    out = _outdir(args)
    if not os.path.exists(args.series):
        raise UsageError(f"series file not found: {args.series}")
    series = stab.StabilityTimeSeries.from_csv(args.series)
    stem = args.stem or os.path.splitext(os.path.basename(args.series))[0]
    paths = render_stability_figures(series, out, stem=stem)
    for p in paths:
        print(f"figure -> {p}")
    return 0


_COMMANDS = {
    "construct": _cmd_construct,
    "plummer": _cmd_plummer,
    "evaluate": _cmd_evaluate,
    "sample": _cmd_sample,
    "simulate": _cmd_simulate,
    "stability": _cmd_stability,
    "scaling-check": _cmd_scaling_check,
    "report": _cmd_report,
}


def _config_tokens(path):
    """Flat key=value file -> flag tokens, prepended so real flags win."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    tokens = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"bad config line (need key=value): {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            tokens.append("--" + key.replace("_", "-"))
            if val.lower() not in ("true",):
                tokens.extend(val.split())
    return tokens


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # splice config-file defaults in right after the subcommand
    if "--config" in argv:
        idx = argv.index("--config")
        try:
            cfg_path = argv[idx + 1]
        except IndexError:
            print("--config needs a path", file=sys.stderr)
            return 2
        tokens = _config_tokens(cfg_path)
        argv = argv[:1] + tokens + argv[1:]

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2

    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    try:
        return _COMMANDS[args.command](args)
    except (UsageError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except GalstabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
