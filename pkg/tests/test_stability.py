"""Perturbation recipes, symmetry minimization, and short stability runs."""

import json
import math

import numpy as np
import pytest

import galstab.casimir as cas
from galstab import (
    CasimirModel,
    DomainError,
    PerturbationSpec,
    StabilityRunConfig,
    StabilityTimeSeries,
    best_scale,
    best_shift,
    perturb,
    plummer_closed_form,
    sample_steady_state,
    stability_distance,
    stability_run,
)
from galstab.stability import write_run_outputs

K1 = CasimirModel(kind=cas.POLYTROPIC, k=1.0)


@pytest.fixture(scope="module")
def k1_profile():
    from galstab import solve_emden_fowler

    return solve_emden_fowler(K1, -1.0, 1.0)


@pytest.fixture(scope="module")
def k1_sample(k1_profile):
    return sample_steady_state(k1_profile, 30000, seed=2)


@pytest.fixture(scope="module")
def k1_sample_3d(k1_profile):
    return sample_steady_state(k1_profile, 30000, backend="cartesian3d", seed=2)


# -- perturbations -------------------------------------------------------------


def test_identity_dilation(k1_sample):
    out = perturb(k1_sample, PerturbationSpec(kind="dilation", b=1.0), K1)
    np.testing.assert_array_equal(out.r, k1_sample.r)
    np.testing.assert_array_equal(out.w, k1_sample.w)


def test_dilation_preserves_casimir_and_mass(k1_sample):
    out = perturb(k1_sample, PerturbationSpec(kind="dilation", b=1.05), K1)
    assert out.casimir(K1) == pytest.approx(k1_sample.casimir(K1), rel=1e-12)
    assert out.total_mass() == pytest.approx(k1_sample.total_mass(), rel=1e-12)
    assert not np.array_equal(out.r, k1_sample.r)


def test_dilation_raises_distance(k1_profile, k1_sample):
    d0 = stability_distance(k1_sample, k1_profile)
    d1 = stability_distance(
        perturb(k1_sample, PerturbationSpec(kind="dilation", b=1.05), K1), k1_profile
    )
    assert d1.d > 0.0
    assert d1.m > 10.0 * max(d0.m, 1e-12)


def test_distance_monotone_in_dilation(k1_profile, k1_sample):
    ms = []
    for b in (1.01, 1.02, 1.05):
        pert = perturb(k1_sample, PerturbationSpec(kind="dilation", b=b), K1)
        ms.append(stability_distance(pert, k1_profile).m)
    assert ms[0] < ms[1] < ms[2]


def test_casimir_violating_dilation_rejected(k1_sample):
    with pytest.raises(DomainError):
        perturb(k1_sample, PerturbationSpec(kind="dilation", b=1.1, a=1.0), K1)


def test_boost_needs_3d(k1_sample):
    from galstab import UsageError

    with pytest.raises(UsageError):
        perturb(k1_sample, PerturbationSpec(kind="boost", velocity=(0.1, 0, 0)), K1)


def test_boost_energy_increment(k1_profile, k1_sample_3d):
    # E(boosted) - E(f0-moment) picks up exactly |V|^2/2 * mass in the raw
    # distance; position-dependent terms are untouched by the boost
    V = np.array([0.12, 0.0, 0.0])
    pert = perturb(k1_sample_3d, PerturbationSpec(kind="boost", velocity=tuple(V)), K1)
    d0 = stability_distance(k1_sample_3d, k1_profile)
    d1 = stability_distance(pert, k1_profile)
    momentum = np.sum(k1_sample_3d.masses[:, None] * k1_sample_3d.v, axis=0)
    inc = 0.5 * (V @ V) * k1_sample_3d.total_mass() + V @ momentum
    assert d1.d_raw - d0.d_raw == pytest.approx(inc, rel=1e-10)
    # the field mismatch is unchanged at t = 0 (positions untouched)
    assert d1.field_diff == pytest.approx(d0.field_diff, rel=1e-12)
    assert pert.casimir(K1) == k1_sample_3d.casimir(K1)


def test_amplitude_restores_casimir(k1_sample):
    pert = perturb(k1_sample, PerturbationSpec(kind="amplitude", strength=0.03), K1)
    assert pert.casimir(K1) == pytest.approx(k1_sample.casimir(K1), rel=1e-10)
    assert not np.allclose(pert.f, k1_sample.f)


def test_unknown_kind_rejected(k1_sample):
    from galstab import UsageError

    with pytest.raises(UsageError):
        perturb(k1_sample, PerturbationSpec(kind="wiggle"), K1)


# -- symmetry minimization -----------------------------------------------------


def test_best_shift_recovers_translation(k1_profile, k1_sample_3d):
    shift = np.array([0.15, -0.05, 0.1])
    moved = k1_sample_3d.copy()
    moved.x = moved.x + shift
    found = best_shift(moved, k1_profile)
    np.testing.assert_allclose(found, shift, atol=0.02)
    # and near zero for the unshifted sample
    found0 = best_shift(k1_sample_3d, k1_profile)
    assert np.linalg.norm(found0) < 0.02


def test_best_shift_radial_is_zero(k1_profile, k1_sample):
    np.testing.assert_array_equal(best_shift(k1_sample, k1_profile), np.zeros(3))


def test_best_scale_recovers_plummer_factor():
    p = plummer_closed_form(1.0)
    ens = sample_steady_state(p, 30000, seed=3, r_max=50.0)
    from galstab import ScalingTransform, apply_scaling

    pert = apply_scaling(ens, ScalingTransform.plummer(1.1))
    lam, rep = best_scale(pert, p)
    assert lam == pytest.approx(1.1, rel=5e-3)
    # after minimization the distance is back at the sampling noise floor
    base = stability_distance(ens, p).m
    assert rep.m < 3.0 * base


def test_best_scale_needs_closed_form(k1_profile, k1_sample):
    with pytest.raises(DomainError):
        best_scale(k1_sample, k1_profile)


# -- time series ---------------------------------------------------------------


def test_series_csv_round_trip(tmp_path):
    s = StabilityTimeSeries()
    for i in range(6):
        s.append({"t": 0.1 * i, "m": 1.0 + 0.01 * i, "d": 0.5, "hamiltonian": -1.0})
    path = tmp_path / "series.csv"
    s.to_csv(path)
    back = StabilityTimeSeries.from_csv(path)
    np.testing.assert_array_equal(back.column("t"), s.column("t"))
    np.testing.assert_array_equal(back.column("m"), s.column("m"))
    assert back.bound_ratio() == pytest.approx(s.bound_ratio())


def test_trend_flags_growth():
    flat = StabilityTimeSeries()
    growing = StabilityTimeSeries()
    rng = np.random.default_rng(0)
    for i in range(40):
        t = float(i)
        noise = 1e-3 * rng.standard_normal()
        flat.append({"t": t, "m": 1.0 + noise})
        growing.append({"t": t, "m": 1.0 + 0.05 * t + noise})
    assert not flat.secular_growth()
    assert growing.secular_growth()
    slope, err = growing.trend()
    assert slope == pytest.approx(0.05, abs=3.0 * err + 1e-4)


# -- short end-to-end runs -----------------------------------------------------


def test_stability_run_conserves_invariants(k1_profile):
    cfg = StabilityRunConfig(n_particles=5000, seed=1, t_end_dyn=1.0,
                             steps_per_dyn=100, cadence=20)
    spec = PerturbationSpec(kind="dilation", b=1.02)
    final, series, manifest = stability_run(k1_profile, spec, cfg)
    c = series.column("casimir")
    mass = series.column("mass")
    assert np.max(np.abs(c / c[0] - 1.0)) < 1e-13
    assert np.max(np.abs(mass / mass[0] - 1.0)) < 1e-13
    assert manifest["bound_ratio"] == pytest.approx(series.bound_ratio())
    assert manifest["perturbation"]["b"] == 1.02
    assert len(series.rows) == 1 + 100 // 20


def test_stability_run_unperturbed_stays_quiet(k1_profile):
    cfg = StabilityRunConfig(n_particles=5000, seed=1, t_end_dyn=1.0,
                             steps_per_dyn=100, cadence=20)
    final, series, manifest = stability_run(k1_profile, None, cfg)
    # m starts and stays at the Monte-Carlo noise floor
    m = series.column("m")
    assert np.all(m >= 0.0)
    assert np.max(m) < 50.0 * m[0] + 1e-6


def test_write_run_outputs(tmp_path, k1_profile):
    cfg = StabilityRunConfig(n_particles=1000, seed=1, t_end_dyn=0.2,
                             steps_per_dyn=50, cadence=10)
    final, series, manifest = stability_run(k1_profile, None, cfg)
    csv_path, manifest_path = write_run_outputs(series, manifest, tmp_path, stem="t")
    back = StabilityTimeSeries.from_csv(csv_path)
    assert len(back.rows) == len(series.rows)
    with open(manifest_path) as fh:
        m = json.load(fh)
    assert m["config"]["n_particles"] == 1000
    assert "profile_sha256" in m


def test_stability_run_deterministic(k1_profile):
    cfg = StabilityRunConfig(n_particles=2000, seed=7, t_end_dyn=0.3,
                             steps_per_dyn=50, cadence=10)
    spec = PerturbationSpec(kind="dilation", b=1.01)
    _, s1, _ = stability_run(k1_profile, spec, cfg)
    _, s2, _ = stability_run(k1_profile, spec, cfg)
    for col in ("m", "hamiltonian", "d"):
        np.testing.assert_array_equal(s1.column(col), s2.column(col))
