"""Sampling fidelity and symplectic integration of the particle dynamics."""

import math

import numpy as np
import pytest

import galstab.casimir as cas
from galstab import (
    CasimirModel,
    DomainError,
    IntegratorConfig,
    ParticleEnsemble,
    UsageError,
    dynamical_time,
    evaluate_ensemble,
    plummer_closed_form,
    run,
    sample_steady_state,
    solve_emden_fowler,
    step,
)

K1 = CasimirModel(kind=cas.POLYTROPIC, k=1.0)


@pytest.fixture(scope="module")
def k1_profile():
    return solve_emden_fowler(K1, -1.0, 1.0)


@pytest.fixture(scope="module")
def plummer():
    return plummer_closed_form(1.0)


# -- sampling ------------------------------------------------------------------


def test_sampled_mass_is_exact(k1_profile):
    ens = sample_steady_state(k1_profile, 5000, seed=2)
    assert ens.total_mass() == pytest.approx(k1_profile.total_mass, rel=1e-14)


def test_sample_respects_energy_cutoff(k1_profile):
    ens = sample_steady_state(k1_profile, 20000, seed=4)
    energy = ens.specific_kinetic() + k1_profile.potential_at(ens.r)
    assert np.max(energy) <= k1_profile.e0 + 1e-12
    assert np.min(ens.f) >= 0.0
    assert np.max(ens.r) <= k1_profile.r_support + 1e-12


def test_sample_radial_chi_square(plummer):
    # binned radius counts against the exact enclosed-mass law.  Plummer
    # sampling is truncated at r_max, so normalize by the contained mass.
    n = 100000
    r_max = 50.0
    ens = sample_steady_state(plummer, n, seed=12, r_max=r_max)
    edges = np.geomspace(0.05, r_max, 21)
    counts, _ = np.histogram(ens.r, bins=edges)
    m_in = plummer.enclosed_mass_at(r_max)
    prob = np.diff(plummer.enclosed_mass_at(edges)) / m_in
    inside = np.sum((ens.r >= edges[0]) & (ens.r < edges[-1]))
    expected = prob / prob.sum() * inside
    chi2 = np.sum((counts - expected) ** 2 / expected)
    # 20 bins - 1 dof: mean 19, sd ~ sqrt(38); accept within ~4 sigma
    assert chi2 < 19.0 + 4.0 * math.sqrt(38.0)


def test_sample_speed_distribution(k1_profile):
    # second velocity moment against the profile's quadrature value
    from galstab import evaluate_profile

    ens = sample_steady_state(k1_profile, 60000, seed=6)
    e_kin_mc = ens.kinetic_energy()
    e_kin = evaluate_profile(k1_profile).e_kin
    assert e_kin_mc == pytest.approx(e_kin, rel=0.02)


def test_sample_3d_matches_radial_statistics(k1_profile):
    r3 = sample_steady_state(k1_profile, 30000, backend="cartesian3d", seed=8)
    rr = sample_steady_state(k1_profile, 30000, seed=8)
    assert np.mean(r3.radii()) == pytest.approx(np.mean(rr.r), rel=0.02)
    assert r3.kinetic_energy() == pytest.approx(rr.kinetic_energy(), rel=0.02)
    # isotropy: mean velocity vanishes at MC level
    vbar = np.abs(np.mean(r3.v, axis=0))
    assert np.all(vbar < 5.0 * np.std(r3.v) / math.sqrt(r3.n))


def test_monte_carlo_convergence_rate(k1_profile):
    # kinetic-energy error vs exact quadrature decays like N^(-1/2)
    from galstab import evaluate_profile

    e_kin = evaluate_profile(k1_profile).e_kin
    sizes = np.array([1000, 4000, 16000, 64000])
    errs = []
    for n in sizes:
        vals = [
            abs(sample_steady_state(k1_profile, int(n), seed=s).kinetic_energy() - e_kin)
            for s in range(8)
        ]
        errs.append(np.sqrt(np.mean(np.square(vals))))
    slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
    assert -0.65 < slope < -0.35


def test_sample_validation(k1_profile):
    with pytest.raises(UsageError):
        sample_steady_state(k1_profile, 0)
    with pytest.raises(UsageError):
        sample_steady_state(k1_profile, 10, backend="cylindrical")


# -- invariants of the integrator ----------------------------------------------


def test_casimir_and_mass_bit_exact(k1_profile):
    ens = sample_steady_state(k1_profile, 3000, seed=1)
    t_dyn = dynamical_time(k1_profile)
    cfg = IntegratorConfig(dt=t_dyn / 100)
    out, _ = run(ens, cfg, n_steps=50)
    # omega and f are never touched: conservation is exact, not approximate
    assert np.array_equal(out.omega, ens.omega)
    assert np.array_equal(out.f, ens.f)
    assert out.casimir(K1) == ens.casimir(K1)
    assert out.total_mass() == ens.total_mass()


def test_angular_momentum_untouched(k1_profile):
    ens = sample_steady_state(k1_profile, 2000, seed=3)
    cfg = IntegratorConfig(dt=dynamical_time(k1_profile) / 100)
    out, _ = run(ens, cfg, n_steps=20)
    assert np.array_equal(out.L, ens.L)


def test_circular_orbit_in_frozen_field(plummer):
    # a particle on a circular orbit of the frozen Plummer field stays there
    r0 = 1.0
    m_in = plummer.enclosed_mass_at(r0)
    L = r0 * m_in  # L here stores (r v_t)^2
    ens = ParticleEnsemble(
        backend="radial",
        r=np.array([r0]),
        w=np.array([0.0]),
        L=np.array([L]),
        omega=np.array([1.0]),
        f=np.array([1.0]),
    )
    v_c = math.sqrt(m_in / r0)
    period = 2.0 * math.pi * r0 / v_c
    cfg = IntegratorConfig(dt=period / 1000)
    out, _ = run(ens, cfg, field=plummer, n_steps=100 * 1000)
    assert out.r[0] == pytest.approx(r0, rel=1e-8)
    assert abs(out.w[0]) < 1e-8 * v_c


def test_frozen_field_second_order(plummer):
    # energy error in a frozen external field scales ~ dt^2.  Use moderately
    # eccentric orbits so no particle needs pericenter substepping, which
    # would decouple its error from dt.
    rng = np.random.default_rng(5)
    n = 300
    r = rng.uniform(0.5, 2.0, n)
    v_c = np.sqrt(plummer.enclosed_mass_at(r) / r)
    ens = ParticleEnsemble(
        backend="radial",
        r=r,
        w=0.3 * v_c * rng.standard_normal(n),
        L=(r * v_c) ** 2 * rng.uniform(0.7, 1.3, n),
        omega=np.ones(n),
        f=np.ones(n),
    )

    def ham(e):
        rep = evaluate_ensemble(e, field=plummer)
        return rep.e_kin + 2.0 * rep.e_pot  # conserved frozen-field energy

    h0 = ham(ens)
    t_span = 10.0
    errs = []
    dts = [0.05, 0.025, 0.0125]
    for dt in dts:
        cfg = IntegratorConfig(dt=dt)
        out, _ = run(ens, cfg, field=plummer, n_steps=int(round(t_span / dt)))
        errs.append(abs(ham(out) - h0))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 1.6 < slope < 2.6


def test_time_reversibility(plummer):
    # frozen-field smooth orbits are reversible: negate w, integrate back
    rng = np.random.default_rng(7)
    n = 200
    r = rng.uniform(0.5, 2.0, n)
    v_c = np.sqrt(plummer.enclosed_mass_at(r) / r)
    ens = ParticleEnsemble(
        backend="radial",
        r=r,
        w=0.1 * v_c * rng.standard_normal(n),
        L=(r * v_c) ** 2 * rng.uniform(0.8, 1.2, n),
        omega=np.ones(n),
        f=np.ones(n),
    )
    cfg = IntegratorConfig(dt=0.01)
    fwd, _ = run(ens, cfg, field=plummer, n_steps=100)
    fwd.w = -fwd.w
    back, _ = run(fwd, cfg, field=plummer, n_steps=100)
    assert np.max(np.abs(back.r - ens.r)) < 1e-9
    assert np.max(np.abs(back.w + ens.w)) < 1e-9


def test_kepler_two_body_3d():
    # two bodies on a circular orbit about their barycenter, direct summation
    m = np.array([1.0, 1.0])
    x = np.array([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]])
    v_orb = math.sqrt(1.0 / 2.0)  # v^2 = G m_other^2 / (M r_sep) = 1/2
    v = np.array([[0.0, v_orb, 0.0], [0.0, -v_orb, 0.0]])
    ens = ParticleEnsemble(backend="cartesian3d", x=x, v=v,
                           omega=m.copy(), f=np.ones(2))
    period = 2.0 * math.pi * 0.5 / v_orb
    cfg = IntegratorConfig(dt=period / 10000)

    def ham(e):
        return evaluate_ensemble(e).hamiltonian

    h0 = ham(ens)
    out, _ = run(ens, cfg, n_steps=10000)
    assert abs(ham(out) / h0 - 1.0) < 1e-6
    # still on the unit-separation circle
    sep = np.linalg.norm(out.x[0] - out.x[1])
    assert sep == pytest.approx(1.0, rel=1e-5)


def test_3d_boost_centroid_moves_linearly(k1_profile):
    ens = sample_steady_state(k1_profile, 2000, backend="cartesian3d", seed=10)
    V = np.array([0.3, -0.1, 0.2])
    ens.v = ens.v + V
    cfg = IntegratorConfig(dt=0.01)
    out, _ = run(ens, cfg, n_steps=50)
    masses = ens.masses
    # internal forces are pairwise symmetric, so the centroid moves with the
    # total momentum (boost plus the sample's own Monte-Carlo drift)
    v_cm = np.sum(masses[:, None] * ens.v, axis=0) / np.sum(masses)
    c0 = np.sum(masses[:, None] * ens.x, axis=0) / np.sum(masses)
    c1 = np.sum(masses[:, None] * out.x, axis=0) / np.sum(masses)
    np.testing.assert_allclose(c1 - c0, v_cm * (out.t - ens.t), atol=1e-10)
    np.testing.assert_allclose(v_cm - V, np.zeros(3), atol=0.05)


def test_self_consistent_short_term_energy(k1_profile):
    ens = sample_steady_state(k1_profile, 20000, seed=14)
    t_dyn = dynamical_time(k1_profile)
    cfg = IntegratorConfig(dt=t_dyn / 200)

    def ham(e):
        return evaluate_ensemble(e).hamiltonian

    h0 = ham(ens)
    out, _ = run(ens, cfg, n_steps=400)  # 2 t_dyn
    assert abs(ham(out) / h0 - 1.0) < 2e-3


def test_run_monitor_records(k1_profile):
    ens = sample_steady_state(k1_profile, 500, seed=1)
    cfg = IntegratorConfig(dt=0.01)
    out, recs = run(
        ens, cfg,
        monitors={"ekin": lambda e: e.kinetic_energy()},
        cadence=5, n_steps=20,
    )
    assert len(recs) == 5  # t = 0 plus every 5th of 20 steps
    assert all("t" in r and "ekin" in r for r in recs)
    assert recs[-1]["t"] == pytest.approx(out.t)


def test_step_returns_new_object(k1_profile):
    ens = sample_steady_state(k1_profile, 100, seed=1)
    r_before = ens.r.copy()
    out = step(ens, IntegratorConfig(dt=0.01))
    assert out is not ens
    np.testing.assert_array_equal(ens.r, r_before)
    assert out.t == pytest.approx(0.01)


def test_snapshot_round_trip(tmp_path, k1_profile):
    for backend in ("radial", "cartesian3d"):
        ens = sample_steady_state(k1_profile, 300, backend=backend, seed=2)
        ens.t = 1.5
        path = tmp_path / f"snap_{backend}.bin"
        ens.save(path)
        back = ParticleEnsemble.load(path)
        assert back.backend == backend
        assert back.t == 1.5
        for name in ("r", "w", "L", "x", "v", "omega", "f"):
            a, b = getattr(ens, name), getattr(back, name)
            if a is None:
                assert b is None
            else:
                np.testing.assert_array_equal(a, b)


def test_ensemble_validation():
    with pytest.raises(DomainError):
        ParticleEnsemble(
            backend="radial", omega=np.array([0.0]), f=np.array([1.0]),
            r=np.array([1.0]), w=np.array([0.0]), L=np.array([0.0]),
        )
    with pytest.raises(UsageError):
        ParticleEnsemble(backend="polar", omega=np.array([1.0]), f=np.array([1.0]))


def test_integrator_config_validation():
    with pytest.raises(UsageError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(UsageError):
        IntegratorConfig(dt=0.1, softening=-1.0)


def test_dynamical_time_plummer(plummer):
    rh = plummer.half_mass_radius()
    assert dynamical_time(plummer) == pytest.approx(2.0 * math.pi * rh**1.5, rel=1e-12)
