import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langevin_lab import sde
from langevin_lab.errors import ConfigError
from langevin_lab.model import harmonic, pendulum, variable_mass_pendulum

from conftest import custom_1d_model


def free_particle():
    zero = np.zeros_like
    return custom_1d_model(zero, zero, zero, lambda q: 2.0 * np.ones_like(q), zero, D=zero,
                           topology="line", bounds=(-1e6, 1e6))


def test_free_motion_is_exact():
    model = free_particle()
    q0 = np.array([[0.1], [-3.0]])
    p0 = np.array([[1.0], [-0.5]])
    ens = sde.Ensemble(q0, p0, 0.0, seed=1)
    for _ in range(10):
        ens = sde.em_step(model, ens, 0.1)
    np.testing.assert_array_equal(ens.p, p0)
    np.testing.assert_allclose(ens.q, q0 + p0 / 2.0 * 1.0, rtol=0, atol=1e-14)


def test_explicit_euler_energy_drift_is_first_order():
    model = harmonic(diffusion=0.0)
    drift = []
    for dt in (0.01, 0.005):
        ens = sde.Ensemble([[1.0]], [[0.0]], 0.0, seed=0)
        for _ in range(int(round(1.0 / dt))):
            ens = sde.em_step(model, ens, dt)
        drift.append(0.5 * (ens.q[0, 0] ** 2 + ens.p[0, 0] ** 2) - 0.5)
    # each explicit Euler step multiplies H by 1 + dt^2, so the drift over unit time is ~ H dt
    assert drift[0] == pytest.approx(0.5 * 0.01, rel=0.02)
    assert drift[0] / drift[1] == pytest.approx(2.0, rel=0.02)


@pytest.mark.slow
def test_harmonic_stationary_covariance():
    model = harmonic()
    N = 100_000
    est = {}
    for dt, seed in ((0.02, 3), (0.01, 4)):
        ens = sde.sample_equilibrium(model, N, seed)
        res = sde.simulate_ensemble(model, sde.SDEConfig(N=N, dt=dt, t_end=5.0, seed=seed,
                                                         record_every=10**9), ens)
        q, p = res.final.q[:, 0], res.final.p[:, 0]
        est[dt] = {k: sde.batch_mean_se(v) for k, v in (("qq", q * q), ("pp", p * p), ("qp", q * p))}
    # Euler-Maruyama stationary bias is O(dt); the two-step extrapolation removes it
    for key, target in (("qq", 1.0), ("pp", 1.0), ("qp", 0.0)):
        (m1, s1), (m2, s2) = est[0.02][key], est[0.01][key]
        m = 2 * m2 - m1
        se = np.hypot(2 * s2, s1)
        assert abs(m - target) < 3 * se, (key, m, se)


def test_bitwise_reproducible_single_particle():
    model = pendulum()
    runs = []
    for _ in range(2):
        cfg = sde.SDEConfig(N=1, dt=0.01, t_end=0.1, seed=42, record_every=1, keep_trajectory=True)
        res = sde.simulate_ensemble(model, cfg, sde.Ensemble([[1.0]], [[0.2]], 0.0, 42))
        runs.append(np.array([(e.q[0, 0], e.p[0, 0]) for e in res.trajectory]))
    assert len(runs[0]) == 11
    assert runs[0].tobytes() == runs[1].tobytes()


def test_noise_streams_are_block_local():
    stream = sde.NoiseStream(9)
    big = stream.normals(5, 2 * sde.BLOCK + 7, 1)
    small = stream.normals(5, sde.BLOCK, 1)
    np.testing.assert_array_equal(big[: sde.BLOCK], small)
    assert not np.array_equal(stream.normals(6, 10, 1), stream.normals(5, 10, 1))
    assert not np.array_equal(big[: 10], big[sde.BLOCK: sde.BLOCK + 10])
    z = stream.normals(0, 200_000, 1)[:, 0]
    assert abs(z.mean()) < 5 / np.sqrt(z.size) and abs(z.var() - 1) < 0.02


def test_equilibrium_sampler_moments():
    model = variable_mass_pendulum(mu=0.4)
    ens = sde.sample_equilibrium(model, 100_000, 5)
    m, se = sde.batch_mean_se(ens.p[:, 0] ** 2)
    assert abs(m - sde.equilibrium_second_moment(model)) < 3 * se
    assert np.all((ens.q >= 0) & (ens.q < 2 * np.pi))


def test_equilibrium_energy_drift_vanishes():
    model = pendulum()
    ens = sde.sample_equilibrium(model, 100_000, 11)
    r = sde.initial_energy_rate(model, ens, 0.005)
    assert abs(r["drift"]) < 3 * r["drift_se"]
    assert abs(r["fd_rate"]) < 3 * r["fd_se"]


def test_cold_start_heats():
    model = pendulum()
    ens = sde.initial_ensemble(model, 100_000, 2, {"kind": "cold"})
    r = sde.initial_energy_rate(model, ens, 0.005)
    # no velocity at t = 0: the drift is the pure heating term (1/2) D / M = 1/2
    assert r["drift"] == pytest.approx(0.5, abs=1e-15) and r["heat"] == pytest.approx(0.5)
    assert abs(r["fd_rate"] - r["heat"]) < 3 * np.hypot(r["fd_se"], r["heat_se"] + 1e-300)


def test_hot_start_cools():
    model = pendulum()
    ens = sde.initial_ensemble(model, 20_000, 2, {"kind": "hot", "scale": 3.0})
    r = sde.initial_energy_rate(model, ens, 0.005)
    assert r["drift"] < 0 and r["drift"] + 3 * r["drift_se"] < 0


def test_energy_balance_audit():
    model = pendulum()
    cfg = sde.SDEConfig(N=20_000, dt=0.01, t_end=1.0, seed=3, record_every=1, keep_trajectory=True,
                        initial={"kind": "cold"})
    res = sde.simulate_ensemble(model, cfg)
    audit = sde.energy_balance_audit(model, res.trajectory)
    assert audit.checks["energy_split"]
    assert audit.checks["dEH_match"] and audit.checks["dET_match"] and audit.checks["conditional_match"]
    assert len(audit.rows()[0]) == len(sde.ENERGY_AUDIT_HEADER)
    with pytest.raises(ConfigError):
        sde.energy_balance_audit(model, res.trajectory[:2])


def test_deterministic_break_event():
    rep = sde.deterministic_energy_audit(pendulum(), (2.5, 0.0), 10.0, damping=0.3)
    assert rep.events, rep.message
    ev = rep.events[0]
    assert all(ev["checks"].values()), ev
    assert ev["Hdddot"] == pytest.approx(ev["Hdddot_pred"], rel=0.05)
    assert ev["Vddot"] < 0 < ev["Tddot"]
    assert rep.checks["Hdot_formula"] and rep.checks["Hdot_nonpositive"]


def test_deterministic_rest_point():
    rep = sde.deterministic_energy_audit(pendulum(), (0.0, 0.0), 10.0, damping=0.3)
    assert rep.message == "no break events" and not rep.events
    np.testing.assert_array_equal(rep.H, 0.0)


def test_deterministic_conservative():
    rep = sde.deterministic_energy_audit(pendulum(), (2.5, 0.0), 100.0, damping=0.0)
    assert rep.checks["conservative"] and rep.checks["Hdot_formula"]
    assert np.ptp(rep.H) < 1e-8


def test_nonfinite_particles_are_excluded():
    model = pendulum()
    ens = sde.Ensemble([[0.1], [0.2], [0.3]], [[0.0], [np.inf], [0.1]], 0.0, seed=0)
    nxt = sde.em_step(model, ens, 0.01)
    assert nxt.excluded == 1 and nxt.active.tolist() == [True, False, True]
    after = sde.em_step(model, nxt, 0.01)
    assert after.excluded == 1 and np.all(np.isfinite(after.q[after.active]))
    with pytest.raises(ConfigError):
        sde.em_step(model, ens, 0.0)


@given(q=st.floats(-20, 20), p=st.floats(-5, 5), k=st.integers(-3, 3))
@settings(max_examples=50, deadline=None)
def test_circle_wrap_leaves_drifts_invariant(q, p, k):
    model = variable_mass_pendulum(mu=0.4)
    a = sde.drift_terms(model, np.array([[q]]), np.array([[p]]))
    b = sde.drift_terms(model, np.array([[q + 2 * np.pi * k]]), np.array([[p]]))
    for key in ("u", "dqH", "Fu"):
        np.testing.assert_allclose(a[key], b[key], rtol=1e-9, atol=1e-9)
