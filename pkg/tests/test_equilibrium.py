import numpy as np
import pytest
from scipy import integrate
from scipy.special import iv

from langevin_lab import equilibrium as E
from langevin_lab.errors import NonUniqueMinimumError
from langevin_lab.grid import make_grid
from langevin_lab.model import harmonic, pendulum, variable_mass_pendulum

from conftest import custom_1d_model


def test_harmonic_partition_function():
    for mass in (1.0, 2.5):
        Z = E.partition_function(harmonic(mass=mass))
        assert Z == pytest.approx(2 * np.pi * np.sqrt(mass), rel=1e-8)


def test_pendulum_partition_function():
    Z = E.partition_function(pendulum())
    # series value of I0(1) through scipy, and an adaptive quadrature oracle
    series = np.sqrt(2 * np.pi) * 2 * np.pi * np.exp(-1.0) * iv(0, 1.0)
    quad = np.sqrt(2 * np.pi) * integrate.quad(lambda q: np.exp(-(1 - np.cos(q))), 0, 2 * np.pi,
                                               epsabs=0, epsrel=1e-13)[0]
    assert Z == pytest.approx(series, rel=1e-10)
    assert Z == pytest.approx(quad, rel=1e-10)


def test_temperature_prefactor_ratio():
    pend = pendulum()
    Z1, Z2 = E.partition_function(pend), E.partition_function(pend.with_beta(2.0))
    conf = lambda b: integrate.quad(lambda q: np.exp(-b * (1 - np.cos(q))), 0, 2 * np.pi, epsrel=1e-13)[0]
    assert Z1 / Z2 == pytest.approx(np.sqrt(1.0 / 0.5) * conf(1.0) / conf(2.0), rel=1e-9)


def test_build_equilibrium_harmonic():
    model = harmonic()
    grid = make_grid(model, 128, 96)
    eq = E.build_equilibrium(model, grid)
    std = np.exp(-0.5 * grid.q**2) / np.sqrt(2 * np.pi)
    np.testing.assert_allclose(eq.g_star, std, atol=1e-10)
    hp = np.exp(-0.5 * grid.p**2) / np.sqrt(2 * np.pi)
    np.testing.assert_allclose(eq.h_star[10], hp, atol=1e-10)
    assert np.sum(eq.f_star) * grid.cell == pytest.approx(1.0, abs=1e-10)


def test_h_star_even_and_moments():
    model = variable_mass_pendulum()
    grid = make_grid(model, 64, 96)
    eq = E.build_equilibrium(model, grid)
    np.testing.assert_array_equal(eq.h_star, eq.h_star[:, ::-1])
    for i in (0, 17, 40):
        mom = E.conditional_equilibrium_moments(model, eq, i)
        assert abs(mom["mean"]) < 1e-14
        assert mom["cov"] == pytest.approx(mom["expected_cov"], rel=1e-8)
    h = harmonic()
    gh = make_grid(h, 64, 64)
    mom = E.conditional_equilibrium_moments(h, E.build_equilibrium(h, gh), 5)
    assert mom["cov"] == pytest.approx(1.0, rel=1e-8)


def test_pdf_maxima():
    assert E.position_pdf_maxima(pendulum()) == pytest.approx([0.0], abs=1e-9)
    vm = variable_mass_pendulum(m0=1.0, mu=0.5, v0=1.0, beta=1.0)
    # brute-force oracle: dense scan of V - (T/2) ln M
    q = np.linspace(0, 2 * np.pi, 100_001)
    w = (1 - np.cos(q)) - 0.5 * np.log(1 + 0.5 * np.cos(q))
    (qmax,) = E.position_pdf_maxima(vm)
    assert qmax == pytest.approx(q[np.argmin(w)], abs=2 * (q[1] - q[0]))
    # low temperature: the density maximum converges to the potential minimum
    cold = variable_mass_pendulum(beta=100.0)
    grid = make_grid(cold, 256, 64)
    eq = E.build_equilibrium(cold, grid)
    qa = grid.q[np.argmax(eq.g_star)]
    assert min(abs(qa), abs(qa - 2 * np.pi)) <= grid.dq


def test_laplace():
    lap = E.laplace_partition(harmonic())
    assert lap.ratio == pytest.approx(1.0, abs=1e-8)
    lap = E.laplace_partition(pendulum(beta=10.0))
    assert 0.9 <= lap.ratio <= 1.1
    assert lap.q_star == pytest.approx(0.0, abs=1e-12) and lap.K == pytest.approx(1.0)
    devs = [abs(E.laplace_partition(pendulum(beta=b)).ratio - 1) for b in (10, 20, 40)]
    assert devs[0] > devs[1] > devs[2]


def test_laplace_needs_unique_minimum():
    flat = custom_1d_model(lambda q: 1 - np.cos(2 * q), lambda q: 2 * np.sin(2 * q),
                           lambda q: 4 * np.cos(2 * q), np.ones_like, np.zeros_like)
    with pytest.raises(NonUniqueMinimumError):
        E.laplace_partition(flat)


def test_free_energy_minimum():
    model = pendulum()
    grid = make_grid(model, 128, 128)
    eq = E.build_equilibrium(model, grid)
    Fmin = E.min_free_energy(model, eq.Z)
    assert E.free_energy(model, eq.f_star, grid) == pytest.approx(Fmin, abs=1e-8)
    g0 = eq.g_star * (1 + 0.3 * np.cos(grid.q))
    g0 /= g0.sum() * grid.dq
    assert E.free_energy(model, g0[:, None] * eq.h_star, grid) > Fmin
