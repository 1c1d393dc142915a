import numpy as np
import pytest

from langevin_lab import spectral as S
from langevin_lab.equilibrium import build_equilibrium
from langevin_lab.errors import GridError
from langevin_lab.grid import DensityField, make_grid
from langevin_lab.model import harmonic, pendulum


@pytest.fixture(scope="module")
def pend_ops():
    model = pendulum()
    ops, eq = S.default_spectral_setup(model)
    return model, ops, eq


@pytest.fixture(scope="module")
def harm_ops():
    model = harmonic()
    ops, eq = S.default_spectral_setup(model)
    return model, ops, eq


def test_null_actions(pend_ops):
    model, ops, eq = pend_ops
    g = ops.grid
    P = g.mesh()[1]
    # even-in-p fields carry no momentum flux into position space
    for even in (np.ones(g.shape), P**2, np.cos(g.q)[:, None] * np.abs(P)):
        assert np.max(np.abs(ops.Xi @ even.ravel())) < 1e-12
    assert np.max(np.abs(ops.Phi @ np.ones(g.q.size))) < 1e-12
    assert np.max(np.abs(ops.Phi_indep @ np.ones(g.q.size))) == 0.0


def test_phi_constant_harmonic_interior(harm_ops):
    model, ops, eq = harm_ops
    nq, np_ = ops.grid.shape
    ph = (ops.Phi @ np.ones(nq)).reshape(nq, np_)
    # the skew zero extension of the line leaves a defect only in the boundary rows
    assert np.max(np.abs(ph[1:-1])) < 1e-12


def test_xi_of_momentum_converges():
    model = harmonic()
    errs = []
    for nq in (16, 32, 64):
        ops, eq = S.default_spectral_setup(model, nq, 32)
        g = ops.grid
        P = g.mesh()[1].ravel()
        x = ops.Xi @ P
        # Xi p = -(1/g*) d/dq (g* T) = V'(q) = q for the unit harmonic model
        errs.append(np.sqrt(np.sum(ops.w_g * (x - g.q) ** 2) / np.sum(ops.w_g * g.q**2)))
        np.testing.assert_allclose(x, ops.Xi_formula @ P, atol=1e-12)
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.1)


def test_xi_of_momentum_absolute_tolerance():
    # a 1e-6 match to the continuum is beyond a second-order stencil on a grid under the matrix cap
    ops, eq = S.default_spectral_setup(harmonic(), 64, 32)
    x = ops.Xi @ ops.grid.mesh()[1].ravel()
    err = np.sqrt(np.sum(ops.w_g * (x - ops.grid.q) ** 2) / np.sum(ops.w_g * ops.grid.q**2))
    assert err < 1e-6, f"second-order truncation error {err:.2e} at the largest admissible grid"


def test_adjointness_audit(pend_ops):
    model, ops, eq = pend_ops
    a = S.adjointness_audit(ops)
    assert a["adjoint_defect_exact"] < 1e-12
    assert a["adjoint_defect_independent"] < 5e-3
    assert a["xi_formula_defect"] < 1e-10
    assert a["form_nonpositive"] and a["form_identity_max"] < 1e-10
    assert a["projector_commutation"] < 1e-12


def test_null_space_form(pend_ops):
    model, ops, eq = pend_ops
    even = (ops.grid.mesh()[1] ** 2).ravel()
    Xe = ops.Xi @ even
    assert abs(np.sum(ops.w_f * (ops.Phi @ Xe) * even)) < 1e-20


def test_spectrum_pendulum(pend_ops):
    model, ops, eq = pend_ops
    rep = S.spectrum(ops, model)
    s = rep.summary()
    assert s["n_unstable"] == 0 and s["max_real_over_rho"] < 1e-10
    assert s["max_pair_rel_distance_10"] < 1e-3
    assert s["quad_residual_max"] < 1e-6
    assert s["psi_zero_max_real_over_rho"] < 1e-6
    assert s["psi_zero_sv_mismatch_over_rho"] < 1e-6
    rows = S.spectrum_rows(rep)
    assert {r[2] for r in rows} == {"lambda", "density", "flux_form"}
    lam_rows = [r for r in rows if r[2] == "lambda"]
    assert [r[0] for r in lam_rows] == sorted((r[0] for r in lam_rows), reverse=True)


def test_spectrum_harmonic(harm_ops):
    model, ops, eq = harm_ops
    rep = S.spectrum(ops, model)
    assert rep.n_unstable == 0
    assert rep.slowest_pair_error(10) < 1e-3
    assert rep.psi_zero_sv_mismatch < 1e-6
    # slowest nonzero mode of the damped oscillator (T = K = M = 1, gamma = 1/2) is -1/4 +- i sqrt(15)/4
    slow = S._slowest(rep.eig_lambda, rep.rho, 2)
    assert np.all(slow.real < 0)
    assert slow[0].real == pytest.approx(-0.25, abs=0.03)
    assert abs(slow[0].imag) == pytest.approx(np.sqrt(15) / 4, rel=0.03)


def test_matrix_cap():
    with pytest.raises(GridError):
        S.default_spectral_setup(pendulum(), 64, 64)


def test_quadratic_approximation():
    model = pendulum()
    grid = make_grid(model, 128, 128)
    eq = build_equilibrium(model, grid)
    zero = S.quadratic_entropy_approx(eq.density(), eq)
    for key in ("Q_G", "Q_H", "Q_F", "res_G", "res_H", "res_F"):
        assert abs(zero[key]) < 1e-14
    sc = S.quadratic_scaling(model, eq, 0.1)
    for key in ("res_G", "res_H", "res_F"):
        assert 6.0 <= sc[key][2] <= 10.0


def test_quadratic_harmonic_mean_shift():
    model = harmonic()
    grid = make_grid(model, 128, 128)
    eq = build_equilibrium(model, grid)
    a = 0.1
    g = np.exp(-0.5 * (grid.q - a) ** 2)
    g /= g.sum() * grid.dq
    out = S.quadratic_entropy_approx(DensityField(g[:, None] * eq.h_star, grid), eq)
    # G = a^2 / 2 exactly; the quadratic form of xi = a q - a^2/2 differs only at third order
    assert out["G"] == pytest.approx(a * a / 2, abs=1e-10)
    assert abs(out["res_F"]) < 2e-4 and abs(out["res_G"]) < 2e-4
