import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langevin_lab import grid as gr
from langevin_lab.equilibrium import build_equilibrium, log_h_star
from langevin_lab.errors import GridError, PositivityError
from langevin_lab.model import harmonic, pendulum


@pytest.fixture(scope="module")
def pend_setup():
    model = pendulum()
    grid = gr.make_grid(model, 64, 64)
    return model, grid, build_equilibrium(model, grid)


def shifted_h(model, grid, a):
    h = np.exp(log_h_star(model, grid.q, grid.p - a))
    return h / (h.sum(axis=1, keepdims=True) * grid.dp)


def test_grid_layout():
    g = gr.make_grid(pendulum(), 32, 40)
    assert g.periodic and g.shape == (32, 40)
    assert g.q[0] == 0.0 and g.dq == pytest.approx(2 * np.pi / 32)
    np.testing.assert_array_equal(g.p, -g.p[::-1])
    h = gr.make_grid(harmonic(), 32, 32)
    assert not h.periodic and h.q[0] > h.q_bounds[0]


def test_grid_rejects_bad_sizes():
    with pytest.raises(GridError):
        gr.make_grid(pendulum(), 8, 64)
    with pytest.raises(GridError):
        gr.make_grid(pendulum(), 64, 64, p_max=2.0)
    with pytest.raises(GridError):
        gr.make_grid(harmonic(n=2), 32, 32)


def test_marginal_examples(pend_setup):
    model, grid, eq = pend_setup
    g0 = eq.g_star * (1 + 0.2 * np.cos(grid.q))
    g0 /= g0.sum() * grid.dq
    f = gr.DensityField(g0[:, None] * eq.h_star, grid)
    np.testing.assert_allclose(gr.marginalize_position(f).values, g0, atol=1e-10)
    np.testing.assert_allclose(gr.marginalize_position(eq.density()).values, eq.g_star, atol=1e-12)
    mix = 0.5 * eq.g_star[:, None] * shifted_h(model, grid, 0.7) + 0.5 * eq.f_star
    np.testing.assert_allclose(gr.marginalize_position(gr.DensityField(mix, grid)).values, eq.g_star,
                               atol=1e-12)


def test_conditional_examples(pend_setup):
    model, grid, eq = pend_setup
    h = gr.conditional_pdf(eq.density(), gr.marginalize_position(eq.density()))
    np.testing.assert_allclose(h.values, eq.h_star, rtol=1e-12)
    g0 = eq.g_star * (1 + 0.3 * np.sin(grid.q))
    f = gr.DensityField(g0[:, None] * eq.h_star, grid)
    np.testing.assert_allclose(gr.conditional_pdf(f, gr.marginalize_position(f)).values, eq.h_star,
                               rtol=1e-12)
    h1, h2 = shifted_h(model, grid, 0.5), shifted_h(model, grid, -1.0)
    fm = gr.DensityField(eq.g_star[:, None] * (0.5 * h1 + 0.5 * h2), grid)
    hm = gr.conditional_pdf(fm, gr.marginalize_position(fm))
    np.testing.assert_allclose(hm.values, 0.5 * h1 + 0.5 * h2, rtol=1e-12)


def test_conditional_pdf_floor(pend_setup):
    model, grid, eq = pend_setup
    f = eq.f_star.copy()
    f[3] = 0.0
    field = gr.DensityField(f, grid)
    with pytest.raises(PositivityError) as err:
        gr.conditional_pdf(field, gr.marginalize_position(field))
    assert 3 in err.value.nodes


def test_conditional_mean_and_parity(pend_setup):
    model, grid, eq = pend_setup
    hstar = gr.ConditionalField(eq.h_star, grid)
    np.testing.assert_allclose(gr.conditional_mean(hstar).gamma, 0.0, atol=1e-14)
    hs = gr.ConditionalField(shifted_h(model, grid, 0.5), grid)
    np.testing.assert_allclose(gr.conditional_mean(hs).gamma, 0.5, atol=1e-10)
    sym = gr.ConditionalField(0.5 * shifted_h(model, grid, 0.5) + 0.5 * shifted_h(model, grid, -0.5), grid)
    np.testing.assert_allclose(gr.conditional_mean(sym).gamma, 0.0, atol=1e-13)
    plus, minus = gr.parity_split(hstar)
    np.testing.assert_allclose(minus.values, 0.0, atol=1e-15)
    np.testing.assert_allclose(plus.values, eq.h_star, rtol=1e-14)
    plus, minus = gr.parity_split(hs)
    np.testing.assert_allclose(plus.values.sum(axis=1) * grid.dp, 1.0, atol=1e-12)
    gamma_odd = gr.integrate_p(minus.values * grid.p, grid)
    np.testing.assert_allclose(gamma_odd, 0.5, atol=1e-10)


def test_momentum_marginals(pend_setup):
    model, grid, eq = pend_setup
    out = gr.momentum_marginals(eq.density(), gr.MarginalField(eq.g_star, grid), eq.h_star)
    np.testing.assert_allclose(out["rho"], out["rho_hat"], atol=1e-14)
    g0 = eq.g_star * (1 + 0.4 * np.cos(grid.q))
    g0 /= g0.sum() * grid.dq
    f = gr.DensityField(g0[:, None] * eq.h_star, grid)
    out = gr.momentum_marginals(f, gr.MarginalField(g0, grid), eq.h_star)
    np.testing.assert_allclose(out["rho"], out["rho_hat"], atol=1e-14)
    fs = gr.DensityField(eq.g_star[:, None] * shifted_h(model, grid, 0.4), grid)
    out = gr.momentum_marginals(fs, gr.MarginalField(eq.g_star, grid), eq.h_star)
    l1 = np.sum(np.abs(out["rho"] - out["rho_hat"])) * grid.dp
    assert 0 < l1 <= np.sqrt(2 * 0.08)


def test_spatial_derivative_examples():
    grid = gr.make_grid(pendulum(), 64, 64)
    Q, P = grid.mesh()
    np.testing.assert_allclose(gr.spatial_derivative(np.ones_like(Q), grid, "q", 1), 0.0, atol=1e-14)
    np.testing.assert_allclose(gr.spatial_derivative(P, grid, "p", 1), 1.0, rtol=1e-12)
    errs = []
    for n in (64, 128):
        g = gr.make_grid(pendulum(), n, 32)
        errs.append(np.max(np.abs(gr.spatial_derivative(np.sin(g.q), g, "q", 1) - np.cos(g.q))))
    assert errs[0] < 1e-3 * 2  # central differences: error is sin(h)/h - 1 ~ h^2/6
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.02)
    with pytest.raises(GridError):
        gr.spatial_derivative(np.sin(grid.q), grid, "x", 1)


def test_field_dump_roundtrip(tmp_path, pend_setup):
    model, grid, eq = pend_setup
    for fmt in ("binary", "csv"):
        path = gr.dump_field(tmp_path / f"f.{fmt}", eq.f_star, grid, "f_star", 1.5, fmt=fmt)
        arr, meta = gr.load_field(path)
        np.testing.assert_array_equal(arr, eq.f_star)
        assert meta["timestamp"] == 1.5 and meta["grid"] == grid.spec()


@given(st.lists(st.floats(0.05, 3.0), min_size=3, max_size=3))
@settings(max_examples=30, deadline=None)
def test_factorisation_roundtrip(coefs):
    grid = gr.make_grid(pendulum(), 32, 32)
    Q, P = grid.mesh()
    f = np.exp(-coefs[0] * (1 - np.cos(Q)) - coefs[1] * (P - 0.3 * np.sin(Q)) ** 2 - coefs[2] * P**4 / 10)
    f = gr.normalize(f, grid)
    field = gr.DensityField(f, grid)
    g = gr.marginalize_position(field)
    h = gr.conditional_pdf(field, g)
    np.testing.assert_allclose(h.values * g.values[:, None], f, rtol=1e-12)
    np.testing.assert_allclose(h.norm_audit, 0.0, atol=1e-12)
