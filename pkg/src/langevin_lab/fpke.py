"""Fokker-Planck-Kolmogorov evolution of the joint density on a phase grid.

The adjoint generator is assembled in conservative form. Face fluxes are
arithmetic averages of neighbouring nodal fluxes, so interior stencils are
second-order central differences, and fluxes through the outer faces of
non-periodic axes are zero. Column sums of the assembled matrix vanish,
which gives exact discrete mass conservation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .equilibrium import EquilibriumState, build_equilibrium, log_h_star, log_position_weight
from .errors import DiscretizationDefectError, GridError, ModelError, StabilityError
from .grid import (DensityField, PhaseGrid, conditional_mean, conditional_pdf, integrate, integrate_p,
                   make_grid, marginalize_position, normalize, parity_split, spatial_derivative)
from .model import TWO_PI, ModelSpec, profiles_1d

log = logging.getLogger(__name__)

CFL_SAFETY = 0.4
NEGATIVITY_ABORT = 1e-10
BOUNDARY_MASS_WARN = 1e-8


@dataclass(frozen=True)
class PhaseCoefficients:
    """Nodal coefficient fields of the Langevin drift on a grid."""

    u: np.ndarray         # dH/dp = p / M
    dqH: np.ndarray       # dH/dq including the centrifugal term
    F: np.ndarray         # damping per q-row
    D: np.ndarray         # diffusion per q-row
    M: np.ndarray         # mass per q-row

    @property
    def drift_p(self) -> np.ndarray:
        """Momentum drift magnitude a with dp/dt = -a + noise."""
        return self.dqH + self.F[:, None] * self.u


def coefficients(model: ModelSpec, grid: PhaseGrid, damping: np.ndarray | float | None = None
                 ) -> PhaseCoefficients:
    prof = profiles_1d(model, grid.q)
    M, dM = prof["M"][:, None], prof["dM"][:, None]
    p = grid.p[None, :]
    u = p / M
    dqH = prof["dV"][:, None] - 0.5 * p**2 * dM / M**2
    F = prof["F"] if damping is None else np.broadcast_to(np.asarray(damping, float), grid.q.shape).copy()
    return PhaseCoefficients(u, dqH, F, prof["D"], prof["M"])


def _flux_difference(n: int, periodic: bool) -> sp.csr_matrix:
    """Matrix C with (C v)_k = flux_{k+1/2} - flux_{k-1/2}, flux = face average of v."""
    main = np.zeros(n)
    upper = np.full(n - 1, 0.5)
    lower = np.full(n - 1, -0.5)
    C = sp.diags([lower, main, upper], [-1, 0, 1], shape=(n, n), format="lil")
    if periodic:
        C[0, n - 1] = -0.5
        C[n - 1, 0] = 0.5
    else:
        C[0, 0] = 0.5
        C[n - 1, n - 1] = -0.5
    return C.tocsr()


def _neumann_laplacian(n: int) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    return sp.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1], format="csr")


def build_adjoint_operator(model: ModelSpec, grid: PhaseGrid, damping=None) -> sp.csr_matrix:
    """Sparse matrix of the density generator acting on row-major (q, p) fields.

    ``damping`` overrides the Einstein damping; it is meant only for
    diagnostics of the damping/diffusion balance.
    """
    nq, npn = grid.shape
    c = coefficients(model, grid, damping)
    Iq, Ip = sp.identity(nq, format="csr"), sp.identity(npn, format="csr")
    Cq = sp.kron(_flux_difference(nq, grid.periodic), Ip, format="csr")
    Cp = sp.kron(Iq, _flux_difference(npn, False), format="csr")
    Lp = sp.kron(Iq, _neumann_laplacian(npn), format="csr")
    u = sp.diags(c.u.ravel())
    a = sp.diags(c.drift_p.ravel())
    half_d = sp.diags(np.repeat(0.5 * c.D, npn))
    op = -(Cq @ u) / grid.dq + (Cp @ a) / grid.dp + (half_d @ Lp) / grid.dp**2
    return op.tocsr()


def apply_adjoint(model: ModelSpec, f: DensityField | np.ndarray, grid: PhaseGrid | None = None,
                  damping=None) -> np.ndarray:
    if isinstance(f, DensityField):
        grid, values = f.grid, f.values
    else:
        values = np.asarray(f, float)
    op = build_adjoint_operator(model, grid, damping)
    return (op @ values.ravel()).reshape(grid.shape)


def apply_adjoint_expanded(model: ModelSpec, f: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    """Non-conservative evaluation {H,f} + u F f_p + (F/M) f + D f_pp / 2 (cross-check)."""
    c = coefficients(model, grid)
    fq = spatial_derivative(f, grid, "q", 1)
    fp = spatial_derivative(f, grid, "p", 1)
    fpp = spatial_derivative(f, grid, "p", 2)
    bracket = c.dqH * fp - c.u * fq
    return (bracket + c.F[:, None] * c.u * fp + (c.F / c.M)[:, None] * f
            + 0.5 * c.D[:, None] * fpp)


def apply_generator(model: ModelSpec, phi: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    """Backward generator u phi_q - (dH/dq + F u) phi_p + D phi_pp / 2."""
    c = coefficients(model, grid)
    phi_q = spatial_derivative(phi, grid, "q", 1)
    phi_p = spatial_derivative(phi, grid, "p", 1)
    phi_pp = spatial_derivative(phi, grid, "p", 2)
    return c.u * phi_q - c.drift_p * phi_p + 0.5 * c.D[:, None] * phi_pp


def cfl_dt(model: ModelSpec, grid: PhaseGrid, safety: float = CFL_SAFETY) -> float:
    c = coefficients(model, grid)
    bounds = [safety * grid.dp**2 / float(np.max(c.D))]
    umax = float(np.max(np.abs(c.u)))
    amax = float(np.max(np.abs(c.drift_p)))
    if umax > 0:
        bounds.append(safety * grid.dq / umax)
    if amax > 0:
        bounds.append(safety * grid.dp / amax)
    return min(bounds)


def stationarity_residual(model: ModelSpec, sizes: Sequence[tuple[int, int]] = ((64, 64), (128, 128)),
                          damping_scale: float = 1.0, p_max: float | None = None,
                          check_order: bool | None = None) -> dict:
    """Norms of the generator applied to f* on successive grids, plus the
    observed refinement order between the last two grids."""
    rows = []
    for nq, npn in sizes:
        grid = make_grid(model, nq, npn, p_max)
        eq = build_equilibrium(model, grid)
        damping = None
        if damping_scale != 1.0:
            damping = damping_scale * profiles_1d(model, grid.q)["F"]
        r = apply_adjoint(model, eq.f_star, grid, damping)
        rows.append({"nq": nq, "np": npn, "max_abs": float(np.max(np.abs(r))),
                     "l2": float(np.sqrt(np.sum(r**2) * grid.cell))})
    order = ratio = None
    if len(rows) >= 2:
        (a, b) = rows[-2:]
        h_ratio = sizes[-1][0] / sizes[-2][0]
        ratio = a["max_abs"] / b["max_abs"] if b["max_abs"] > 0 else np.inf
        order = float(np.log(ratio) / np.log(h_ratio))
    if check_order is None:
        check_order = damping_scale == 1.0
    if check_order and order is not None and order < 1.5:
        raise DiscretizationDefectError(f"stationarity residual refinement order {order:.2f} < 1.5")
    return {"levels": rows, "max_abs": rows[-1]["max_abs"], "l2": rows[-1]["l2"],
            "ratio": ratio, "order_estimate": order}


# ------------------------------------------------------------ initial data

def _g0_profile(model: ModelSpec, grid: PhaseGrid, eq: EquilibriumState, spec: dict) -> np.ndarray:
    tilt = float(spec.get("tilt", 0.0))
    mode = int(spec.get("mode", 1))
    profile = spec.get("profile", "cos")
    shift = float(spec.get("shift", 0.0))
    q = grid.q
    if profile == "shift":
        # equilibrium position law translated by `shift`
        base = np.exp(log_position_weight(model, q - shift))
        s = np.zeros_like(q)
    else:
        base = eq.g_star
        funcs = {"cos": np.cos, "sin": np.sin, "tanh": np.tanh}
        if profile not in funcs:
            raise ModelError(f"unknown tilt profile {profile!r}")
        s = funcs[profile](mode * q)
    if abs(tilt) * np.max(np.abs(s)) > 0.5 + 1e-12:
        raise ModelError("tilt amplitude too large: |a| max|s| must not exceed 0.5")
    g0 = base * (1.0 + tilt * s)
    return g0 / (np.sum(g0) * grid.dq)


def initial_condition(model: ModelSpec, grid: PhaseGrid, eq: EquilibriumState, spec: dict | None
                      ) -> np.ndarray:
    """Normalised initial density from a small declarative spec.

    kinds: ``equilibrium``; ``product`` (g0 h*); ``shifted`` (g0 h*(p - a | q));
    ``gaussian`` (bivariate normal with ``mean`` and ``cov``); ``mixture``
    ((1 - w) f* + w f* shifted in momentum by ``a``).
    """
    spec = dict(spec or {"kind": "equilibrium"})
    kind = spec.get("kind", "equilibrium")
    Q, P = grid.mesh()
    if kind == "equilibrium":
        f = eq.f_star.copy()
    elif kind in ("product", "shifted"):
        g0 = _g0_profile(model, grid, eq, spec.get("g0", spec))
        h = eq.h_star
        a = float(spec.get("a", 0.0)) if kind == "shifted" else 0.0
        if a:
            lh = log_h_star(model, grid.q, grid.p - a)
            h = np.exp(lh)
            h /= h.sum(axis=1, keepdims=True) * grid.dp
        f = g0[:, None] * h
    elif kind == "gaussian":
        mean = np.asarray(spec.get("mean", [0.0, 0.0]), float)
        cov = np.asarray(spec.get("cov", [[1.0, 0.0], [0.0, 1.0]]), float)
        prec = np.linalg.inv(cov)
        # on a circle the law of the wrapped coordinate: sum over periodic images
        images = range(-3, 4) if grid.periodic else (0,)
        f = np.zeros_like(Q)
        for k in images:
            X = np.stack([Q + k * TWO_PI - mean[0], P - mean[1]], axis=-1)
            f += np.exp(-0.5 * np.einsum("...i,ij,...j->...", X, prec, X))
    elif kind == "mixture":
        w = float(spec.get("weight", 0.5))
        a = float(spec.get("a", 0.5))
        lh = log_h_star(model, grid.q, grid.p - a)
        hs = np.exp(lh)
        hs /= hs.sum(axis=1, keepdims=True) * grid.dp
        f = (1 - w) * eq.f_star + w * eq.g_star[:, None] * hs
    else:
        raise ModelError(f"unknown initial condition kind {kind!r}")
    return normalize(f, grid)


# --------------------------------------------------------------- evolution

@dataclass
class EvolutionRun:
    f0: DensityField
    dt: float
    n_steps: int
    snapshot_every: int = 1
    negativity_abort: float = NEGATIVITY_ABORT


@dataclass
class EvolutionResult:
    snapshots: list[DensityField]
    diagnostics: np.ndarray  # columns t, mass, min_f, boundary_mass
    dt: float
    warnings: list[str] = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])


def boundary_mass(f: np.ndarray, grid: PhaseGrid) -> float:
    mask = np.zeros(grid.shape, bool)
    mask[:, 0] = mask[:, -1] = True
    if not grid.periodic:
        mask[0, :] = mask[-1, :] = True
    return float(np.sum(np.abs(f[mask])) * grid.cell)


def evolve(model: ModelSpec, run: EvolutionRun,
           observers: Iterable[Callable[[DensityField], None]] = ()) -> EvolutionResult:
    """Classical RK4 method-of-lines integration of the density equation."""
    grid = run.f0.grid
    limit = cfl_dt(model, grid, safety=CFL_SAFETY)
    if run.dt > limit * (1 + 1e-12):
        raise StabilityError(f"dt={run.dt:.4g} exceeds the stability bound {limit:.4g}")
    op = build_adjoint_operator(model, grid)
    dt = run.dt
    y = run.f0.values.ravel().astype(float).copy()
    t0 = run.f0.t
    observers = list(observers)
    snaps: list[DensityField] = []
    diags = []
    warned = []

    def record(step, vec):
        t = t0 + step * dt
        vals = vec.reshape(grid.shape)
        bm = boundary_mass(vals, grid)
        diags.append((t, float(np.sum(vec) * grid.cell), float(vec.min()), bm))
        if bm > BOUNDARY_MASS_WARN and not warned:
            msg = f"boundary-cell mass {bm:.2e} exceeds {BOUNDARY_MASS_WARN:g} at t={t:.4g}"
            log.warning(msg)
            warned.append(msg)
        if step % run.snapshot_every == 0 or step == run.n_steps:
            snap = DensityField(vals.copy(), grid, t)
            snaps.append(snap)
            for obs in observers:
                obs(snap)

    record(0, y)
    for step in range(1, run.n_steps + 1):
        k1 = op @ y
        k2 = op @ (y + 0.5 * dt * k1)
        k3 = op @ (y + 0.5 * dt * k2)
        k4 = op @ (y + dt * k3)
        y_new = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        vmax = float(np.max(np.abs(y_new)))
        if not np.all(np.isfinite(y_new)) or y_new.min() < -run.negativity_abort * vmax:
            last = DensityField(y.reshape(grid.shape).copy(), grid, t0 + (step - 1) * dt)
            raise StabilityError(f"negativity or blow-up at step {step} (min f = {y_new.min():.3e})", last)
        y = y_new
        record(step, y)
    return EvolutionResult(snaps, np.array(diags), dt, warned)


# ---------------------------------------------------- marginal/conditional PDEs

def position_flux(f: np.ndarray, model: ModelSpec, grid: PhaseGrid) -> np.ndarray:
    """g M^{-1} gamma = integral of (p / M) f over momentum."""
    c = coefficients(model, grid)
    return integrate_p(c.u * f, grid)


def flux_divergence_q(J: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    """Conservative central divergence consistent with the assembled operator."""
    C = _flux_difference(grid.q.size, grid.periodic)
    return (C @ J) / grid.dq


def position_pde_residual(f_before: DensityField, f_after: DensityField, dt: float, model: ModelSpec) -> dict:
    """(g_after - g_before)/dt + div_q(g M^{-1} gamma) evaluated at the midpoint state."""
    grid = f_before.grid
    gb = integrate_p(f_before.values, grid)
    ga = integrate_p(f_after.values, grid)
    mid = 0.5 * (f_before.values + f_after.values)
    r = (ga - gb) / dt + flux_divergence_q(position_flux(mid, model, grid), grid)
    return {"residual": r, "max_abs": float(np.max(np.abs(r))),
            "l2": float(np.sqrt(np.sum(r**2) * grid.dq)),
            "dg_dt_max": float(np.max(np.abs((ga - gb) / dt)))}


def conditional_rhs(model: ModelSpec, f: DensityField) -> dict:
    """Right-hand side of the conditional momentum equation, directly and in
    the even/odd block form, at state ``f``."""
    grid = f.grid
    c = coefficients(model, grid)
    g = marginalize_position(f)
    h = conditional_pdf(f, g)
    gm = conditional_mean(h)
    dlng = spatial_derivative(np.log(g.values), grid, "q", 1)
    div_gamma = spatial_derivative(gm.gamma / c.M, grid, "q", 1)
    F, D, M = c.F[:, None], c.D[:, None], c.M[:, None]

    def transport(phi):
        # {H, phi} = dH/dq phi_p - dH/dp phi_q
        return c.dqH * spatial_derivative(phi, grid, "p", 1) - c.u * spatial_derivative(phi, grid, "q", 1)

    def A_op(phi):
        coef = (c.F / c.M + gm.gamma / c.M * dlng + div_gamma)[:, None]
        return (coef * phi + F * c.u * spatial_derivative(phi, grid, "p", 1)
                + 0.5 * D * spatial_derivative(phi, grid, "p", 2))

    def B_op(phi):
        return transport(phi) - c.u * dlng[:, None] * phi

    hv = h.values
    direct = (transport(hv) + F * c.u * spatial_derivative(hv, grid, "p", 1)
              + 0.5 * D * spatial_derivative(hv, grid, "p", 2)
              + (F / M - gm.varpi / M * dlng[:, None] + div_gamma[:, None]) * hv)
    hp, hm = parity_split(h)
    even = A_op(hp.values) + B_op(hm.values)
    odd = B_op(hp.values) + A_op(hm.values)
    return {"direct": direct, "even": even, "odd": odd, "h": hv, "g": g.values, "gamma": gm.gamma}


def conditional_pde_residual(f_before: DensityField, f_after: DensityField, dt: float,
                             model: ModelSpec) -> dict:
    grid = f_before.grid
    hb = f_before.values / integrate_p(f_before.values, grid)[:, None]
    ha = f_after.values / integrate_p(f_after.values, grid)[:, None]
    mid = DensityField(0.5 * (f_before.values + f_after.values), grid, 0.5 * (f_before.t + f_after.t))
    rhs = conditional_rhs(model, mid)
    dh = (ha - hb) / dt
    r = dh - rhs["direct"]
    block_gap = rhs["even"] + rhs["odd"] - rhs["direct"]
    scale = max(float(np.max(np.abs(rhs["direct"]))), 1e-300)
    return {"residual": r, "dh_dt": dh, "rhs": rhs["direct"],
            "max_abs": float(np.max(np.abs(r))),
            "block_form_gap": float(np.max(np.abs(block_gap)) / scale)}
