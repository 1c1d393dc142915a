"""Relative entropies of the joint, position and conditional momentum laws,
their time derivatives and the analysis of entropy dissipation breaks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .equilibrium import EquilibriumState
from .errors import PositivityError, QuadratureDefectError, WindowTooWideError
from .fpke import EvolutionRun, cfl_dt, conditional_rhs, evolve, _g0_profile
from .grid import (DensityField, PhaseGrid, integrate, integrate_p, integrate_q, positivity_floor,
                   spatial_derivative)
from .model import ModelSpec, profiles_1d

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-300
FLOORED_FRACTION_LIMIT = 1e-3
NEGATIVE_TOL = 1e-10
FIT_R2_MIN = 0.999


@dataclass
class LogRatioFields:
    theta: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    g: np.ndarray
    mask: np.ndarray          # True where f is usable (above the density floor)
    floored_f: int
    floored_g: int
    split_defect: float       # max |theta - xi - eta| on usable nodes


def log_ratio_fields(f: DensityField, eq: EquilibriumState, strict: bool = False) -> LogRatioFields:
    """theta = ln f/f*, xi = ln g/g*, eta = ln h/h*, all formed from logarithms."""
    grid = f.grid
    fv = f.values
    g = integrate_p(fv, grid)
    gfloor = positivity_floor(g)
    gbad = g <= gfloor
    mask = (fv > DENSITY_FLOOR) & ~gbad[:, None]
    n_floor_f = int(fv.size - np.count_nonzero(mask))
    frac = n_floor_f / fv.size
    if gbad.any() and strict:
        raise PositivityError("position density below floor", np.flatnonzero(gbad))
    if frac > FLOORED_FRACTION_LIMIT:
        msg = f"{frac:.2%} of phase nodes floored in log-ratio evaluation"
        if strict:
            raise PositivityError(msg)
        log.warning(msg)
    lf = np.log(np.where(mask, fv, 1.0))
    lg = np.log(np.where(gbad, gfloor, g))
    xi = lg - eq.log_g_star
    theta = np.where(mask, lf - eq.log_f_star, 0.0)
    eta = np.where(mask, lf - lg[:, None] - eq.log_h_star, 0.0)
    defect = float(np.max(np.abs(theta - xi[:, None] - eta)[mask])) if mask.any() else 0.0
    return LogRatioFields(theta, xi, eta, g, mask, n_floor_f, int(gbad.sum()), defect)


@dataclass
class EntropyReport:
    t: float
    F: float
    G: float
    H: float
    decomp_residual: float
    diss_rate: float
    Gdot: float
    tv_distance: float
    pinsker_f_bound: float
    g_l1: float
    pinsker_g_bound: float
    rho_l1: float
    pinsker_rho_bound: float
    floored_nodes: int = 0

    # CSV columns hold the slack (bound minus left-hand side) of each inequality
    @property
    def pinsker_f(self) -> float:
        return self.pinsker_f_bound - self.tv_distance

    @property
    def pinsker_g(self) -> float:
        return self.pinsker_g_bound - self.g_l1

    @property
    def pinsker_rho(self) -> float:
        return self.pinsker_rho_bound - self.rho_l1

    def csv_row(self) -> list[float]:
        return [self.t, self.F, self.G, self.H, self.decomp_residual, self.diss_rate,
                self.pinsker_f, self.pinsker_g, self.pinsker_rho]

    def pinsker_ok(self, tol: float = 1e-12) -> bool:
        return min(self.pinsker_f, self.pinsker_g, self.pinsker_rho) >= -tol

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(pinsker_f=self.pinsker_f, pinsker_g=self.pinsker_g, pinsker_rho=self.pinsker_rho)
        return d


ENTROPY_CSV_HEADER = ["t", "F", "G", "H", "decomp_residual", "diss_rate", "pinsker_f", "pinsker_g",
                      "pinsker_rho"]


def _masked_sum(values: np.ndarray, mask: np.ndarray) -> float:
    return float(np.sum(np.where(mask, values, 0.0)))


def dissipation_rate(f: DensityField, eq: EquilibriumState, model: ModelSpec,
                     fields: LogRatioFields | None = None) -> float:
    """-(1/2) E[ D (d eta / dp)^2 ]; never positive."""
    fields = fields or log_ratio_fields(f, eq)
    grid = f.grid
    deta = spatial_derivative(fields.eta, grid, "p", 1)
    D = profiles_1d(model, grid.q)["D"][:, None]
    usable = fields.mask.copy()
    # the p-stencil reaches one node either side: drop nodes next to floored ones
    usable[:, 1:] &= fields.mask[:, :-1]
    usable[:, :-1] &= fields.mask[:, 1:]
    val = -0.5 * _masked_sum(f.values * D * deta**2, usable) * grid.cell
    return min(val, 0.0)


def conditional_mean_field(f: DensityField) -> np.ndarray:
    g = integrate_p(f.values, f.grid)
    return integrate_p(f.values * f.grid.p[None, :], f.grid) / g


def position_entropy_derivatives(f: DensityField, eq: EquilibriumState, model: ModelSpec,
                                 deta_dt: np.ndarray | None = None,
                                 fields: LogRatioFields | None = None) -> dict:
    """First and second time derivatives of G from the closed-form
    expressions in xi, gamma and d eta / dt. When ``deta_dt`` is not given it
    is taken from the conditional momentum equation."""
    grid = f.grid
    fields = fields or log_ratio_fields(f, eq)
    prof = profiles_1d(model, grid.q)
    M = prof["M"]
    g = fields.g
    gamma = conditional_mean_field(f)
    dxi = spatial_derivative(fields.xi, grid, "q", 1)
    Gdot = float(np.sum(g * gamma / M * dxi) * grid.dq)
    if deta_dt is None:
        rhs = conditional_rhs(model, f)
        with np.errstate(divide="ignore", invalid="ignore"):
            deta_dt = np.where(fields.mask, rhs["direct"] / rhs["h"], 0.0)
    u = grid.p[None, :] / M[:, None]
    term1 = _masked_sum(f.values * dxi[:, None] * u * deta_dt, fields.mask) * grid.cell
    inner = spatial_derivative(eq.g_star * gamma / M, grid, "q", 1) / eq.g_star
    term2 = -float(np.sum(g * gamma / M * spatial_derivative(inner, grid, "q", 1)) * grid.dq)
    return {"Gdot": Gdot, "Gddot": term1 + term2, "Gddot_transport": term1, "Gddot_flux": term2}


def entropies(f: DensityField, eq: EquilibriumState, model: ModelSpec | None = None,
              fields: LogRatioFields | None = None) -> EntropyReport:
    """F, G, H by grid quadrature (0 ln 0 = 0), the F = G + H residual,
    the dissipation rate and the three Pinsker-type bound checks."""
    grid = f.grid
    fields = fields or log_ratio_fields(f, eq)
    fv = f.values
    cell = grid.cell
    F = _masked_sum(fv * fields.theta, fields.mask) * cell
    H = _masked_sum(fv * fields.eta, fields.mask) * cell
    G = float(np.sum(fields.g * fields.xi) * grid.dq)
    for name, val in (("F", F), ("G", G), ("H", H)):
        if val < -NEGATIVE_TOL:
            raise QuadratureDefectError(f"relative entropy {name} = {val:.3e} is negative")
    tv = 0.5 * float(np.sum(np.abs(fv - eq.f_star)) * cell)
    g_l1 = float(np.sum(np.abs(fields.g - eq.g_star)) * grid.dq)
    rho = integrate_q(fv, grid)
    rho_hat = integrate_q(fields.g[:, None] * eq.h_star, grid)
    rho_l1 = float(np.sum(np.abs(rho - rho_hat)) * grid.dp)
    diss = Gdot = float("nan")
    if model is not None:
        diss = dissipation_rate(f, eq, model, fields)
        gamma = conditional_mean_field(f)
        dxi = spatial_derivative(fields.xi, grid, "q", 1)
        Gdot = float(np.sum(fields.g * gamma / profiles_1d(model, grid.q)["M"] * dxi) * grid.dq)
    return EntropyReport(
        t=float(f.t), F=F, G=G, H=H, decomp_residual=F - G - H, diss_rate=diss, Gdot=Gdot,
        tv_distance=tv, pinsker_f_bound=float(np.sqrt(max(F, 0.0) / 2)),
        g_l1=g_l1, pinsker_g_bound=float(np.sqrt(2 * max(G, 0.0))),
        rho_l1=rho_l1, pinsker_rho_bound=float(np.sqrt(2 * max(H, 0.0))),
        floored_nodes=fields.floored_f,
    )


def entropy_trace(snapshots, eq: EquilibriumState, model: ModelSpec) -> list[EntropyReport]:
    return [entropies(s, eq, model) for s in snapshots]


def centered_rate(times: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centred finite differences at interior samples."""
    times = np.asarray(times)
    values = np.asarray(values)
    return times[1:-1], (values[2:] - values[:-2]) / (times[2:] - times[:-2])


# ---------------------------------------------------------------- breaks

def build_break_initial_condition(model: ModelSpec, eq: EquilibriumState, g0_spec: dict | None = None,
                                  g0: np.ndarray | None = None) -> DensityField:
    """f0 = g0 h*: the conditional momentum law is already in equilibrium."""
    grid = eq.grid
    if g0 is None:
        g0 = _g0_profile(model, grid, eq, g0_spec or {})
    g0 = np.asarray(g0, float)
    if np.any(g0 <= 0):
        raise PositivityError("break construction needs a strictly positive g0",
                              np.flatnonzero(g0 <= 0))
    g0 = g0 / (np.sum(g0) * grid.dq)
    return DensityField(g0[:, None] * eq.h_star, grid, 0.0)


def break_predictions(model: ModelSpec, eq: EquilibriumState, f0: DensityField) -> dict:
    """Closed-form derivatives at a break from xi alone."""
    grid = eq.grid
    prof = profiles_1d(model, grid.q)
    g = integrate_p(f0.values, grid)
    xi = np.log(g) - eq.log_g_star
    dxi = spatial_derivative(xi, grid, "q", 1)
    M, D = prof["M"], prof["D"]
    Fddd = -float(np.sum(g * D * (dxi / M) ** 2) * grid.dq)
    Hdd = model.temperature * float(np.sum(g * dxi**2 / M) * grid.dq)
    u = grid.p[None, :] / M[:, None]
    deta_pred = -u * dxi[:, None]
    return {"Fddd": Fddd, "Hdd": Hdd, "Gdd": -Hdd, "deta_dt": deta_pred, "dxi": dxi}


def _polyfit(t: np.ndarray, y: np.ndarray, deg: int) -> tuple[np.ndarray, float, float]:
    """Least-squares polynomial in ascending powers; returns coefficients, R^2 and max residual."""
    V = np.vander(t, deg + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    resid = y - V @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return coef, r2, float(np.max(np.abs(resid)))


@dataclass
class BreakAnalysis:
    window: float
    dt: float
    times: list
    F: list
    G: list
    H: list
    fitted: dict
    predicted: dict
    checks: dict
    rel_errors: dict
    status: str
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def as_dict(self) -> dict:
        return asdict(self)


def auto_window(Fddd_pred: float, F0: float, dt: float, n_snap: int = 9) -> float:
    """Short window: a few CFL steps, capped so the cubic stays below 10% of F(0)."""
    steps = n_snap - 1
    w = steps * dt
    if Fddd_pred < 0 and F0 > 0:
        cap = (0.6 * F0 / abs(Fddd_pred)) ** (1 / 3)
        w = min(w, cap)
    return w


def break_analysis(model: ModelSpec, eq: EquilibriumState, g0_spec: dict | None = None,
                   window: float | None = None, dt: float | None = None, n_snap: int = 9,
                   substeps: int | None = None, g0: np.ndarray | None = None) -> BreakAnalysis:
    """Evolve from a break state over a short forward window and compare
    fitted derivatives of F, G, H with their closed forms."""
    grid = eq.grid
    f0 = build_break_initial_condition(model, eq, g0_spec, g0)
    r0 = entropies(f0, eq, model)
    pred = break_predictions(model, eq, f0)
    cfl = cfl_dt(model, grid)
    if r0.F < 1e-14:
        return BreakAnalysis(0.0, 0.0, [0.0], [r0.F], [r0.G], [r0.H], {},
                             {"Fddd": pred["Fddd"], "Hdd": pred["Hdd"]},
                             {"equilibrium": True}, {}, "equilibrium reached, tau = 0")
    if window is None:
        window = auto_window(pred["Fddd"], r0.F, dt or cfl, n_snap)
    spacing = window / (n_snap - 1)
    if substeps is None:
        substeps = max(1, int(np.ceil(spacing / (dt or cfl) - 1e-9)))
    step = spacing / substeps
    res = evolve(model, EvolutionRun(f0, step, substeps * (n_snap - 1), snapshot_every=substeps))
    snaps = res.snapshots
    reps = [r0] + [entropies(s, eq, model) for s in snaps[1:]]
    t = np.array([s.t for s in snaps])
    Fv = np.array([r.F for r in reps])
    Gv = np.array([r.G for r in reps])
    Hv = np.array([r.H for r in reps])
    cF, r2F, resF = _polyfit(t, Fv, 3)
    cG, r2G, _ = _polyfit(t, Gv, 2)
    cH, r2H, _ = _polyfit(t, Hv, 2)
    fitted = {"Fdot": cF[1], "Fddot": 2 * cF[2], "Fddd": 6 * cF[3], "Gdot": cG[1], "Gdd": 2 * cG[2],
              "Hdot": cH[1], "Hdd": 2 * cH[2], "r2_F": r2F, "r2_G": r2G, "r2_H": r2H,
              "cubic_residual": resF}
    # d eta/dt at t = 0 from a second-order one-sided difference of the first fine steps
    fine = evolve(model, EvolutionRun(f0, step, 2))
    etas = [log_ratio_fields(s, eq).eta for s in fine.snapshots]
    deta = (-3 * etas[0] + 4 * etas[1] - etas[2]) / (2 * step)
    w_star = eq.f_star
    num = np.sqrt(np.sum(w_star * (deta - pred["deta_dt"]) ** 2))
    den = np.sqrt(np.sum(w_star * pred["deta_dt"] ** 2))
    eta_err = float(num / den)
    # G'' from the general formula with the break-time d eta/dt, against its closed form
    gdd_formula = position_entropy_derivatives(f0, eq, model, deta_dt=pred["deta_dt"])["Gddot"]
    Fddd_p, Hdd_p = pred["Fddd"], pred["Hdd"]
    rel = {
        "Fddd": abs(fitted["Fddd"] - Fddd_p) / abs(Fddd_p),
        "Hdd": abs(fitted["Hdd"] - Hdd_p) / abs(Hdd_p),
        "G_plus_H": abs(fitted["Gdd"] + fitted["Hdd"]) / abs(fitted["Hdd"]),
        "deta_dt": eta_err,
        "Gdd_formula": abs(gdd_formula + Hdd_p) / abs(Hdd_p),
        "cubic_residual": resF / (abs(Fddd_p) * window**3 / 6),
    }
    checks = {
        "H0_zero": r0.H < 1e-12,
        "diss_rate_zero": abs(r0.diss_rate) < 1e-10,
        "Fdot_zero": abs(fitted["Fdot"]) < 1e-3 * abs(Fddd_p) * window**2,
        "Fddot_zero": abs(fitted["Fddot"]) < 1e-2 * abs(Fddd_p),
        "Fddd_match": rel["Fddd"] < 0.05,
        "Fddd_negative": fitted["Fddd"] < 0,
        "Hdd_match": rel["Hdd"] < 0.05,
        "Gdd_minus_Hdd": rel["G_plus_H"] < 0.05,
        "deta_dt_match": eta_err < 0.02,
        "cubic_form": r2F > FIT_R2_MIN and rel["cubic_residual"] < 0.05,
    }
    if min(r2F, r2G, r2H) < FIT_R2_MIN:
        raise WindowTooWideError(f"fit R^2 {min(r2F, r2G, r2H):.5f} below {FIT_R2_MIN}", window / 2)
    predicted = {"Fddd": Fddd_p, "Hdd": Hdd_p, "Gdd": -Hdd_p, "Gdd_formula": gdd_formula}
    return BreakAnalysis(window, step, t.tolist(), Fv.tolist(), Gv.tolist(), Hv.tolist(),
                         {k: float(v) for k, v in fitted.items()}, predicted, checks,
                         {k: float(v) for k, v in rel.items()}, "break analysed")


def monotonicity_audit(reports: list[EntropyReport], tol: float = 1e-9, flat: float = 1e-8) -> dict:
    """Non-increase of F along a run, flat segments and the sign of G' + H'."""
    if len(reports) < 2:
        raise ValueError("need at least two entropy samples")
    t = np.array([r.t for r in reports])
    F = np.array([r.F for r in reports])
    G = np.array([r.G for r in reports])
    H = np.array([r.H for r in reports])
    dF = np.diff(F)
    violations = [(float(t[k]), float(t[k + 1]), float(dF[k])) for k in np.flatnonzero(dF > tol)]
    flat_idx = np.flatnonzero(np.abs(dF) < flat)
    flats = [{"t": float(t[k]), "H": float(H[k])} for k in flat_idx]
    dt = np.diff(t)
    gdot = np.diff(G) / dt
    hdot = np.diff(H) / dt
    both_pos = int(np.count_nonzero((gdot > tol) & (hdot > tol)))
    sum_max = float(np.max(gdot + hdot))
    return {"monotone": not violations, "violations": violations, "flat_segments": flats,
            "waterbed_max": sum_max, "waterbed_ok": sum_max <= tol and both_pos == 0,
            "both_positive_count": both_pos}
