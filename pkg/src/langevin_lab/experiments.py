"""Experiment pipelines shared by the command line and the acceptance tests.

Every pipeline returns a plain report dictionary and a mapping of audit
names to pass/fail; file output is left to the caller.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import i0e

from . import entropy as ent
from . import fpke, sde, spectral
from .equilibrium import (build_equilibrium, conditional_equilibrium_moments,
                          laplace_partition, partition_function)
from .errors import ConfigError, LabError
from .grid import DensityField, PhaseGrid, make_grid
from .model import TWO_PI, ModelSpec, build_model

log = logging.getLogger(__name__)


@dataclass
class Outcome:
    report: dict
    audits: dict
    tables: dict = field(default_factory=dict)     # name -> (header, rows)
    fields: dict = field(default_factory=dict)     # name -> (array, grid or None, t)


# ------------------------------------------------------------------ set-up

def model_from_config(section: dict) -> ModelSpec:
    params = dict(section.get("params") or {})
    params["beta"] = section["beta"]
    if "bounds" in section:
        if section["family"] != "harmonic":
            raise ConfigError("model.bounds applies to the harmonic family only")
        params["bounds"] = [section["bounds"]]
    try:
        return build_model(section["family"], **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for family {section['family']!r}: {exc}") from None


def grid_from_config(model: ModelSpec, section: dict) -> PhaseGrid:
    return make_grid(model, int(section["nq"]), int(section["np"]), section.get("p_max"))


def resolve_dt(model: ModelSpec, grid: PhaseGrid, dt, t_end: float) -> tuple[float, int]:
    """Step size no larger than the requested (or CFL) value that divides t_end."""
    limit = fpke.cfl_dt(model, grid)
    target = limit if dt in (None, "auto") else min(float(dt), limit)
    n = max(1, int(np.ceil(t_end / target - 1e-12)))
    return t_end / n, n


def closed_form_partition(model: ModelSpec) -> float | None:
    """Partition function in closed form where one is known (n = 1)."""
    p = model.params
    T = model.temperature
    if model.family == "harmonic" and model.n == 1:
        return float(TWO_PI * T * np.sqrt(p["mass"] / p["kappa"]))
    if model.family == "pendulum" and model.n == 1:
        # integral of exp(-beta v0 (1 - cos q)) over the circle is 2 pi exp(-beta v0) I0(beta v0)
        return float(np.sqrt(TWO_PI * T * p["mass"]) * TWO_PI * i0e(model.beta * p["v0"]))
    return None


def equilibrium_check(model: ModelSpec, sizes=((64, 64), (128, 128)), order_band=(3.4, 4.6),
                      laplace_betas=(), z_rtol: float = 1e-8, einstein_scale: float = 1.5) -> Outcome:
    """Partition function, stationarity of f* under the density equation and
    Laplace asymptotics."""
    Z = partition_function(model)
    report = {"Z": Z}
    audits = {}
    closed = closed_form_partition(model)
    if closed is not None:
        report["Z_closed_form"] = closed
        report["Z_closed_form_ratio"] = Z / closed
        audits["Z_closed_form"] = abs(Z / closed - 1) < z_rtol
    try:
        lap = laplace_partition(model, Z=Z)
        report.update(Z_laplace=lap.Z_laplace, ratio=lap.ratio, q_star=lap.q_star, K=lap.K)
        if model.family == "harmonic":
            audits["laplace_exact_harmonic"] = abs(lap.ratio - 1) < z_rtol
    except LabError as exc:
        report["laplace_error"] = str(exc)
    stat = fpke.stationarity_residual(model, sizes, check_order=False)
    report["stationarity"] = stat
    report["max_stationarity_residual"] = stat["max_abs"]
    lo, hi = order_band
    if stat["max_abs"] > 1e-13:
        audits["stationarity_refinement_ratio"] = bool(lo <= stat["ratio"] <= hi)
    else:
        audits["stationarity_at_rounding"] = True
    broken = fpke.stationarity_residual(model, sizes[-1:], damping_scale=einstein_scale, check_order=False)
    report["broken_einstein_residual"] = broken["max_abs"]
    audits["einstein_relation_needed"] = broken["max_abs"] > 10 * stat["max_abs"]
    grid = make_grid(model, *sizes[-1])
    eq = build_equilibrium(model, grid, Z)
    errs = []
    for idx in np.linspace(0, grid.q.size - 1, 5).astype(int):
        cm = conditional_equilibrium_moments(model, eq, int(idx))
        errs.append({"q": float(grid.q[idx]), "mean": cm["mean"],
                     "cov_rel_error": cm["cov"] / cm["expected_cov"] - 1})
    report["moment_errors"] = errs
    audits["conditional_moments"] = all(abs(e["mean"]) < 1e-10 and abs(e["cov_rel_error"]) < 1e-6
                                        for e in errs)
    if laplace_betas:
        ratios = []
        for b in laplace_betas:
            lr = laplace_partition(model.with_beta(b))
            ratios.append({"beta": b, "ratio": lr.ratio, "Z": lr.Z, "Z_laplace": lr.Z_laplace})
        report["laplace_sweep"] = ratios
        dev = [abs(r["ratio"] - 1) for r in ratios]
        # an exact Laplace result (quadratic H) has nothing left to shrink
        audits["laplace_monotone"] = all(b < a or a < z_rtol for a, b in zip(dev, dev[1:]))
        audits["laplace_within_3pct"] = dev[-1] < 0.03
    fields = {"g_star": (eq.g_star, grid, 0.0)}
    return Outcome(report, audits, fields=fields)


# -------------------------------------------------------------- evolution

def run_evolution(model: ModelSpec, grid: PhaseGrid, run: dict, default_every: int | None = None):
    eq = build_equilibrium(model, grid)
    f0 = DensityField(fpke.initial_condition(model, grid, eq, run.get("initial_condition")), grid)
    dt, n = resolve_dt(model, grid, run.get("dt", "auto"), float(run["t_end"]))
    every = int(run.get("snapshot_every", default_every or max(1, n // 20)))
    res = fpke.evolve(model, fpke.EvolutionRun(f0, dt, n, every))
    return eq, res


def evolve_fpke(model: ModelSpec, grid: PhaseGrid, run: dict) -> Outcome:
    eq, res = run_evolution(model, grid, run)
    diag = res.diagnostics
    mass_drift = float(np.max(np.abs(diag[:, 1] - diag[0, 1])))
    fmax = float(np.max(res.snapshots[0].values))
    report = {"dt": res.dt, "n_steps": int(diag.shape[0] - 1), "mass_drift": mass_drift,
              "min_f": float(diag[:, 2].min()), "max_boundary_mass": float(diag[:, 3].max()),
              "warnings": res.warnings}
    audits = {"mass_conservation": mass_drift < 1e-10,
              "positivity": report["min_f"] >= -fpke.NEGATIVITY_ABORT * fmax}
    tables = {"diagnostics": (["t", "mass", "min_f", "boundary_mass"], diag.tolist())}
    fields = {}
    if run.get("dump_snapshots"):
        for k, s in enumerate(res.snapshots):
            fields[f"snapshot_{k:05d}"] = (s.values, grid, s.t)
    return Outcome(report, audits, tables, fields)


def entropy_trace(model: ModelSpec, grid: PhaseGrid, run: dict) -> Outcome:
    eq, res = run_evolution(model, grid, run, default_every=1)
    reps = ent.entropy_trace(res.snapshots, eq, model)
    t = np.array([r.t for r in reps])
    F = np.array([r.F for r in reps])
    rate = np.array([r.diss_rate for r in reps])
    tc, Fd = ent.centered_rate(t, F)
    sel = np.abs(Fd) > 1e-6
    rel = np.abs(rate[1:-1][sel] - Fd[sel]) / np.abs(Fd[sel])
    G = np.array([r.G for r in reps])
    _, Gd = ent.centered_rate(t, G)
    gdot = np.array([r.Gdot for r in reps])[1:-1]
    gsel = np.abs(Gd) > 1e-6
    grel = np.abs(gdot[gsel] - Gd[gsel]) / np.abs(Gd[gsel])
    mono = ent.monotonicity_audit(reps)
    tol = float(run.get("rate_tol", 0.01))
    report = {"dt": res.dt, "n_snapshots": len(reps), "F0": float(F[0]), "F_end": float(F[-1]),
              "max_decomp_residual": float(max(abs(r.decomp_residual) for r in reps)),
              "min_entropy": float(min(min(r.F, r.G, r.H) for r in reps)),
              "diss_rate_max_rel_error": float(rel.max()) if rel.size else 0.0,
              "Gdot_max_rel_error": float(grel.max()) if grel.size else 0.0,
              "monotonicity": mono}
    audits = {"decomposition": report["max_decomp_residual"] < 1e-9,
              "nonnegative": report["min_entropy"] >= -1e-10,
              "pinsker": all(r.pinsker_ok() for r in reps),
              "dissipation_formula": report["diss_rate_max_rel_error"] < tol,
              "monotone": mono["monotone"],
              "waterbed": mono["waterbed_ok"]}
    tables = {"entropy": (ent.ENTROPY_CSV_HEADER, [r.csv_row() for r in reps])}
    return Outcome(report, audits, tables)


def break_analysis(model: ModelSpec, grid: PhaseGrid, run: dict) -> Outcome:
    eq = build_equilibrium(model, grid)
    g0_spec = run.get("g0", {"tilt": 0.2})
    g0 = eq.g_star.copy() if g0_spec == "equilibrium" else None
    window = run.get("window", "auto")
    dt = run.get("dt", "auto")
    ba = ent.break_analysis(model, eq, None if g0 is not None else g0_spec,
                            window=None if window == "auto" else float(window),
                            dt=None if dt == "auto" else float(dt), n_snap=int(run.get("n_snap", 9)),
                            g0=g0)
    return Outcome(ba.as_dict(), dict(ba.checks))


# -------------------------------------------------------------------- SDE

def simulate_sde(model: ModelSpec, grid: PhaseGrid | None, run: dict) -> Outcome:
    cfg = sde.SDEConfig(N=int(run["N"]), dt=float(run["dt"]), t_end=float(run["t_end"]),
                        seed=int(run.get("seed", 0)), record_every=int(run.get("record_every", 10)),
                        n_batches=int(run.get("n_batches", 20)),
                        initial=run.get("initial", {"kind": "equilibrium"}),
                        keep_trajectory=bool(run.get("energy_audit", False)))
    res = sde.simulate_ensemble(model, cfg)
    report = {"N": cfg.N, "dt": cfg.dt, "t_end": res.final.t, "excluded": res.excluded,
              "final_moments": {k: (float(v[0][-1]), float(v[1][-1])) for k, v in res.moments.items()}}
    audits = {"finite_particles": not res.failed}
    tables = {"moments": (res.moment_header(), res.moment_rows())}
    fields = {}
    if cfg.keep_trajectory:
        audit = sde.energy_balance_audit(model, res.trajectory, cfg.n_batches)
        report["energy_audit"] = audit.checks
        tables["energy_audit"] = (sde.ENERGY_AUDIT_HEADER, audit.rows())
        audits.update({k: bool(v) for k, v in audit.checks.items()
                       if k in ("energy_split", "dEH_match", "dET_match", "conditional_match")})
    if run.get("histogram") and grid is not None and model.n == 1:
        hist, outside = sde.histogram_density(res.final, grid)
        report["histogram_outside"] = outside
        fields["histogram"] = (hist, grid, res.final.t)
    if run.get("dump_ensemble"):
        fields["ensemble_q"] = (res.final.q, None, res.final.t)
        fields["ensemble_p"] = (res.final.p, None, res.final.t)
    return Outcome(report, audits, tables, fields)


def _phase_moments(f: np.ndarray, grid: PhaseGrid) -> dict:
    Q, P = grid.mesh()
    c = grid.cell
    out = {"E_p": float(np.sum(f * P) * c), "E_p2": float(np.sum(f * P**2) * c)}
    if grid.periodic:
        out["E_cos_q"] = float(np.sum(f * np.cos(Q)) * c)
        out["E_sin_q"] = float(np.sum(f * np.sin(Q)) * c)
    else:
        out["E_q"] = float(np.sum(f * Q) * c)
        out["E_q2"] = float(np.sum(f * Q**2) * c)
    return out


def _particle_moment_samples(ens: sde.Ensemble, periodic: bool) -> dict:
    q = ens.q[ens.active, 0]
    p = ens.p[ens.active, 0]
    out = {"E_p": p, "E_p2": p**2}
    if periodic:
        out["E_cos_q"] = np.cos(q)
        out["E_sin_q"] = np.sin(q)
    else:
        out["E_q"] = q
        out["E_q2"] = q**2
    return out


def cross_validate(model: ModelSpec, grid: PhaseGrid, run: dict) -> Outcome:
    """Density equation and particle ensemble from the same initial law.

    The particle runs use dt and dt/2 with independent streams; moments are
    extrapolated to dt -> 0 (2 m(dt/2) - m(dt)) to remove the first-order
    bias of Euler-Maruyama, and the histogram comes from the dt/2 run.
    """
    ic = run.get("initial_condition", {"kind": "gaussian", "mean": [2.0, 0.0],
                                       "cov": [[0.25, 0.0], [0.0, 0.5]]})
    if ic.get("kind") not in ("gaussian", "equilibrium"):
        raise ConfigError("cross-validation needs an initial law both solvers can sample: "
                          "'gaussian' or 'equilibrium'")
    t_end = float(run["t_end"])
    eq, res = run_evolution(model, grid, {"t_end": t_end, "initial_condition": ic,
                                          "snapshot_every": 10**9})
    f_end = res.snapshots[-1].values
    N, dt, seed = int(run["N"]), float(run["dt"]), int(run.get("seed", 0))
    sde_ic = {"kind": "gaussian", "mean": ic["mean"], "cov": ic["cov"]} if ic["kind"] == "gaussian" \
        else {"kind": "equilibrium"}
    runs = {}
    for label, step, s in (("dt", dt, seed), ("half", 0.5 * dt, seed + 1)):
        cfg = sde.SDEConfig(N=N, dt=step, t_end=t_end, seed=s, record_every=10**9, initial=sde_ic)
        runs[label] = sde.simulate_ensemble(model, cfg).final
    fq, fp = (int(x) for x in run.get("coarsen", [8, 8]))
    hist, outside = sde.histogram_density(runs["half"], grid)
    l1 = float(np.sum(np.abs(sde.coarsen(hist, fq, fp) - sde.coarsen(f_end, fq, fp))) * grid.cell * fq * fp)
    fpke_m = _phase_moments(f_end, grid)
    s1 = _particle_moment_samples(runs["dt"], grid.periodic)
    s2 = _particle_moment_samples(runs["half"], grid.periodic)
    moments = {}
    for key in fpke_m:
        m1, se1 = sde.batch_mean_se(s1[key])
        m2, se2 = sde.batch_mean_se(s2[key])
        ext, se = 2 * m2 - m1, float(np.hypot(2 * se2, se1))
        moments[key] = {"fpke": fpke_m[key], "sde_dt": m1, "sde_half": m2, "sde_extrapolated": ext,
                        "se": se, "z": (ext - fpke_m[key]) / se}
    expected_p2 = sde.equilibrium_second_moment(model)
    p2 = moments["E_p2"]
    stationary_z = (p2["sde_extrapolated"] - expected_p2) / p2["se"]
    tol = float(run.get("l1_tol", 0.05))
    report = {"l1_distance": l1, "coarsen": [fq, fp], "histogram_outside": outside,
              "fpke_dt": res.dt, "moments": moments, "E_p2_equilibrium": expected_p2,
              "E_p2_stationary_z": stationary_z}
    audits = {"l1_distance": l1 < tol,
              "moments_within_3se": all(abs(m["z"]) <= 3 for m in moments.values()),
              "stationary_second_moment": abs(stationary_z) <= 3}
    fields = {"histogram": (hist, grid, t_end), "fpke_density": (f_end, grid, t_end)}
    return Outcome(report, audits, fields=fields)


# --------------------------------------------------------------- spectrum

def spectrum(model: ModelSpec, grid_section: dict, run: dict) -> Outcome:
    nq = int(grid_section.get("nq", spectral.DEFAULT_COARSE[0]))
    npn = int(grid_section.get("np", spectral.DEFAULT_COARSE[1]))
    grid = spectral.coarse_grid(model, nq, npn)
    eq = build_equilibrium(model, grid)
    ops = spectral.assemble_linearized_operators(model, eq, grid)
    adj = spectral.adjointness_audit(ops, int(run.get("n_probes", 100)), int(run.get("seed", 0)))
    rep = spectral.spectrum(ops, model)
    summ = rep.summary()
    tol = float(run.get("pair_tol", 1e-3))
    report = {"grid": [nq, npn], "adjointness": adj, "summary": summ,
              "pairs": rep.pairs, "flux_form_pairs": rep.flux_form_pairs,
              "eigenvalues_lambda": rep.eig_lambda, "eigenvalues_density": rep.eig_density}
    audits = {"adjoint_independent": adj["adjoint_defect_independent"] < 5e-3,
              "adjoint_exact": adj["adjoint_defect_exact"] < 1e-8,
              "form_nonpositive": adj["form_nonpositive"],
              "form_identity": adj["form_identity_max"] < 1e-8,
              "projector_commutation": adj["projector_commutation"] < 1e-8,
              "pairing_slowest_10": summ["max_pair_rel_distance_10"] < tol,
              "quadratic_relation": summ["quad_residual_max"] < 1e-6,
              "no_unstable": summ["n_unstable"] == 0,
              "psi_zero_imaginary": summ["psi_zero_max_real_over_rho"] < 1e-6,
              "psi_zero_singular_values": summ["psi_zero_sv_mismatch_over_rho"] < 1e-6}
    tables = {"spectrum": (["re", "im", "source", "pair_id"], spectral.spectrum_rows(rep))}
    return Outcome(report, audits, tables)


PIPELINES = {
    "equilibrium-check": lambda m, cfg: equilibrium_check(
        m, tuple(tuple(s) for s in cfg.run.get("sizes", ((64, 64), (128, 128)))),
        tuple(cfg.run.get("order_band", (3.4, 4.6))), tuple(cfg.run.get("laplace_betas", ())),
        float(cfg.run.get("z_rtol", 1e-8))),
    "evolve-fpke": lambda m, cfg: evolve_fpke(m, grid_from_config(m, cfg.grid), cfg.run),
    "entropy-trace": lambda m, cfg: entropy_trace(m, grid_from_config(m, cfg.grid), cfg.run),
    "break-analysis": lambda m, cfg: break_analysis(m, grid_from_config(m, cfg.grid), cfg.run),
    "simulate-sde": lambda m, cfg: simulate_sde(
        m, grid_from_config(m, cfg.grid) if cfg.run.get("histogram") else None, cfg.run),
    "spectrum": lambda m, cfg: spectrum(m, cfg.grid, cfg.run),
    "cross-validate": lambda m, cfg: cross_validate(m, grid_from_config(m, cfg.grid), cfg.run),
}


