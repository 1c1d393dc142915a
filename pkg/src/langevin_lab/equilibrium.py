"""Maxwell-Boltzmann equilibrium, partition function and its Laplace asymptotics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.special import erfc, logsumexp

from .errors import (DegenerateHessianError, IntegrabilityError, ModelError, NonUniqueMinimumError,
                     ResolutionError, TemperatureTooLowError, TruncationError)
from .grid import DensityField, PhaseGrid, integrate
from .model import TWO_PI, ModelSpec, profiles_1d

TAIL_MASS_LIMIT = 1e-10
LINE_EDGE_LIMIT = 1e-9  # integrand at truncation edges relative to its peak


@dataclass(frozen=True)
class EquilibriumState:
    grid: PhaseGrid
    Z: float
    g_star: np.ndarray
    h_star: np.ndarray
    log_g_star: np.ndarray
    log_h_star: np.ndarray
    beta: float

    @property
    def f_star(self) -> np.ndarray:
        return self.g_star[:, None] * self.h_star

    @property
    def log_f_star(self) -> np.ndarray:
        return self.log_g_star[:, None] + self.log_h_star

    def density(self) -> DensityField:
        return DensityField(self.f_star, self.grid, 0.0)


@dataclass(frozen=True)
class LaplaceReport:
    q_star: float
    K: float
    Z_laplace: float
    Z: float
    ratio: float
    g_hat: np.ndarray | None
    g_hat_mass: float | None


def _require_1d(model: ModelSpec) -> None:
    if model.n != 1:
        raise ModelError("equilibrium construction is implemented for one degree of freedom")


def log_position_weight(model: ModelSpec, q: np.ndarray) -> np.ndarray:
    """ln( exp(-beta V) sqrt(det M) ), the unnormalised log position density."""
    prof = profiles_1d(model, q)
    return -model.beta * prof["V"] + 0.5 * np.log(prof["M"])


def _configurational_log_integral(model: ModelSpec, nodes: int) -> float:
    lo, hi = model.space.interval(0)
    if model.space.topology[0] == "circle":
        q = np.arange(nodes) * (TWO_PI / nodes)
        lw = log_position_weight(model, q)
        return float(logsumexp(lw) + np.log(TWO_PI / nodes))
    q = np.linspace(lo, hi, nodes + 1)
    lw = log_position_weight(model, q)
    peak = lw.max()
    if max(lw[0], lw[-1]) - peak > np.log(LINE_EDGE_LIMIT):
        raise IntegrabilityError(
            "position weight does not decay at the truncation bounds; enlarge the line bounds "
            "or check integrability of exp(-beta V) sqrt(det M)")
    return float(peak + np.log(simpson(np.exp(lw - peak), x=q)))


def partition_function(model: ModelSpec, nodes: int = 1024, rtol: float = 1e-8,
                       max_doublings: int = 8) -> float:
    """Z = (2 pi T)^{n/2} * integral of exp(-beta V) sqrt(det M) over positions.

    The node count is doubled until the value changes by less than ``rtol``.
    """
    _require_1d(model)
    prev = _configurational_log_integral(model, nodes)
    for _ in range(max_doublings):
        nodes *= 2
        cur = _configurational_log_integral(model, nodes)
        if abs(np.expm1(cur - prev)) < rtol:
            return float(np.exp(0.5 * np.log(TWO_PI * model.temperature) + cur))
        prev = cur
    raise ResolutionError(f"partition function did not converge to rtol={rtol} with {nodes} nodes")


def log_h_star(model: ModelSpec, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    M = profiles_1d(model, q)["M"][:, None]
    return -0.5 * np.log(TWO_PI * model.temperature * M) - 0.5 * model.beta * p[None, :] ** 2 / M


def build_equilibrium(model: ModelSpec, grid: PhaseGrid, Z: float | None = None) -> EquilibriumState:
    """Equilibrium factors on the grid, built in log space and normalised by
    the grid quadrature (per q-row for the conditional momentum factor)."""
    _require_1d(model)
    lg = log_position_weight(model, grid.q)
    if not np.all(np.isfinite(lg)):
        raise TemperatureTooLowError("non-finite equilibrium log weights")
    lg = lg - (logsumexp(lg) + np.log(grid.dq))
    g = np.exp(lg)
    if np.count_nonzero(g > 1e-300) < 3:
        raise TemperatureTooLowError("exp(-beta V) underflows almost everywhere; rescale beta or V")
    lh = log_h_star(model, grid.q, grid.p)
    lh = lh - (logsumexp(lh, axis=1, keepdims=True) + np.log(grid.dp))
    if Z is None:
        Z = partition_function(model)
    return EquilibriumState(grid, float(Z), g, np.exp(lh), lg, lh, model.beta)


def conditional_equilibrium_moments(model: ModelSpec, eq: EquilibriumState, index: int) -> dict:
    """Quadrature mean and variance of p under h*(. | q_index)."""
    grid = eq.grid
    M = profiles_1d(model, grid.q[index:index + 1])["M"][0]
    sigma = np.sqrt(model.temperature * M)
    tail = float(erfc(grid.p_max / (np.sqrt(2.0) * sigma)))
    if tail > TAIL_MASS_LIMIT:
        raise TruncationError(f"Gaussian tail mass {tail:.2e} beyond p_max exceeds {TAIL_MASS_LIMIT}")
    h = eq.h_star[index]
    mean = float(np.sum(h * grid.p) * grid.dp)
    cov = float(np.sum(h * (grid.p - mean) ** 2) * grid.dp)
    return {"mean": mean, "cov": cov, "expected_cov": model.temperature * M, "tail_mass": tail}


def _scan_nodes(model: ModelSpec, nodes: int) -> np.ndarray:
    lo, hi = model.space.interval(0)
    if model.space.topology[0] == "circle":
        return np.arange(nodes) * (TWO_PI / nodes)
    return np.linspace(lo, hi, nodes)


def _local_minima(values: np.ndarray, periodic: bool) -> np.ndarray:
    if periodic:
        left, right = np.roll(values, 1), np.roll(values, -1)
        return np.flatnonzero((values <= left) & (values <= right))
    idx = np.flatnonzero((values[1:-1] <= values[:-2]) & (values[1:-1] <= values[2:])) + 1
    return idx


def _parabolic_vertex(q: np.ndarray, w: np.ndarray, i: int, periodic: bool) -> float:
    n = q.size
    if not periodic and (i == 0 or i == n - 1):
        return float(q[i])
    wm, w0, wp = w[(i - 1) % n], w[i], w[(i + 1) % n]
    h = q[1] - q[0]
    denom = wm - 2 * w0 + wp
    shift = 0.0 if denom <= 0 else 0.5 * h * (wm - wp) / denom
    out = q[i] + shift
    return float(np.mod(out, TWO_PI) if periodic else out)


def find_potential_minimum(model: ModelSpec, nodes: int = 20001, value_tol: float = 1e-9) -> float:
    """Unique global minimiser of V by grid scan and one Newton step."""
    periodic = model.space.topology[0] == "circle"
    q = _scan_nodes(model, nodes)
    V = profiles_1d(model, q)["V"]
    minima = _local_minima(V, periodic)
    if minima.size == 0:
        raise NonUniqueMinimumError("potential has no interior minimum on the grid")
    cands = []
    for i in minima:
        qc = _parabolic_vertex(q, V, i, periodic)
        prof = profiles_1d(model, np.array([qc]))
        if prof["d2V"][0] > 0:
            qc = qc - prof["dV"][0] / prof["d2V"][0]
        cands.append((float(profiles_1d(model, np.array([qc]))["V"][0]), qc))
    cands.sort()
    best_v, best_q = cands[0]
    h = q[1] - q[0]
    for v, qc in cands[1:]:
        dist = abs(qc - best_q)
        if periodic:
            dist = min(dist, TWO_PI - dist)
        if v - best_v < value_tol * max(1.0, abs(best_v)) and dist > 2 * h:
            raise NonUniqueMinimumError(f"global minimum of V attained at {best_q:.6g} and {qc:.6g}")
    return float(np.mod(best_q, TWO_PI) if periodic else best_q)


def laplace_partition(model: ModelSpec, q_nodes: np.ndarray | None = None, Z: float | None = None
                      ) -> LaplaceReport:
    """Low-temperature Laplace approximation of Z and the Gaussian position law."""
    _require_1d(model)
    q_star = find_potential_minimum(model)
    prof = profiles_1d(model, np.array([q_star]))
    K = float(prof["d2V"][0])
    if not K > 0:
        raise DegenerateHessianError(f"V'' at the minimiser is {K:.3e}, not positive")
    T = model.temperature
    Z_lap = float(TWO_PI * T * np.exp(-model.beta * prof["V"][0]) * np.sqrt(prof["M"][0] / K))
    if Z is None:
        Z = partition_function(model)
    g_hat = mass = None
    if q_nodes is not None:
        q_nodes = np.asarray(q_nodes, float)
        var = T / K
        g_hat = np.exp(-0.5 * (q_nodes - q_star) ** 2 / var) / np.sqrt(TWO_PI * var)
        mass = float(np.sum(g_hat) * (q_nodes[1] - q_nodes[0]))
    return LaplaceReport(q_star, K, Z_lap, float(Z), float(Z / Z_lap), g_hat, mass)


def position_pdf_maxima(model: ModelSpec, nodes: int = 100_000, tie_tol: float = 1e-12) -> list[float]:
    """Minimisers of V - (T/2) ln det M, i.e. the maxima of the equilibrium position density."""
    _require_1d(model)
    periodic = model.space.topology[0] == "circle"
    q = _scan_nodes(model, nodes)
    prof = profiles_1d(model, q)
    w = prof["V"] - 0.5 * model.temperature * np.log(prof["M"])
    best = w.min()
    idx = np.flatnonzero(w <= best + tie_tol * max(1.0, abs(best)))
    out = sorted({round(_parabolic_vertex(q, w, i, periodic), 14) for i in idx})
    return [float(x) for x in out]


def free_energy(model: ModelSpec, f: np.ndarray, grid: PhaseGrid) -> float:
    """Helmholtz free energy: integral of f (H + T ln f) with 0 ln 0 = 0."""
    prof = profiles_1d(model, grid.q)
    H = prof["V"][:, None] + 0.5 * grid.p[None, :] ** 2 / prof["M"][:, None]
    pos = f > 0
    flnf = np.zeros_like(f)
    flnf[pos] = f[pos] * np.log(f[pos])
    return float(integrate(f * H + model.temperature * flnf, grid))


def min_free_energy(model: ModelSpec, Z: float) -> float:
    return float(-model.temperature * np.log(Z))
