"""Phase-space grids for one degree of freedom, fields and their factorisation.

Quadrature uses uniform cell weights (dq * dp) on every axis. This is the
rule under which the flux-form evolution conserves mass exactly, so all
integrals here agree with the discrete dynamics to rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridError, PositivityError
from .model import TWO_PI, ModelSpec, profiles_1d

MIN_NODES = 16
STENCIL_MIN_NODES = 5
POSITIVITY_FLOOR = 1e-13
P_MAX_SIGMAS = 7.0
DEFAULT_P_MAX_SIGMAS = 8.0


@dataclass(frozen=True)
class PhaseGrid:
    q: np.ndarray
    p: np.ndarray
    dq: float
    dp: float
    periodic: bool
    q_bounds: tuple[float, float]
    p_max: float

    @property
    def shape(self) -> tuple[int, int]:
        return (self.q.size, self.p.size)

    @property
    def cell(self) -> float:
        return self.dq * self.dp

    @property
    def boundary_q(self) -> str:
        return "periodic" if self.periodic else "dirichlet-zero"

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.q, self.p, indexing="ij")

    def spec(self) -> dict:
        return {
            "nq": int(self.q.size), "np": int(self.p.size),
            "q_bounds": [float(b) for b in self.q_bounds], "p_max": float(self.p_max),
            "periodic": bool(self.periodic),
        }


def make_grid(model: ModelSpec, nq: int, np_: int, p_max: float | None = None,
              q_bounds: tuple[float, float] | None = None) -> PhaseGrid:
    """Uniform tensor grid: periodic nodes on a circle, cell centres on a line,
    cell centres on [-p_max, p_max] in momentum (symmetric about zero)."""
    if model.n != 1:
        raise GridError("phase grids are implemented for one degree of freedom only")
    if nq < MIN_NODES or np_ < MIN_NODES:
        raise GridError(f"need at least {MIN_NODES} nodes per axis, got {nq}x{np_}")
    periodic = model.space.topology[0] == "circle"
    if periodic:
        lo, hi = 0.0, TWO_PI
        dq = TWO_PI / nq
        q = np.arange(nq) * dq
    else:
        lo, hi = q_bounds if q_bounds is not None else model.space.interval(0)
        dq = (hi - lo) / nq
        q = lo + (np.arange(nq) + 0.5) * dq
    m_max = float(np.max(profiles_1d(model, np.linspace(lo, hi, 257))["M"]))
    sigma = np.sqrt(model.temperature * m_max)
    if p_max is None:
        p_max = DEFAULT_P_MAX_SIGMAS * sigma
    if p_max < P_MAX_SIGMAS * sigma * (1 - 1e-12):
        raise GridError(f"p_max={p_max:.4g} below {P_MAX_SIGMAS} thermal widths ({P_MAX_SIGMAS * sigma:.4g})")
    dp = 2.0 * p_max / np_
    p = -p_max + (np.arange(np_) + 0.5) * dp
    p = 0.5 * (p - p[::-1])  # exact mirror symmetry
    return PhaseGrid(q, p, dq, dp, periodic, (float(lo), float(hi)), float(p_max))


@dataclass
class DensityField:
    values: np.ndarray
    grid: PhaseGrid
    t: float = 0.0

    def mass(self) -> float:
        return integrate(self.values, self.grid)


@dataclass
class MarginalField:
    values: np.ndarray
    grid: PhaseGrid


@dataclass
class ConditionalField:
    values: np.ndarray
    grid: PhaseGrid
    norm_audit: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.norm_audit is None:
            self.norm_audit = self.values.sum(axis=1) * self.grid.dp - 1.0


@dataclass
class ConditionalMeanField:
    gamma: np.ndarray
    varpi: np.ndarray


def integrate(values: np.ndarray, grid: PhaseGrid) -> float:
    return float(np.sum(values) * grid.cell)


def integrate_p(values: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    return values.sum(axis=-1) * grid.dp


def integrate_q(values: np.ndarray, grid: PhaseGrid) -> np.ndarray | float:
    return values.sum(axis=0) * grid.dq


def normalize(values: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    return values / integrate(values, grid)


def marginalize_position(f: DensityField) -> MarginalField:
    return MarginalField(integrate_p(f.values, f.grid), f.grid)


def positivity_floor(values: np.ndarray) -> float:
    return POSITIVITY_FLOOR * float(np.max(values))


def conditional_pdf(f: DensityField, g: MarginalField) -> ConditionalField:
    """h = f / g row by row; raises if g drops below 1e-13 max(g)."""
    bad = np.flatnonzero(g.values <= positivity_floor(g.values))
    if bad.size:
        raise PositivityError(f"position density below floor at {bad.size} nodes: {bad[:10].tolist()}", bad)
    return ConditionalField(f.values / g.values[:, None], f.grid)


def conditional_mean(h: ConditionalField) -> ConditionalMeanField:
    p = h.grid.p
    gamma = integrate_p(h.values * p, h.grid)
    return ConditionalMeanField(gamma, p[None, :] - gamma[:, None])


def _require_symmetric_p(grid: PhaseGrid) -> None:
    if not np.allclose(grid.p, -grid.p[::-1], atol=1e-14 * grid.p_max):
        raise GridError("momentum grid is not symmetric about zero")


def parity_split(h: ConditionalField) -> tuple[ConditionalField, ConditionalField]:
    """Even and odd parts in p: h_plus(p) = (h(p) + h(-p)) / 2, etc."""
    _require_symmetric_p(h.grid)
    mirror = h.values[:, ::-1]
    return (ConditionalField(0.5 * (h.values + mirror), h.grid),
            ConditionalField(0.5 * (h.values - mirror), h.grid))


def momentum_marginals(f: DensityField, g: MarginalField, h_star: np.ndarray) -> dict:
    """Actual momentum density and the one implied by g with equilibrium h."""
    rho = integrate_q(f.values, f.grid)
    rho_hat = integrate_q(g.values[:, None] * h_star, f.grid)
    return {"rho": rho, "rho_hat": rho_hat}


def derivative_1d(u: np.ndarray, h: float, order: int, periodic: bool, axis: int = -1) -> np.ndarray:
    """Second-order central differences; one-sided second-order stencils at
    the ends of non-periodic axes."""
    u = np.moveaxis(np.asarray(u, float), axis, -1)
    n = u.shape[-1]
    if n < STENCIL_MIN_NODES:
        raise GridError(f"need at least {STENCIL_MIN_NODES} nodes for stencils, got {n}")
    if order == 1:
        if periodic:
            out = (np.roll(u, -1, -1) - np.roll(u, 1, -1)) / (2 * h)
        else:
            out = np.empty_like(u)
            out[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * h)
            out[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * h)
            out[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * h)
    elif order == 2:
        if periodic:
            out = (np.roll(u, -1, -1) - 2 * u + np.roll(u, 1, -1)) / h**2
        else:
            out = np.empty_like(u)
            out[..., 1:-1] = (u[..., 2:] - 2 * u[..., 1:-1] + u[..., :-2]) / h**2
            out[..., 0] = (2 * u[..., 0] - 5 * u[..., 1] + 4 * u[..., 2] - u[..., 3]) / h**2
            out[..., -1] = (2 * u[..., -1] - 5 * u[..., -2] + 4 * u[..., -3] - u[..., -4]) / h**2
    else:
        raise GridError(f"derivative order must be 1 or 2, got {order}")
    return np.moveaxis(out, -1, axis)


def spatial_derivative(values: np.ndarray, grid: PhaseGrid, axis: str, order: int) -> np.ndarray:
    """Derivative of a q-field (1-D) or phase field (2-D) along ``q`` or ``p``."""
    values = np.asarray(values, float)
    if axis == "q":
        return derivative_1d(values, grid.dq, order, grid.periodic, axis=0)
    if axis == "p":
        if values.ndim != 2:
            raise GridError("p-derivatives need a phase-space field")
        return derivative_1d(values, grid.dp, order, False, axis=1)
    raise GridError(f"axis must be 'q' or 'p', got {axis!r}")


def safe_log(values: np.ndarray, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Logarithm with values below ``floor`` replaced by the floor; returns the mask of floored nodes."""
    mask = values < floor
    return np.log(np.where(mask, floor, values)), mask


# ---------------------------------------------------------------- field I/O

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def dump_field(path, values: np.ndarray, grid: PhaseGrid | None, name: str, t: float = 0.0,
               fmt: str = "binary") -> Path:
    """Write a field as raw little-endian float64 or CSV with a JSON sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(values, dtype="<f8")
    if fmt == "binary":
        path.write_bytes(arr.tobytes())
    elif fmt == "csv":
        np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt="%.17g")
    else:
        raise ValueError(f"unknown field format {fmt!r}")
    meta = {"field": name, "timestamp": float(t), "shape": list(arr.shape), "dtype": "<f8",
            "format": fmt, "grid": grid.spec() if grid is not None else None}
    _sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_field(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(_sidecar_path(path).read_text())
    if meta["format"] == "binary":
        arr = np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"])
    else:
        arr = np.loadtxt(path, delimiter=",", ndmin=2).reshape(meta["shape"])
    return arr.copy(), meta
