"""Stochastic Hamiltonian systems with position-dependent mass and diffusion.

All evaluators are vectorised: positions have shape ``(..., n)``, scalar
maps return ``(...)``, vector maps ``(..., n)`` and matrix maps ``(..., n, n)``.
Mass and diffusion gradients carry the differentiation index first among the
trailing axes, i.e. ``mass_grad(q)[..., k, :, :] = d M / d q_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import erfcinv

from .errors import DegenerateMassError, ModelError

TWO_PI = 2.0 * np.pi
MASS_CONDITION_LIMIT = 1e12
EIGEN_FLOOR = 1e-12


@dataclass(frozen=True)
class PositionSpace:
    """Per-coordinate topology: ``line`` with truncation bounds or ``circle``."""

    topology: tuple[str, ...]
    bounds: tuple[tuple[float, float] | None, ...]

    def __post_init__(self):
        if len(self.topology) != len(self.bounds):
            raise ModelError("topology and bounds must have equal length")
        for tag, b in zip(self.topology, self.bounds):
            if tag == "line":
                if b is None or not b[0] < b[1]:
                    raise ModelError(f"line coordinate needs q_lo < q_hi, got {b}")
            elif tag == "circle":
                if b is not None and not np.allclose(b, (0.0, TWO_PI)):
                    raise ModelError("circle coordinates live on [0, 2pi)")
            else:
                raise ModelError(f"unknown topology tag {tag!r}")

    @property
    def n(self) -> int:
        return len(self.topology)

    def interval(self, k: int) -> tuple[float, float]:
        return (0.0, TWO_PI) if self.topology[k] == "circle" else tuple(self.bounds[k])

    def wrap(self, q: np.ndarray) -> np.ndarray:
        """Reduce circle coordinates modulo 2pi; line coordinates pass through."""
        q = np.array(q, dtype=float, copy=True)
        for k, tag in enumerate(self.topology):
            if tag == "circle":
                q[..., k] = np.mod(q[..., k], TWO_PI)
        return q


@dataclass(frozen=True)
class ModelSpec:
    n: int
    space: PositionSpace
    beta: float
    potential: Callable[[np.ndarray], np.ndarray]
    potential_grad: Callable[[np.ndarray], np.ndarray]
    potential_hess: Callable[[np.ndarray], np.ndarray]
    mass: Callable[[np.ndarray], np.ndarray]
    mass_grad: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    diffusion_grad: Callable[[np.ndarray], np.ndarray]
    family: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.beta > 0:
            raise ModelError(f"inverse temperature must be positive, got {self.beta}")
        if self.space.n != self.n:
            raise ModelError("space dimension does not match n")

    @property
    def temperature(self) -> float:
        return 1.0 / self.beta

    def damping(self, q) -> np.ndarray:
        """Damping matrix from the Einstein relation, F = beta D / 2."""
        return 0.5 * self.beta * self.diffusion(_as_positions(q, self.n))

    def with_beta(self, beta: float) -> "ModelSpec":
        """Copy with a different inverse temperature (line bounds are kept)."""
        params = dict(self.params)
        params["beta"] = beta
        return ModelSpec(
            self.n, self.space, beta, self.potential, self.potential_grad,
            self.potential_hess, self.mass, self.mass_grad, self.diffusion,
            self.diffusion_grad, self.family, params,
        )


def _as_positions(q, n: int) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 0 or q.shape[-1] != n:
        if n == 1:
            q = q[..., None]
        else:
            raise ModelError(f"positions need a trailing axis of length {n}")
    return q


def _const_matrix(value, n):
    mat = np.atleast_2d(np.asarray(value, dtype=float))
    if mat.shape == (1, 1) and n > 1:
        mat = mat[0, 0] * np.eye(n)
    if mat.shape != (n, n):
        raise ModelError(f"expected a scalar or {n}x{n} matrix, got shape {mat.shape}")
    return mat


def _constant_map(mat):
    n = mat.shape[0]

    def value(q):
        return np.broadcast_to(mat, q.shape[:-1] + (n, n)).copy()

    def grad(q):
        return np.zeros(q.shape[:-1] + (n, n, n))

    return value, grad


def line_bounds_for_gaussian(variance: float, mass_fraction_tail: float = 1e-12) -> float:
    """Half-width enclosing all but ``mass_fraction_tail`` of a centred normal law."""
    return float(np.sqrt(2.0 * variance) * erfcinv(mass_fraction_tail))


def harmonic(kappa=1.0, mass=1.0, diffusion=1.0, beta=1.0, n=1, bounds=None) -> ModelSpec:
    """Quadratic potential kappa |q|^2 / 2 on a truncated line, constant M and D."""
    kap = _const_matrix(kappa, n)
    m_mat = _const_matrix(mass, n)
    d_mat = _const_matrix(diffusion, n)
    if bounds is None:
        var = float(np.max(1.0 / np.linalg.eigvalsh(kap))) / beta
        half = line_bounds_for_gaussian(var)
        bounds = [(-half, half)] * n
    bounds = [tuple(map(float, b)) for b in np.broadcast_to(np.asarray(bounds, float), (n, 2))]
    space = PositionSpace(("line",) * n, tuple(bounds))
    m_val, m_grad = _constant_map(m_mat)
    d_val, d_grad = _constant_map(d_mat)

    def V(q):
        return 0.5 * np.einsum("...i,ij,...j->...", q, kap, q)

    def dV(q):
        return q @ kap.T

    def d2V(q):
        return np.broadcast_to(kap, q.shape[:-1] + (n, n)).copy()

    params = {"kappa": kappa, "mass": mass, "diffusion": diffusion, "beta": beta, "n": n}
    return ModelSpec(n, space, beta, _wrap1(V, n), _wrap1(dV, n), _wrap1(d2V, n),
                     _wrap1(m_val, n), _wrap1(m_grad, n), _wrap1(d_val, n), _wrap1(d_grad, n),
                     "harmonic", params)


def pendulum(v0=1.0, mass=1.0, diffusion=1.0, beta=1.0, n=1) -> ModelSpec:
    """Potential v0 * sum(1 - cos q_k) on the n-torus, constant M and D."""
    space = PositionSpace(("circle",) * n, (None,) * n)
    m_val, m_grad = _constant_map(_const_matrix(mass, n))
    d_val, d_grad = _constant_map(_const_matrix(diffusion, n))

    def V(q):
        return v0 * np.sum(1.0 - np.cos(q), axis=-1)

    def dV(q):
        return v0 * np.sin(q)

    def d2V(q):
        return v0 * np.cos(q)[..., None] * np.eye(n)

    params = {"v0": v0, "mass": mass, "diffusion": diffusion, "beta": beta, "n": n}
    return ModelSpec(n, space, beta, _wrap1(V, n), _wrap1(dV, n), _wrap1(d2V, n),
                     _wrap1(m_val, n), _wrap1(m_grad, n), _wrap1(d_val, n), _wrap1(d_grad, n),
                     "pendulum", params)


def variable_mass_pendulum(v0=1.0, m0=1.0, mu=0.5, diffusion=1.0, beta=1.0) -> ModelSpec:
    """One-degree pendulum with M(q) = m0 (1 + mu cos q), |mu| < 1."""
    if not abs(mu) < 1:
        raise ModelError("variable-mass pendulum requires |mu| < 1")
    if not m0 > 0:
        raise ModelError("m0 must be positive")
    space = PositionSpace(("circle",), (None,))
    d_val, d_grad = _constant_map(_const_matrix(diffusion, 1))

    def V(q):
        return v0 * (1.0 - np.cos(q[..., 0]))

    def dV(q):
        return v0 * np.sin(q)

    def d2V(q):
        return v0 * np.cos(q)[..., None]

    def M(q):
        return (m0 * (1.0 + mu * np.cos(q)))[..., None]

    def dM(q):
        return (-m0 * mu * np.sin(q))[..., None, None]

    params = {"v0": v0, "m0": m0, "mu": mu, "diffusion": diffusion, "beta": beta}
    return ModelSpec(1, space, beta, _wrap1(V, 1), _wrap1(dV, 1), _wrap1(d2V, 1),
                     _wrap1(M, 1), _wrap1(dM, 1), _wrap1(d_val, 1), _wrap1(d_grad, 1),
                     "variable_mass_pendulum", params)


def tabulated(q_table, V_table, M_table, D_table, topology="line", beta=1.0) -> ModelSpec:
    """One-degree model interpolated from tables by cubic splines.

    Circle tables cover [0, 2pi) without the duplicated endpoint; the periodic
    closure is appended internally. Line tables define the truncation bounds.
    """
    q_table = np.asarray(q_table, float)
    tabs = [np.asarray(t, float) for t in (V_table, M_table, D_table)]
    if any(t.shape != q_table.shape for t in tabs) or q_table.ndim != 1:
        raise ModelError("tables must be 1-D and of equal length")
    if np.any(np.diff(q_table) <= 0):
        raise ModelError("q_table must be strictly increasing")
    if topology == "circle":
        if q_table[0] < 0 or q_table[-1] >= TWO_PI:
            raise ModelError("circle tables must lie in [0, 2pi)")
        qs = np.concatenate([q_table, [q_table[0] + TWO_PI]])
        splines = [CubicSpline(qs, np.concatenate([t, t[:1]]), bc_type="periodic") for t in tabs]
        space = PositionSpace(("circle",), (None,))

        def arg(q):
            return np.mod(q[..., 0] - q_table[0], TWO_PI) + q_table[0]
    elif topology == "line":
        splines = [CubicSpline(q_table, t) for t in tabs]
        space = PositionSpace(("line",), ((float(q_table[0]), float(q_table[-1])),))

        def arg(q):
            return q[..., 0]
    else:
        raise ModelError(f"unknown topology {topology!r}")
    sV, sM, sD = splines
    dsV, dsM, dsD = (s.derivative() for s in splines)
    d2sV = sV.derivative(2)

    def V(q):
        return sV(arg(q))

    def dV(q):
        return dsV(arg(q))[..., None]

    def d2V(q):
        return d2sV(arg(q))[..., None, None]

    def M(q):
        return sM(arg(q))[..., None, None]

    def dM(q):
        return dsM(arg(q))[..., None, None, None]

    def Dm(q):
        return sD(arg(q))[..., None, None]

    def dD(q):
        return dsD(arg(q))[..., None, None, None]

    params = {"beta": beta, "topology": topology}
    model = ModelSpec(1, space, beta, _wrap1(V, 1), _wrap1(dV, 1), _wrap1(d2V, 1),
                      _wrap1(M, 1), _wrap1(dM, 1), _wrap1(Dm, 1), _wrap1(dD, 1),
                      "tabulated", params)
    check_model(model, q_table)
    return model


def _wrap1(fn, n):
    """Accept scalars or arrays without the trailing axis when n == 1."""

    def wrapped(q):
        return fn(_as_positions(q, n))

    wrapped.__name__ = getattr(fn, "__name__", "evaluator")
    return wrapped


FAMILIES = {
    "harmonic": harmonic,
    "pendulum": pendulum,
    "variable_mass_pendulum": variable_mass_pendulum,
    "tabulated": tabulated,
}


def build_model(family: str, **params) -> ModelSpec:
    try:
        factory = FAMILIES[family]
    except KeyError:
        raise ModelError(f"unknown model family {family!r}") from None
    return factory(**params)


def check_model(model: ModelSpec, q_nodes) -> None:
    """Assert M and D are positive definite at the given positions."""
    q = _as_positions(q_nodes, model.n)
    for name, fn in (("mass", model.mass), ("diffusion", model.diffusion)):
        lam = np.linalg.eigvalsh(fn(q))
        if np.min(lam) <= EIGEN_FLOOR:
            raise ModelError(f"{name} matrix not positive definite (min eigenvalue {np.min(lam):.3e})")


def _inverse_mass(model: ModelSpec, q: np.ndarray) -> np.ndarray:
    m = model.mass(q)
    cond = np.linalg.cond(m)
    if np.any(~np.isfinite(cond)) or np.any(cond > MASS_CONDITION_LIMIT):
        raise DegenerateMassError(f"mass matrix condition number {np.max(cond):.3e} exceeds limit")
    return np.linalg.inv(m)


def kinetic_energy(model: ModelSpec, q, p) -> np.ndarray:
    """T = p^T M(q)^{-1} p / 2."""
    q = _as_positions(q, model.n)
    p = _as_positions(p, model.n)
    minv = _inverse_mass(model, q)
    return 0.5 * np.einsum("...i,...ij,...j->...", p, minv, p)


def hamiltonian(model: ModelSpec, q, p) -> dict:
    """Potential, kinetic and total energy; H is always computed as V + T."""
    V = np.asarray(model.potential(_as_positions(q, model.n)), float)
    T = kinetic_energy(model, q, p)
    return {"V": V, "T": T, "H": V + T}


def momentum_from_velocity(model: ModelSpec, q, qdot) -> np.ndarray:
    q = _as_positions(q, model.n)
    qdot = _as_positions(qdot, model.n)
    _inverse_mass(model, q)
    return np.einsum("...ij,...j->...i", model.mass(q), qdot)


def velocity_from_momentum(model: ModelSpec, q, p) -> np.ndarray:
    q = _as_positions(q, model.n)
    p = _as_positions(p, model.n)
    return np.einsum("...ij,...j->...i", _inverse_mass(model, q), p)


def mass_sensitivity(model: ModelSpec, q, k: int) -> np.ndarray:
    """M^{-1} (dM/dq_k) M^{-1} for a 1-based coordinate index k."""
    if not 1 <= k <= model.n:
        raise ModelError(f"coordinate index {k} outside 1..{model.n}")
    q = _as_positions(q, model.n)
    minv = _inverse_mass(model, q)
    dm = model.mass_grad(q)[..., k - 1, :, :]
    out = minv @ dm @ minv
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def grad_hamiltonian(model: ModelSpec, q, p) -> dict:
    """Partial gradients of H; dq includes the centrifugal correction."""
    q = _as_positions(q, model.n)
    p = _as_positions(p, model.n)
    minv = _inverse_mass(model, q)
    dp = np.einsum("...ij,...j->...i", minv, p)
    # p^T M^{-1} dM_k M^{-1} p = dp^T dM_k dp
    centrifugal = np.einsum("...i,...kij,...j->...k", dp, model.mass_grad(q), dp)
    dq = model.potential_grad(q) - 0.5 * centrifugal
    return {"dq": dq, "dp": dp}


def damping_matrix(model: ModelSpec, q) -> np.ndarray:
    return model.damping(q)


def einstein_residual(model: ModelSpec, q, damping) -> float:
    """Max-norm of F - beta D / 2 for an independently supplied damping F."""
    q = _as_positions(q, model.n)
    F = np.asarray(damping, float)
    return float(np.max(np.abs(F - model.damping(q))))


def profiles_1d(model: ModelSpec, q: np.ndarray) -> dict:
    """Scalar V, V', V'', M, M', D on a 1-D array of positions (n = 1 only)."""
    if model.n != 1:
        raise ModelError("scalar profiles are only defined for one degree of freedom")
    qq = np.asarray(q, float)[:, None]
    return {
        "V": np.asarray(model.potential(qq), float),
        "dV": model.potential_grad(qq)[:, 0],
        "d2V": model.potential_hess(qq)[:, 0, 0],
        "M": model.mass(qq)[:, 0, 0],
        "dM": model.mass_grad(qq)[:, 0, 0, 0],
        "D": model.diffusion(qq)[:, 0, 0],
        "F": model.damping(qq)[:, 0, 0],
    }
