"""Linearisation of the log-ratio dynamics about equilibrium on a coarse grid.

The linearised density operator is written as ``T + S`` acting on the
log-ratio ``theta``: ``T`` is the Liouville (transport) part and ``S`` the
momentum Ornstein-Uhlenbeck part. ``T`` is built from a discrete stream
function of ``f*`` so that ``W_f T`` is antisymmetric and ``T 1 = 0``
(exact stationarity and exact skew-adjointness). A consistency correction
makes ``T`` reproduce the independent central difference of the position
transport on position-only fields. From ``T`` and ``S`` the block operators

    Xi  : eta-space -> xi-space,   Xi = A T
    Phi : xi-space  -> eta-space,  Phi = -Xi^dagger  (weighted adjoint)
    Psi : eta-space -> eta-space,  Psi = T + S - lift Xi

are assembled, where ``A`` averages over momentum against ``h*`` and
``lift`` copies a position field onto every momentum node.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .equilibrium import EquilibriumState, build_equilibrium
from .errors import GridError, NumericalError
from .grid import PhaseGrid, make_grid
from .entropy import log_ratio_fields
from .model import ModelSpec, profiles_1d

log = logging.getLogger(__name__)

MATRIX_CAP = 2200
DEFAULT_COARSE = (32, 32)
COARSE_P_SIGMAS = 7.0
ZERO_CUT = 1e-8      # |lambda| < ZERO_CUT * rho treated as a deflated zero
N_PAIR = 30


@dataclass
class LinearizedOperator:
    grid: PhaseGrid
    Xi: np.ndarray          # (nq, n)
    Xi_formula: np.ndarray  # (nq, n), central-difference discretisation of the Xi formula
    Xi_dagger: np.ndarray   # (n, nq)
    Phi_indep: np.ndarray   # (n, nq), central-difference -u d/dq
    Psi: np.ndarray         # (n, n)
    Lam: np.ndarray         # (nq + n, nq + n)
    T: np.ndarray
    S: np.ndarray
    f_star: np.ndarray      # nodal equilibrium density, flattened
    w_g: np.ndarray         # position quadrature weights g* dq
    w_f: np.ndarray         # phase quadrature weights f* dq dp
    A: np.ndarray           # (nq, n) momentum average against h*
    lift: np.ndarray        # (n, nq)
    P_g: np.ndarray
    P_f: np.ndarray

    @property
    def Phi(self) -> np.ndarray:
        return -self.Xi_dagger

    @property
    def projector(self) -> np.ndarray:
        return sla.block_diag(self.P_g, self.P_f)

    def density_operator(self) -> np.ndarray:
        """Discrete linearised density generator diag(f*) (T + S) diag(1/f*)."""
        fs = self.f_star
        return fs[:, None] * (self.T + self.S) / fs[None, :]


def coarse_grid(model: ModelSpec, nq: int = DEFAULT_COARSE[0], np_: int = DEFAULT_COARSE[1]) -> PhaseGrid:
    """Grid for spectral work: ``COARSE_P_SIGMAS`` thermal widths in momentum."""
    m_max = float(np.max(profiles_1d(model, np.linspace(*model.space.interval(0), 257))["M"]))
    return make_grid(model, nq, np_, p_max=COARSE_P_SIGMAS * np.sqrt(model.temperature * m_max))


def _joint_weight(model: ModelSpec, q: np.ndarray, p: np.ndarray, shift: float) -> np.ndarray:
    prof = profiles_1d(model, np.atleast_1d(q).ravel())
    V = prof["V"].reshape(np.shape(q))
    M = prof["M"].reshape(np.shape(q))
    return np.exp(-model.beta * (V - shift + 0.5 * p**2 / M))


def _central_q(nq: int, dq: float, periodic: bool) -> sp.csr_matrix:
    """Central first difference; skew with zero extension on a line."""
    if periodic:
        return sp.diags([1, -1, 1, -1], [1, -1, 1 - nq, nq - 1], shape=(nq, nq), format="csr") / (2 * dq)
    return sp.diags([1, -1], [1, -1], shape=(nq, nq), format="csr") / (2 * dq)


def _antisymmetric(rows, cols, vals, n) -> np.ndarray:
    J = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).toarray()
    return J - J.T


def assemble_linearized_operators(model: ModelSpec, eq: EquilibriumState | None = None,
                                  grid: PhaseGrid | None = None) -> LinearizedOperator:
    if model.n != 1:
        raise GridError("spectral assembly is implemented for one degree of freedom")
    grid = grid or (eq.grid if eq is not None else coarse_grid(model))
    nq, np_ = grid.shape
    n = nq * np_
    if n + nq > MATRIX_CAP:
        raise GridError(f"block operator dimension {n + nq} exceeds the cap {MATRIX_CAP}")
    if min(nq, np_) < 5:
        raise GridError("grid too coarse for the spectral stencils")
    q, p, dq, dp, beta = grid.q, grid.p, grid.dq, grid.dp, model.beta
    periodic = grid.periodic
    vmin = float(np.min(profiles_1d(model, q)["V"]))

    Q, P = grid.mesh()
    fs_raw = _joint_weight(model, Q, P, vmin)
    Zd = float(fs_raw.sum() * grid.cell)

    def fstar(qq, pp):
        return _joint_weight(model, qq, pp, vmin) / Zd

    fs = fs_raw / Zd
    pc = np.concatenate([p - 0.5 * dp, [p[-1] + 0.5 * dp]])
    idx = np.arange(n).reshape(nq, np_)

    # q-edges (i, j) -- (i+1, j): stream-function difference across the edge in p
    iq = np.arange(nq) if periodic else np.arange(nq - 1)
    qc = q[iq] + 0.5 * dq
    corner = fstar(np.repeat(qc[:, None], np_ + 1, 1), np.broadcast_to(pc, (iq.size, np_ + 1)))
    wq = np.diff(corner, axis=1) / (beta * dp) / (2 * dq)
    rq = idx[iq].ravel()
    cq = idx[(iq + 1) % nq].ravel()

    # p-edges (i, j) -- (i, j+1)
    pin = pc[1:-1]
    hi = fstar(np.repeat((q + 0.5 * dq)[:, None], np_ - 1, 1), np.broadcast_to(pin, (nq, np_ - 1)))
    lo = fstar(np.repeat((q - 0.5 * dq)[:, None], np_ - 1, 1), np.broadcast_to(pin, (nq, np_ - 1)))
    wp = -(hi - lo) / (beta * dq) / (2 * dp)
    rp = idx[:, :-1].ravel()
    cp = idx[:, 1:].ravel()

    J = _antisymmetric(np.concatenate([rq, rp]), np.concatenate([cq, cp]),
                       np.concatenate([wq.ravel(), wp.ravel()]), n)
    fsv = fs.ravel()
    T = J / fsv[:, None]

    # momentum OU part, weighted by f* on the p-faces, zero flux at the ends
    D = profiles_1d(model, q)["D"]
    face = 0.5 * D[:, None] * fstar(np.repeat(q[:, None], np_ - 1, 1),
                                    np.broadcast_to(pin, (nq, np_ - 1))) / dp**2
    face = face.ravel()
    Sp = sp.coo_matrix((np.concatenate([face, face, -face, -face]),
                        (np.concatenate([rp, cp, rp, cp]), np.concatenate([cp, rp, rp, cp]))),
                       shape=(n, n)).toarray()
    S = Sp / fsv[:, None]

    g_star = fs.sum(axis=1) * dp
    h_star = fs / (g_star[:, None])
    A = np.zeros((nq, n))
    for i in range(nq):
        A[i, idx[i]] = h_star[i] * dp
    lift = np.kron(np.eye(nq), np.ones((np_, 1)))
    w_g = g_star * dq
    w_f = fsv * grid.cell

    M = profiles_1d(model, q)["M"]
    u = (P / M[:, None]).ravel()
    Phi_indep = -u[:, None] * (lift @ _central_q(nq, dq, periodic).toarray())

    # consistency correction: keeps W_f T antisymmetric and T 1 = 0 while making
    # T lift agree with the central position transport
    De = Phi_indep - T @ lift
    De_dag = (1.0 / w_g)[:, None] * De.T * w_f[None, :]
    T = T + De @ A - lift @ De_dag

    Xi = A @ T
    first_moment = np.zeros((nq, n))
    for i in range(nq):
        first_moment[i, idx[i]] = p * h_star[i] * dp / M[i]
    dq_op = _central_q(nq, dq, periodic)
    Xi_formula = -(dq_op @ (g_star[:, None] * first_moment)) / g_star[:, None]
    Xi_dag = (1.0 / w_f)[:, None] * Xi.T * w_g[None, :]
    Psi = T + S - lift @ Xi
    Lam = np.block([[np.zeros((nq, nq)), Xi], [-Xi_dag, Psi]])
    P_g = np.eye(nq) - np.outer(np.ones(nq), w_g) / w_g.sum()
    P_f = np.eye(n) - lift @ A
    return LinearizedOperator(grid, Xi, Xi_formula, Xi_dag, Phi_indep, Psi, Lam, T, S, fsv, w_g, w_f, A, lift,
                              P_g, P_f)


def _weighted_norm2(Mat: np.ndarray, w_out: np.ndarray, w_in: np.ndarray) -> float:
    return float(np.linalg.norm(np.sqrt(w_out)[:, None] * Mat / np.sqrt(w_in)[None, :], 2))


def adjointness_audit(ops: LinearizedOperator, n_probes: int = 100, seed: int = 0) -> dict:
    """Weighted adjoint defects and the sign of the Phi-Xi quadratic form."""
    xi_norm = _weighted_norm2(ops.Xi, ops.w_g, ops.w_f)
    exact = _weighted_norm2(ops.Phi + ops.Xi_dagger, ops.w_f, ops.w_g) / xi_norm
    # Phi and Xi each discretised from their own formula with central differences
    xf_dag = (1.0 / ops.w_f)[:, None] * ops.Xi_formula.T * ops.w_g[None, :]
    indep = _weighted_norm2(ops.Phi_indep + xf_dag, ops.w_f, ops.w_g) / xi_norm
    formula = _weighted_norm2(ops.Xi - ops.Xi_formula, ops.w_g, ops.w_f) / xi_norm
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((ops.w_f.size, n_probes))
    Xpsi = ops.Xi @ psi
    xnorm = np.einsum("i,ik,ik->k", ops.w_g, Xpsi, Xpsi)
    form_exact = np.einsum("i,ik,ik->k", ops.w_f, ops.Phi @ Xpsi, psi)
    form_indep = np.einsum("i,ik,ik->k", ops.w_f, ops.Phi_indep @ Xpsi, psi)
    scale = np.maximum(xnorm, np.finfo(float).tiny)
    WXX = ops.w_f[:, None] * (ops.Xi_dagger @ ops.Xi)
    return {
        "adjoint_defect_exact": exact,
        "adjoint_defect_independent": indep,
        "xi_formula_defect": formula,
        "form_identity_max": float(np.max(np.abs(form_exact + xnorm) / scale)),
        "form_max_exact": float(np.max(form_exact / scale)),
        "form_max_independent": float(np.max(form_indep / scale)),
        "form_nonpositive": bool(np.all(form_exact <= 1e-12 * scale) and np.all(form_indep <= 0)),
        "xi_dagger_xi_symmetry": float(np.linalg.norm(WXX - WXX.T) / np.linalg.norm(WXX)),
        "projector_commutation": float(
            np.linalg.norm(ops.projector @ ops.Lam @ ops.projector - ops.Lam @ ops.projector)
            / np.linalg.norm(ops.Lam)),
    }


@dataclass
class SpectrumReport:
    eig_lambda: np.ndarray
    eig_density: np.ndarray
    eig_flux_form: np.ndarray
    rho: float
    pairs: list[dict]
    flux_form_pairs: list[dict]
    quad_residuals: np.ndarray
    max_real_ratio: float
    n_unstable: int
    psi_zero_max_real: float
    psi_zero_sv_mismatch: float
    extras: dict = field(default_factory=dict)

    def slowest_pair_error(self, k: int = 10) -> float:
        return max(p["rel_distance"] for p in self.pairs[:k])

    def summary(self) -> dict:
        return {
            "rho": self.rho,
            "max_pair_rel_distance_10": self.slowest_pair_error(10),
            "max_flux_form_rel_distance_10": max(p["rel_distance"] for p in self.flux_form_pairs[:10]),
            "quad_residual_max": float(self.quad_residuals.max(initial=0.0)),
            "max_real_over_rho": self.max_real_ratio,
            "n_unstable": self.n_unstable,
            "psi_zero_max_real_over_rho": self.psi_zero_max_real,
            "psi_zero_sv_mismatch_over_rho": self.psi_zero_sv_mismatch,
            **self.extras,
        }


def _eig(M: np.ndarray, name: str, vectors: bool = False):
    try:
        return np.linalg.eig(M) if vectors else np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        path = f"{name}_matrix.npy"
        np.save(path, M)
        raise NumericalError(f"eigensolver failed for {name}; matrix dumped to {path}") from exc


def _slowest(ev: np.ndarray, rho: float, k: int) -> np.ndarray:
    ev = ev[np.abs(ev) > ZERO_CUT * rho]
    order = np.lexsort((ev.imag, -ev.real))
    return ev[order][:k]


def greedy_pairing(a: np.ndarray, b: np.ndarray) -> list[dict]:
    """Greedy nearest-neighbour bipartite matching; entries follow the order of ``a``."""
    dist = np.abs(a[:, None] - b[None, :])
    used_a, used_b = set(), set()
    match = {}
    for flat in np.argsort(dist, axis=None):
        i, j = np.unravel_index(flat, dist.shape)
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        match[int(i)] = int(j)
        if len(match) == min(a.size, b.size):
            break
    out = []
    for i in sorted(match):
        j = match[i]
        out.append({"pair_id": i, "a": complex(a[i]), "b": complex(b[j]),
                    "rel_distance": float(abs(a[i] - b[j]) / abs(a[i]))})
    return out


def nearest_pairing(a: np.ndarray, b: np.ndarray) -> list[dict]:
    """Independent nearest neighbour in ``b`` for every entry of ``a``."""
    out = []
    for i, val in enumerate(a):
        j = int(np.argmin(np.abs(b - val)))
        out.append({"pair_id": i, "a": complex(val), "b": complex(b[j]),
                    "rel_distance": float(abs(val - b[j]) / abs(val))})
    return out


def flux_form_density_operator(model: ModelSpec, grid: PhaseGrid) -> np.ndarray:
    """Transpose of the central-difference generator, the plain discretisation
    of the density operator on the same grid (diagnostic comparison)."""
    nq, np_ = grid.shape
    prof = profiles_1d(model, grid.q)
    Q, P = grid.mesh()
    M = prof["M"][:, None]
    u = (P / M).ravel()
    dH = (prof["dV"][:, None] - 0.5 * P**2 * prof["dM"][:, None] / M**2).ravel()
    F = np.broadcast_to(prof["F"][:, None], (nq, np_)).ravel()
    Dv = np.broadcast_to(prof["D"][:, None], (nq, np_)).ravel()
    Iq, Ip = sp.identity(nq), sp.identity(np_)
    Dq = sp.kron(_central_q(nq, grid.dq, grid.periodic), Ip)
    Dp = sp.kron(Iq, _central_q(np_, grid.dp, False))
    Dpp = sp.kron(Iq, sp.diags([1, -2, 1], [-1, 0, 1], shape=(np_, np_)) / grid.dp**2)
    gen = sp.diags(u) @ Dq - sp.diags(dH + F * u) @ Dp + 0.5 * sp.diags(Dv) @ Dpp
    return gen.T.toarray()


def spectrum(ops: LinearizedOperator, model: ModelSpec, n_pair: int = N_PAIR) -> SpectrumReport:
    nq = ops.grid.q.size
    Pr = ops.projector
    lam, vecs = _eig(Pr @ ops.Lam @ Pr, "lambda", vectors=True)
    rho = float(np.max(np.abs(lam)))
    dens = _eig(ops.density_operator(), "density")
    flux = _eig(flux_form_density_operator(model, ops.grid), "flux_form")

    keep = np.abs(lam) > ZERO_CUT * rho
    res = []
    for l, v in zip(lam[keep], vecs[:, keep].T):
        psi = v[nq:]
        nrm = float(np.sum(ops.w_f * np.abs(psi) ** 2))
        xp = ops.Xi @ psi
        mid = np.sum(ops.w_f * np.conj(psi) * (ops.Psi @ psi))
        r = nrm * l**2 - mid * l + np.sum(ops.w_g * np.abs(xp) ** 2)
        res.append(abs(r) / (nrm * abs(l) ** 2))
    res = np.array(res)

    s_lam = _slowest(lam, rho, n_pair)
    pairs = greedy_pairing(s_lam, _slowest(dens, rho, n_pair))
    fpairs = nearest_pairing(s_lam, _slowest(flux, rho, 3 * n_pair))
    pairs.sort(key=lambda d: d["pair_id"])
    fpairs.sort(key=lambda d: d["pair_id"])

    # with Psi removed the flow is skew-adjoint: eigenvalues are +-i sigma(Xi)
    Lz = ops.Lam.copy()
    Lz[nq:, nq:] = 0.0
    ez = _eig(Pr @ Lz @ Pr, "lambda_psi_zero")
    sv = np.linalg.svd(np.sqrt(ops.w_g)[:, None] * ops.Xi / np.sqrt(ops.w_f)[None, :] @ ops.P_f,
                       compute_uv=False)
    # compare full sorted lists; deflated directions pair with zero singular values
    imag = np.sort(np.abs(ez.imag))[::-1]
    ref = np.zeros_like(imag)
    both = np.sort(np.concatenate([sv, sv]))[::-1][:imag.size]
    ref[:both.size] = both
    mismatch = float(np.max(np.abs(imag - ref)) / rho)
    max_real = float(np.max(lam.real) / rho)
    return SpectrumReport(
        eig_lambda=lam, eig_density=dens, eig_flux_form=flux, rho=rho, pairs=pairs,
        flux_form_pairs=fpairs, quad_residuals=res, max_real_ratio=max_real,
        n_unstable=int(np.count_nonzero(lam.real > 1e-6 * rho)),
        psi_zero_max_real=float(np.max(np.abs(ez.real)) / rho), psi_zero_sv_mismatch=mismatch)


def spectrum_rows(report: SpectrumReport) -> list[tuple[float, float, str, int]]:
    """(re, im, source, pair_id) rows; pair_id is -1 for unpaired eigenvalues."""
    rows = []
    for source, ev, pairs, key in (("lambda", report.eig_lambda, report.pairs, "a"),
                                   ("density", report.eig_density, report.pairs, "b"),
                                   ("flux_form", report.eig_flux_form, report.flux_form_pairs, "b")):
        ids = {p[key]: p["pair_id"] for p in pairs}
        order = np.lexsort((ev.imag, -ev.real))
        for val in ev[order]:
            pid = ids.get(complex(val), -1)
            rows.append((float(val.real), float(val.imag), source, int(pid)))
    return rows


# ------------------------------------------------------- quadratic entropies

def quadratic_entropy_approx(f, eq: EquilibriumState) -> dict:
    """Second-order entropy approximations and their residuals."""
    fields = log_ratio_fields(f, eq)
    grid = f.grid
    fs = eq.f_star
    QG = 0.5 * float(np.sum(eq.g_star * fields.xi**2) * grid.dq)
    QH = 0.5 * float(np.sum(fs * fields.eta**2) * grid.cell)
    cross = float(np.sum(fs * fields.xi[:, None] * fields.eta) * grid.cell)
    QF = QG + QH + cross
    mask = fields.mask
    F = float(np.sum(np.where(mask, f.values * fields.theta, 0.0)) * grid.cell)
    H = float(np.sum(np.where(mask, f.values * fields.eta, 0.0)) * grid.cell)
    G = float(np.sum(fields.g * fields.xi) * grid.dq)
    theta_max = float(np.max(np.abs(fields.theta[mask]))) if mask.any() else 0.0
    if theta_max > 1.0:
        log.warning("state far from equilibrium (max|theta| = %.3g); quadratic forms out of range",
                    theta_max)
    return {"Q_G": QG, "Q_H": QH, "Q_F": QF, "cross": cross, "G": G, "H": H, "F": F,
            "res_G": G - QG, "res_H": H - QH, "res_F": F - QF, "theta_max": theta_max}


def smooth_perturbation(model: ModelSpec, grid: PhaseGrid, eq: EquilibriumState, amplitude: float
                        ) -> np.ndarray:
    """f* exp(a s) / norm with a bounded smooth s that perturbs both the
    position law and the conditional momentum law asymmetrically."""
    Q, P = grid.mesh()
    M = profiles_1d(model, grid.q)["M"][:, None]
    sig = np.sqrt(model.temperature * M)
    if grid.periodic:
        sq = np.cos(Q) + 0.5 * np.sin(2 * Q)
        mod = 1.0 + 0.5 * np.sin(Q)
    else:
        width = 0.25 * (grid.q_bounds[1] - grid.q_bounds[0])
        sq = np.tanh(Q / width) + 0.5 / np.cosh(Q / width) ** 2
        mod = 1.0 + 0.5 * np.tanh(Q / width)
    x = P / sig
    sp_ = (np.tanh(x) + 1.0 / np.cosh(x) ** 2) * mod
    f = eq.f_star * np.exp(amplitude * (sq + sp_))
    return f / (f.sum() * grid.cell)


def quadratic_scaling(model: ModelSpec, eq: EquilibriumState, amplitude: float = 0.1) -> dict:
    """Residual ratios residual(a) / residual(a/2); third-order scaling gives 8."""
    from .grid import DensityField
    grid = eq.grid
    out = {}
    r1 = quadratic_entropy_approx(DensityField(smooth_perturbation(model, grid, eq, amplitude), grid), eq)
    r2 = quadratic_entropy_approx(DensityField(smooth_perturbation(model, grid, eq, amplitude / 2), grid),
                                  eq)
    for key in ("res_G", "res_H", "res_F"):
        out[key] = (r1[key], r2[key], r1[key] / r2[key] if r2[key] else float("inf"))
    return out


def default_spectral_setup(model: ModelSpec, nq: int = DEFAULT_COARSE[0], np_: int = DEFAULT_COARSE[1]):
    grid = coarse_grid(model, nq, np_)
    eq = build_equilibrium(model, grid)
    return assemble_linearized_operators(model, eq, grid), eq
