"""Sensitivities of the OPF minimizer via the differentiated KKT system.

Differentiating the first-order optimality conditions of the standard-form
QCQP at a primal/dual solution yields a linear system S Gamma = U with one
right-hand-side column per load parameter. Inactive inequalities are
dropped (their multiplier differentials vanish); strongly active ones keep
a complementarity row that pins the constraint differential to zero. The
primal block of any least-squares solution is the Jacobian of the
minimizer, which stays well defined even when S is singular (active
constraint gradients linearly dependent), because every null vector of S
has a zero primal block under strict complementarity and the second-order
condition.

Instances violating strict complementarity (a constraint with both value
and multiplier at zero) are flagged degenerate and yield no Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .opf import OPTIMAL, SolverOptions, solve_opf
from .qcqp import (
    PG_LOWER,
    PG_UPPER,
    QG_LOWER,
    QG_UPPER,
    QcqpModel,
    V_LOWER,
    V_UPPER,
    quad_eval,
)

SQUARED, MAGNITUDE, BOX = "squared", "magnitude", "box"


class DegenerateInstance(Exception):
    """Strict complementarity fails; sensitivities are not computed."""


class InconsistentSystem(Exception):
    """The least-squares residual of S Gamma = U exceeds tolerance."""


@dataclass
class Classification:
    inactive: np.ndarray  # c1: slack constraint, zero multiplier
    active: np.ndarray  # c2: binding constraint, positive multiplier
    degenerate: np.ndarray  # c3: both near zero

    @property
    def is_degenerate(self):
        return len(self.degenerate) > 0


def classify_constraints(g, mu, tau_g, tau_mu):
    """Split inequality indices into the three strict-complementarity cases."""
    g = np.asarray(g, dtype=float)
    mu = np.asarray(mu, dtype=float)
    tau_g = np.broadcast_to(np.asarray(tau_g, dtype=float), g.shape)
    if np.any(tau_g <= 0) or tau_mu <= 0:
        raise ValueError("classification thresholds must be positive")
    small_mu = mu < tau_mu
    near_zero = np.abs(g) <= tau_g
    c1 = np.flatnonzero(small_mu & (g < -tau_g))
    c2 = np.flatnonzero(~small_mu & near_zero)
    rest = np.setdiff1d(np.arange(len(g)), np.concatenate([c1, c2]))
    return Classification(c1, c2, rest)


def default_thresholds(model: QcqpModel, mu):
    tau_mu = 1e-6 * max(1.0, float(np.max(np.abs(mu), initial=0.0)))
    scale = np.where(np.isfinite(model.f), np.maximum(1.0, np.abs(model.f)), 1.0)
    tau_g = 1e-6 * scale
    return tau_g, tau_mu


def gradient_variant(model: QcqpModel, m, v, mode=SQUARED):
    """Gradient (and Hessian) of inequality m under the chosen posing.

    Returns (grad_v, grad_xg, hess_vv). 'squared' is the native standard
    form. 'magnitude' re-poses voltage limits on |v_n| instead of |v_n|^2.
    'box' re-poses generator limits as bounds on the dispatch variables, so
    the voltage gradient vanishes and the dispatch gradient is a signed
    canonical vector.
    """
    kind, pos, _ = model.ineq_map[m]
    nb, ng = model.nb, model.ng
    M = model.M_all[m]
    if mode == SQUARED:
        return 2.0 * M @ v, np.zeros(2 * ng), 2.0 * M
    if mode == BOX:
        if kind not in (PG_UPPER, PG_LOWER, QG_UPPER, QG_LOWER):
            raise ValueError("box variant applies to generator limits only")
        grad_xg = np.zeros(2 * ng)
        j = pos if kind in (PG_UPPER, PG_LOWER) else ng + pos
        grad_xg[j] = 1.0 if kind in (PG_UPPER, QG_UPPER) else -1.0
        return np.zeros(2 * nb), grad_xg, np.zeros((2 * nb, 2 * nb))
    if mode == MAGNITUDE:
        if kind not in (V_UPPER, V_LOWER):
            raise ValueError("magnitude variant applies to voltage limits only")
        sign = 1.0 if kind == V_UPPER else -1.0
        Mv = sign * M  # voltage selector, PSD
        s = float(v @ Mv @ v)
        if s < 1e-12:
            raise ValueError("voltage magnitude too small for magnitude variant")
        r = np.sqrt(s)
        grad_v = sign * (Mv @ v) / r
        hess = sign * (Mv / r - np.outer(Mv @ v, Mv @ v) / r**3)
        return grad_v, np.zeros(2 * ng), hess
    raise ValueError(f"unknown gradient variant {mode!r}")


@dataclass
class KktDiffSystem:
    S: np.ndarray
    U: np.ndarray
    n_primal: int
    active_set: np.ndarray
    degenerate_set: np.ndarray
    Z: np.ndarray = field(default=None, repr=False)
    L_lam: np.ndarray = field(default=None, repr=False)
    M_mu: np.ndarray = field(default=None, repr=False)


@dataclass
class SensitivityRecord:
    j_full: np.ndarray | None  # d[v; x_g]/d theta, (2(Nb+Ng), 2Nl)
    j_out: np.ndarray | None  # reduced output Jacobian over selected inputs
    j_dual: np.ndarray | None  # d[lambda; mu_active]/d theta
    rank_deficient: bool
    degenerate: bool
    residual: float
    active_set: list
    dual_caveat: bool = False  # dual sensitivities unreliable (singular S)


def assemble_system(model: QcqpModel, sol, classification, variant_modes=None):
    """Build S and U of the reduced differentiated KKT system.

    variant_modes optionally maps inequality index -> gradient variant mode
    for mimicking label solvers that pose constraints differently.
    """
    if sol.status != OPTIMAL:
        raise ValueError("sensitivity assembly requires an optimal solution")
    if classification.is_degenerate:
        raise DegenerateInstance(
            f"constraints {classification.degenerate.tolist()} violate strict complementarity"
        )
    variant_modes = variant_modes or {}
    nb, ng = model.nb, model.ng
    N = 2 * (nb + ng)
    L = model.n_eq
    v, mu = sol.v, sol.mu
    active = classification.active

    # equality Jacobian, reference row included
    Jh = np.hstack([2.0 * np.einsum("lij,j->li", model.L_all, v, optimize=True),
                    np.vstack([-model.A, np.zeros((1, 2 * ng))])])
    # the quadratic angle reference has a vanishing gradient at its own root,
    # which would leave the slack imaginary voltage unpinned; differentiate
    # the equivalent linear constraint v_imag[slack] = 0 instead
    Jh[-1, :] = 0.0
    Jh[-1, nb + model.network.slack_index] = 1.0

    grads, hess_sum = [], np.zeros((2 * nb, 2 * nb))
    hess_sum += 2.0 * np.einsum("l,lij->ij", sol.lam, model.L_all, optimize=True)
    finite = np.isfinite(model.f)
    act_set = set(active.tolist())
    for m in np.flatnonzero(finite):
        mode = variant_modes.get(m, SQUARED)
        if m in act_set or mu[m] != 0.0:
            gv, gx, hv = gradient_variant(model, m, v, mode)
            hess_sum += mu[m] * hv
            if m in act_set:
                grads.append(np.concatenate([gv, gx]))
    Jg = np.array(grads).reshape(len(active), N)

    Hxx = np.zeros((N, N))
    Hxx[: 2 * nb, : 2 * nb] = hess_sum

    na = len(active)
    dim = N + L + na
    S = np.zeros((dim, dim))
    S[:N, :N] = Hxx
    S[:N, N : N + L] = Jh.T
    S[:N, N + L :] = Jg.T
    S[N : N + L, :N] = Jh
    S[N + L :, :N] = mu[active, None] * Jg
    # D(g) block is exactly zero on the retained (strongly active) rows

    nl2 = model.B.shape[1]
    U = np.zeros((dim, nl2))
    U[N : N + 2 * nb, :] = model.B
    U[N + L :, :] = mu[active, None] * model.d[active]

    Z = 0.5 * hess_sum  # matches sum(lam*L) + sum(mu*M) in the squared posing
    L_lam = np.einsum("lij,j->il", model.L_all, v, optimize=True)
    M_mu = np.einsum("mij,j->im", model.M_all[active], v, optimize=True) if na else None
    return KktDiffSystem(S, U, N, active, classification.degenerate, Z, L_lam, M_mu)


def solve_sensitivities(sys: KktDiffSystem, rank_rtol=1e-10, res_rtol=1e-6):
    """Minimum-norm solve of S Gamma = U; primal block is the Jacobian."""
    if len(sys.degenerate_set):
        raise DegenerateInstance("degenerate system cannot be solved")
    gamma, _, rank, svals = np.linalg.lstsq(sys.S, sys.U, rcond=rank_rtol)
    residual = float(np.linalg.norm(sys.S @ gamma - sys.U))
    tol = res_rtol * max(1.0, float(np.linalg.norm(sys.U)))
    if residual > tol:
        raise InconsistentSystem(f"residual {residual:.3e} exceeds {tol:.3e}")
    deficient = rank < sys.S.shape[0]
    return SensitivityRecord(
        j_full=gamma[: sys.n_primal],
        j_out=None,
        j_dual=gamma[sys.n_primal :],
        rank_deficient=bool(deficient),
        degenerate=False,
        residual=residual,
        active_set=sys.active_set.tolist(),
        dual_caveat=bool(deficient),
    )


def smallest_singular_ratio(S):
    svals = np.linalg.svd(S, compute_uv=False)
    return float(svals[-1] / svals[0])


def nullspace(S, rtol=1e-10):
    """Orthonormal basis (rows) of the null space of a square matrix."""
    _, svals, vt = np.linalg.svd(S)
    return vt[svals < rtol * svals[0]]


def vmag_chain_rule(v_complex_n, dvr_rows, dvi_rows):
    """d|v_n|/d theta from the real/imaginary sensitivity rows."""
    vr, vi = v_complex_n.real, v_complex_n.imag
    mag = np.hypot(vr, vi)
    if mag < 1e-6:
        raise ValueError("voltage magnitude below 1e-6, chain rule undefined")
    return (vr * dvr_rows + vi * dvi_rows) / mag


def reduced_output(model: QcqpModel, v, x_g):
    """[p_g for non-slack generators; |v_n| at all generator buses]."""
    nb, ng = model.nb, model.ng
    slack = model.network.slack_index
    gidx = model.network.gen_bus_indices
    p = [x_g[j] for j, b in enumerate(gidx) if b != slack]
    vm = [np.hypot(v[b], v[nb + b]) for b in gidx]
    return np.array(p + vm)


def output_jacobian(model: QcqpModel, v, j_full):
    """Jacobian of the reduced output, columns restricted to selected inputs."""
    nb, ng = model.nb, model.ng
    slack = model.network.slack_index
    gidx = model.network.gen_bus_indices
    rows = []
    for j, b in enumerate(gidx):
        if b != slack:
            rows.append(j_full[2 * nb + j])
    for b in gidx:
        vc = complex(v[b], v[nb + b])
        rows.append(vmag_chain_rule(vc, j_full[b], j_full[nb + b]))
    return np.array(rows)[:, model.selected]


def sensitivity_record(model: QcqpModel, sol, variant_modes=None,
                       rank_rtol=1e-10, res_rtol=1e-6):
    """Classify, assemble, and solve; degenerate instances yield a value-only record."""
    from .qcqp import eval_constraints

    _, g = eval_constraints(model, sol.v, sol.x_g, sol.theta)
    tau_g, tau_mu = default_thresholds(model, sol.mu)
    cls = classify_constraints(g, sol.mu, tau_g, tau_mu)
    if cls.is_degenerate:
        return SensitivityRecord(None, None, None, False, True, np.nan,
                                 cls.active.tolist())
    sys = assemble_system(model, sol, cls, variant_modes)
    try:
        rec = solve_sensitivities(sys, rank_rtol, res_rtol)
    except InconsistentSystem:
        return SensitivityRecord(None, None, None, True, True, np.nan,
                                 cls.active.tolist())
    rec.j_out = output_jacobian(model, sol.v, rec.j_full)
    return rec


def finite_difference_jacobian(model: QcqpModel, theta, base_sol, eps=1e-5,
                               tol=1e-10, columns=None, max_iter=200):
    """Central-difference Jacobian of the full primal vector by OPF re-solves.

    Independent oracle for the KKT-based sensitivities; each column costs
    two warm-started solves at the tightened tolerance.
    """
    theta = np.asarray(theta, dtype=float)
    cols = range(len(theta)) if columns is None else columns
    N = 2 * (model.nb + model.ng)
    out = np.zeros((N, len(theta)))
    for p in cols:
        xs = []
        for sgn in (+1.0, -1.0):
            th = theta.copy()
            th[p] += sgn * eps
            opts = SolverOptions(tol_kkt=tol, max_iter=max_iter,
                                 warm_start=(base_sol.v, base_sol.x_g),
                                 warm_duals=(base_sol.lam, base_sol.mu))
            s = solve_opf(model, th, opts)
            if s.status != OPTIMAL:
                raise RuntimeError(f"FD re-solve failed at column {p} ({s.status})")
            xs.append(np.concatenate([s.v, s.x_g]))
        out[:, p] = (xs[0] - xs[1]) / (2.0 * eps)
    return out
