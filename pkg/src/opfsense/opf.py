"""Primal-dual interior-point solver for the non-convex OPF QCQP.

The slack bus imaginary voltage is eliminated as a variable (equivalent to
the quadratic angle-reference constraint, whose KKT gradients agree), and
the corresponding equality multiplier is restored on output so callers see
the full standard-form dual vector.

The method is a plain infeasible-start primal-dual IPM with slack variables
on the inequalities, a fixed centering factor (sigma = 0.2), a 0.995
fraction-to-boundary rule, and inertia-style diagonal regularization with a
doubling delta when the Newton system is singular. Deterministic by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qcqp import QcqpModel, quad_eval, quad_grad

OPTIMAL, INFEASIBLE, MAX_ITER = "optimal", "infeasible", "max_iter"


@dataclass
class SolverOptions:
    tol_kkt: float = 1e-8
    max_iter: int = 150
    sigma: float = 0.2  # centering factor per iteration
    ftb: float = 0.995  # fraction-to-boundary
    gamma0: float = 0.1  # initial barrier parameter
    delta0: float = 1e-8  # initial inertia-correction shift
    polish: bool = True  # active-set Newton refinement after the IPM phase
    warm_start: tuple | None = None  # (v_full 2Nb, x_g)
    warm_duals: tuple | None = None  # (lambda 2Nb, mu over finite ineqs)

    def __post_init__(self):
        if self.tol_kkt <= 0:
            raise ValueError("tol_kkt must be positive")


@dataclass
class OpfSolution:
    v: np.ndarray  # 2Nb real voltage vector
    x_g: np.ndarray  # 2Ng generator vector [p_g; q_g]
    lam: np.ndarray  # L equality duals (reference row restored)
    mu: np.ndarray  # M inequality duals, >= 0
    objective: float
    status: str
    iterations: int
    kkt: tuple  # (stationarity, feasibility, complementarity) inf-norms
    theta: np.ndarray = field(default=None)

    @property
    def converged(self):
        return self.status == OPTIMAL


def _reduced_indices(model: QcqpModel):
    nb = model.nb
    keep = np.array([i for i in range(2 * nb) if i != nb + model.network.slack_index])
    return keep


def solve_opf(model: QcqpModel, theta, opts: SolverOptions = None) -> OpfSolution:
    if opts is None:
        opts = SolverOptions()
    theta = np.asarray(theta, dtype=float)
    nb, ng = model.nb, model.ng
    if theta.shape != (2 * model.nl,):
        raise ValueError(f"theta must have length {2 * model.nl}")

    keep = _reduced_indices(model)
    nv = len(keep)  # 2Nb - 1
    nz = nv + 2 * ng

    # constraint data restricted to the reduced voltage space
    Leq = model.L_all[: 2 * nb][:, keep][:, :, keep]  # (2Nb, nv, nv)
    eq_rhs = model.B @ theta  # loads; A x_g added separately
    finite = np.isfinite(model.f)
    Mi = model.M_all[finite][:, keep][:, :, keep]
    fi = (model.f + model.d @ theta)[finite]
    n_ineq = len(fi)

    c = np.concatenate([np.zeros(nv), model.a0])
    A = model.A  # (2Nb, 2Ng)

    # initial point
    if opts.warm_start is not None:
        v_full, x_g = opts.warm_start
        vz = np.asarray(v_full, dtype=float)[keep].copy()
        x_g = np.asarray(x_g, dtype=float).copy()
    else:
        vz = np.zeros(nv)
        vz[: nb] = 1.0  # flat start (real parts lead in the kept ordering)
        x_g = np.concatenate(
            [
                [0.5 * (g.pmin + g.pmax) for g in model.network.generators],
                [0.5 * (g.qmin + g.qmax) for g in model.network.generators],
            ]
        )

    gval = quad_eval(Mi, vz) - fi
    s = np.maximum(0.1, -gval)
    if opts.warm_duals is not None:
        lam = np.asarray(opts.warm_duals[0], dtype=float)[: 2 * nb].copy()
        mu = np.maximum(np.asarray(opts.warm_duals[1], dtype=float)[finite], 1e-8)
        s = np.maximum(s * 0 + 1e-8, -gval)
        gamma = max(opts.tol_kkt, (s @ mu) / max(n_ineq, 1) * opts.sigma)
    else:
        lam = np.zeros(2 * nb)
        mu = opts.gamma0 / s
        gamma = opts.gamma0

    def residuals(vz, x_g, lam, mu):
        hval = quad_eval(Leq, vz) - A @ x_g - eq_rhs
        gval = quad_eval(Mi, vz) - fi
        Jh = np.hstack([quad_grad(Leq, vz), -A])
        Jg = np.hstack([quad_grad(Mi, vz), np.zeros((n_ineq, 2 * ng))])
        r_d = c + Jh.T @ lam + Jg.T @ mu
        return hval, gval, Jh, Jg, r_d

    if (opts.polish and opts.warm_start is not None
            and opts.warm_duals is not None):
        # A warm point near an optimum usually carries the right active set;
        # refining it directly can skip the whole interior-point phase. The
        # result is only accepted after a full KKT check, so a misleading
        # warm start simply falls through to the normal solve.
        mu_top = float(np.max(mu, initial=0.0))
        active = np.flatnonzero(mu > max(1e-5 * mu_top, opts.tol_kkt))
        t_vz, t_xg, t_lam, t_mu = _polish(vz, x_g, lam, mu, active, Leq, Mi,
                                          fi, A, c, eq_rhs, nv, opts.tol_kkt)
        hval, gval, _, _, r_d = residuals(t_vz, t_xg, t_lam, t_mu)
        stat = _stat_norm(r_d, t_lam, t_mu)
        feas = max(np.max(np.abs(hval)), float(np.max(gval, initial=0.0)))
        comp = _comp_norm(t_mu, gval)
        if max(stat, feas, comp) < opts.tol_kkt:
            return _finish(model, theta, keep, t_vz, t_xg, t_lam, t_mu,
                           finite, OPTIMAL, 0, (stat, feas, comp))

    status = MAX_ITER
    tol_ipm = max(opts.tol_kkt, 1e-8)
    it = 0
    for it in range(opts.max_iter):
        if not np.all(np.isfinite(vz)) or np.max(np.abs(mu), initial=0.0) > 1e12:
            break  # diverging iterate; classify from the final residuals
        hval, gval, Jh, Jg, r_d = residuals(vz, x_g, lam, mu)
        stat = _stat_norm(r_d, lam, mu)
        feas = max(np.max(np.abs(hval)), float(np.max(gval, initial=0.0)))
        comp = _comp_norm(mu, gval)
        if stat < tol_ipm and feas < tol_ipm and comp < tol_ipm:
            status = OPTIMAL
            break

        # Newton direction on the reduced KKT system
        Hvv = 2.0 * (
            np.einsum("l,lij->ij", lam, Leq, optimize=True)
            + np.einsum("m,mij->ij", mu, Mi, optimize=True)
        )
        H = np.zeros((nz, nz))
        H[:nv, :nv] = Hvv

        r_g = gval + s
        r_c = s * mu - gamma
        sinv = 1.0 / np.maximum(s, 1e-12)  # floor avoids overflow when a slack collapses
        w = sinv * (mu * r_g - r_c)
        M = H + Jg.T @ ((mu * sinv)[:, None] * Jg)
        rhs = np.concatenate([-(r_d + Jg.T @ w), -hval])

        delta = 0.0
        while True:
            K = np.zeros((nz + 2 * nb, nz + 2 * nb))
            K[:nz, :nz] = M + delta * np.eye(nz)
            K[:nz, nz:] = Jh.T
            K[nz:, :nz] = Jh
            K[nz:, nz:] = -delta * np.eye(2 * nb)
            try:
                sol = np.linalg.solve(K, rhs)
                if np.all(np.isfinite(sol)):
                    break
            except np.linalg.LinAlgError:
                pass
            delta = opts.delta0 if delta == 0.0 else 2.0 * delta
            if delta > 1e10:
                return _finish(model, theta, keep, vz, x_g, lam, mu, finite,
                               INFEASIBLE, it, (stat, feas, comp))
        dz, dlam = sol[:nz], sol[nz:]
        ds = -r_g - Jg @ dz
        dmu = sinv * (-r_c - mu * ds)

        alpha_p = _step_length(s, ds, opts.ftb)
        alpha_d = _step_length(mu, dmu, opts.ftb)
        vz += alpha_p * dz[:nv]
        x_g += alpha_p * dz[nv:]
        s += alpha_p * ds
        lam += alpha_d * dlam
        mu += alpha_d * dmu
        gamma = opts.sigma * (s @ mu) / max(n_ineq, 1)

    def kkt_norms(vz, x_g, lam, mu):
        hval, gval, _, _, r_d = residuals(vz, x_g, lam, mu)
        stat = _stat_norm(r_d, lam, mu)
        feas = max(np.max(np.abs(hval)), float(np.max(gval, initial=0.0)))
        return stat, feas, _comp_norm(mu, gval), gval

    if opts.polish and status == OPTIMAL:
        # candidate active sets: the slack/multiplier comparison plus
        # threshold-based fallbacks for weakly active constraints
        gval = quad_eval(Mi, vz) - fi
        mu_top = float(np.max(mu, initial=0.0))
        candidates = [
            mu > s,
            mu > 1e-5 * max(1.0, mu_top),
            gval > -1e-6 * np.maximum(1.0, np.abs(fi)),
            # relative cuts discard weakly active rows whose true multiplier
            # is zero (near-degenerate instances leave them in limbo)
            mu > 1e-3 * mu_top,
            mu > 1e-2 * mu_top,
        ]
        best = (vz, x_g, lam, mu)
        best_res = max(kkt_norms(vz, x_g, lam, mu)[:3])
        seen = set()
        for mask in candidates:
            key = tuple(np.flatnonzero(mask))
            if key in seen:
                continue
            seen.add(key)
            trial = _polish(vz, x_g, lam, mu, np.flatnonzero(mask),
                            Leq, Mi, fi, A, c, eq_rhs, nv, opts.tol_kkt)
            res = max(kkt_norms(*trial)[:3])
            if res < best_res:
                best, best_res = trial, res
            if best_res < opts.tol_kkt:
                break
        vz, x_g, lam, mu = best

    stat, feas, comp, gval = kkt_norms(vz, x_g, lam, mu)
    if stat < opts.tol_kkt and feas < opts.tol_kkt and comp < opts.tol_kkt:
        status = OPTIMAL
    elif status == OPTIMAL:
        status = MAX_ITER  # IPM tolerance met but the requested one was not
    elif feas > 1e-5:
        status = INFEASIBLE
    return _finish(model, theta, keep, vz, x_g, lam, mu, finite, status, it, (stat, feas, comp))


def _polish(vz, x_g, lam, mu, active, Leq, Mi, fi, A, c, eq_rhs, nv, tol,
            max_newton=20, max_drops=4):
    """Newton refinement of the KKT equations on a candidate active set.

    Uses minimum-norm steps so linearly dependent active gradients (LICQ
    failures) do not stall the refinement. Rows whose refined multiplier
    comes out negative are dropped from the active set and the refinement
    repeated (the usual active-set exchange). Falls back to the IPM iterate
    if the refinement degrades the residual or loses feasibility.
    """
    lam_in, mu_in = lam.copy(), mu.copy()
    for _ in range(max_drops):
        z, lam_p, mua = _polish_newton(
            vz, x_g, lam_in, mu_in[active], active, Leq, Mi, fi, A, c,
            eq_rhs, nv, max_newton
        )
        negative = mua < -tol
        if not np.any(negative):
            break
        active = active[~negative]
    else:
        return vz, x_g, lam_in, mu_in
    if np.any(mua < -tol):
        return vz, x_g, lam_in, mu_in
    mu_new = np.zeros_like(mu_in)
    mu_new[active] = np.maximum(mua, 0.0)
    # accept only if the refinement actually satisfies inactive feasibility
    gval = quad_eval(Mi, z[:nv]) - fi
    inactive = np.setdiff1d(np.arange(len(mu_in)), active)
    if len(inactive) and np.max(gval[inactive], initial=-np.inf) > tol:
        return vz, x_g, lam_in, mu_in
    return z[:nv], z[nv:], lam_p, mu_new


def _polish_newton(vz, x_g, lam, mua, active, Leq, Mi, fi, A, c, eq_rhs, nv,
                   max_newton):
    ng2 = len(x_g)
    n_eq = Leq.shape[0]
    na = len(active)
    Ma = Mi[active]
    fa = fi[active]
    mua = np.asarray(mua, dtype=float).copy()
    lam = lam.copy()
    z = np.concatenate([vz, x_g])

    def kkt_res(z, lam, mua):
        v = z[:nv]
        Jh = np.hstack([quad_grad(Leq, v), -A])
        Jga = np.hstack([quad_grad(Ma, v), np.zeros((na, ng2))])
        r_d = c + Jh.T @ lam + Jga.T @ mua
        r_h = quad_eval(Leq, v) - A @ z[nv:] - eq_rhs
        r_a = quad_eval(Ma, v) - fa
        return np.concatenate([r_d, r_h, r_a]), Jh, Jga

    best = (z.copy(), lam.copy(), mua.copy())
    F, Jh, Jga = kkt_res(z, lam, mua)
    best_norm = np.max(np.abs(F))
    stall = 0
    for _ in range(max_newton):
        if best_norm < 1e-14:
            break
        v = z[:nv]
        Hvv = 2.0 * (
            np.einsum("l,lij->ij", lam, Leq, optimize=True)
            + np.einsum("m,mij->ij", mua, Ma, optimize=True)
        )
        n = len(z)
        K = np.zeros((n + n_eq + na, n + n_eq + na))
        K[:nv, :nv] = Hvv
        K[:n, n : n + n_eq] = Jh.T
        K[:n, n + n_eq :] = Jga.T
        K[n : n + n_eq, :n] = Jh
        K[n + n_eq :, :n] = Jga
        # direct solve is much cheaper than the SVD behind lstsq; fall back
        # to the minimum-norm solution when K is singular (dependent active
        # gradients), detected by failure or a blown-up step
        step = None
        try:
            step = np.linalg.solve(K, -F)
            # a singular K can return garbage without raising; trust the
            # direct solve only when it actually solves the system
            resid = K @ step + F
            # on a singular-but-consistent system the direct solve can return
            # a small-linear-residual step with a large null-space component
            # that derails the nonlinear iteration; a genuine Newton step
            # scales with the residual, so anything disproportionate is
            # recomputed as the minimum-norm step
            normF = np.max(np.abs(F))
            if not np.all(np.isfinite(step)) or (
                    np.max(np.abs(step)) > 1e4 * normF) or (
                    np.max(np.abs(resid)) > 1e-8 * (1.0 + normF)):
                step = None
        except np.linalg.LinAlgError:
            step = None
        if step is None:
            step = np.linalg.lstsq(K, -F, rcond=1e-12)[0]
        z = z + step[:n]
        lam = lam + step[n : n + n_eq]
        mua = mua + step[n + n_eq :]
        F, Jh, Jga = kkt_res(z, lam, mua)
        norm = np.max(np.abs(F))
        if norm < best_norm:
            # quadratic convergence plateaus at the numerical floor; two
            # consecutive iterations without at least halving the residual
            # mean the floor is reached
            stall = 0 if norm < 0.5 * best_norm else stall + 1
            best = (z.copy(), lam.copy(), mua.copy())
            best_norm = norm
        else:
            stall += 1
        if norm > 10 * best_norm or (stall >= 2 and best_norm < 1e-9):
            break

    return best


def _stat_norm(r_d, lam, mu):
    """Stationarity inf-norm scaled by the dual magnitude (same rationale
    as _comp_norm: rounding in c + Jh' lam + Jg' mu scales with the duals)."""
    scale = max(1.0, float(np.max(np.abs(lam), initial=0.0)),
                float(np.max(np.abs(mu), initial=0.0)))
    return float(np.max(np.abs(r_d))) / scale


def _comp_norm(mu, gval):
    """Complementarity inf-norm scaled by the dual magnitude.

    Large multipliers make |mu * g| < tol unreachable in double precision
    even when the active constraint values sit at machine accuracy, so the
    convergence test normalizes by max(1, ||mu||_inf).
    """
    raw = float(np.max(np.abs(mu * gval), initial=0.0))
    return raw / max(1.0, float(np.max(np.abs(mu), initial=0.0)))


def _step_length(x, dx, ftb):
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, ftb * np.min(-x[neg] / dx[neg]))


def _finish(model, theta, keep, vz, x_g, lam, mu, finite, status, it, kkt):
    nb = model.nb
    v = np.zeros(2 * nb)
    v[keep] = vz
    mu_full = np.zeros(model.n_ineq)
    mu_full[finite] = mu
    # restore the reference-row multiplier from the stationarity residual of
    # the eliminated coordinate (the quadratic reference gradient vanishes
    # there, so any value satisfies KKT; this matches the linear-constraint
    # multiplier of the v_imag = 0 formulation)
    grad_full = 2.0 * (
        np.einsum("l,lij,j->i", lam, model.L_all[: 2 * nb], v, optimize=True)
        + np.einsum("m,mij,j->i", mu_full, model.M_all, v, optimize=True)
    )
    lam_ref = -grad_full[nb + model.network.slack_index]
    lam_full = np.concatenate([lam, [lam_ref]])
    obj = float(model.a0 @ x_g)
    return OpfSolution(v, x_g, lam_full, mu_full, obj, status, it + 1, kkt, theta=theta.copy())


def kkt_residuals(model: QcqpModel, v, x_g, lam, mu, theta):
    """Full-space KKT residual triple (stationarity, feasibility, complementarity)."""
    from .qcqp import eval_constraints

    h, g = eval_constraints(model, v, x_g, theta)
    grad_v = 2.0 * (
        np.einsum("l,lij,j->i", lam, model.L_all, v, optimize=True)
        + np.einsum("m,mij,j->i", mu, model.M_all, v, optimize=True)
    )
    grad_xg = model.a0 - model.A.T @ lam[: 2 * model.nb]
    stat = max(np.max(np.abs(grad_v)), np.max(np.abs(grad_xg)))
    finite = np.isfinite(model.f)
    feas = np.max(np.abs(h)) + float(np.max(np.maximum(g[finite], 0.0), initial=0.0))
    comp = float(np.max(np.abs(mu[finite] * g[finite]), initial=0.0))
    return stat, feas, comp
