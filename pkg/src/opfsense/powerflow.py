"""Newton-Raphson AC power flow in polar coordinates.

Used to generate feasible starting states and to recover the full network
state from predicted generator PV setpoints. PV->PQ switching on reactive
limit breaches is deliberately not performed: limit violations are a
quantity this pipeline measures, not one it clips away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netmodel import Network


@dataclass
class PfSpec:
    """Bus targets: slack (vmag, angle 0), PV (p_inj, vmag), PQ (p_inj, q_inj).

    Buses are referenced by internal index; every bus appears exactly once.
    """

    slack: int
    slack_vmag: float
    pv: list  # (bus index, p_inj, vmag)
    pq: list  # (bus index, p_inj, q_inj)

    def check(self, n_bus):
        touched = [self.slack] + [b for b, *_ in self.pv] + [b for b, *_ in self.pq]
        if sorted(touched) != list(range(n_bus)):
            raise ValueError("PfSpec must cover every bus exactly once")


@dataclass
class PfSolution:
    v: np.ndarray  # complex bus voltages
    converged: bool
    iterations: int
    max_mismatch: float
    p_slack: float = 0.0
    q_injections: np.ndarray = field(default=None)  # reactive injections at all buses


def nominal_spec(network: Network) -> PfSpec:
    """Dispatch-at-setpoint spec from the case data (gen Vg and Pg midpoints)."""
    slack = network.slack_index
    pv, pq = [], []
    gen_of = {network.bus_index(g.bus): g for g in network.generators}
    for i, bus in enumerate(network.buses):
        if i == slack:
            continue
        if i in gen_of:
            g = gen_of[i]
            pv.append((i, 0.5 * (g.pmin + g.pmax) - bus.pd, g.vg))
        else:
            pq.append((i, -bus.pd, -bus.qd))
    vg = gen_of[slack].vg if slack in gen_of else 1.0
    return PfSpec(slack, vg, pv, pq)


def solve_pf(network: Network, spec: PfSpec, tol=1e-9, max_iter=30, warm=None) -> PfSolution:
    """Polar Newton power flow; returns Cartesian complex voltages."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = network.n_bus
    spec.check(n)
    Y = network.ybus

    pv_idx = np.array([b for b, *_ in spec.pv], dtype=int)
    pq_idx = np.array([b for b, *_ in spec.pq], dtype=int)
    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    vm_target = np.ones(n)
    vm_target[spec.slack] = spec.slack_vmag
    for b, p, vm in spec.pv:
        p_spec[b], vm_target[b] = p, vm
    for b, p, q in spec.pq:
        p_spec[b], q_spec[b] = p, q

    if warm is not None:
        va = np.angle(warm)
        vm = np.abs(warm)
        vm[spec.slack] = spec.slack_vmag
        if len(pv_idx):
            vm[pv_idx] = vm_target[pv_idx]
    else:
        va = np.zeros(n)
        vm = vm_target.copy()

    pvpq = np.concatenate([pv_idx, pq_idx]).astype(int)
    n_pq = len(pq_idx)

    mismatch = np.inf
    for it in range(max_iter + 1):
        V = vm * np.exp(1j * va)
        S = V * np.conj(Y @ V)
        dp = S.real[pvpq] - p_spec[pvpq]
        dq = S.imag[pq_idx] - q_spec[pq_idx] if n_pq else np.zeros(0)
        F = np.concatenate([dp, dq])
        mismatch = np.max(np.abs(F)) if len(F) else 0.0
        if mismatch < tol:
            return PfSolution(V, True, it, mismatch, S.real[spec.slack], S.imag.copy())
        if it == max_iter:
            break

        Ibus = Y @ V
        diagV = np.diag(V)
        diagI = np.diag(Ibus)
        diagVn = np.diag(V / np.abs(V))
        dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
        dS_dVm = diagV @ np.conj(Y @ diagVn) + np.conj(diagI) @ diagVn

        J11 = dS_dVa[np.ix_(pvpq, pvpq)].real
        J12 = dS_dVm[np.ix_(pvpq, pq_idx)].real
        J21 = dS_dVa[np.ix_(pq_idx, pvpq)].imag
        J22 = dS_dVm[np.ix_(pq_idx, pq_idx)].imag
        J = np.block([[J11, J12], [J21, J22]])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        va[pvpq] += dx[: len(pvpq)]
        if n_pq:
            vm[pq_idx] += dx[len(pvpq) :]
            if np.any(vm[pq_idx] <= 0):
                break  # voltage collapsed, treat as non-convergence

    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    return PfSolution(V, False, max_iter, mismatch, S.real[spec.slack], S.imag.copy())


def state_from_prediction(network: Network, theta, prediction, tol=1e-9, max_iter=30):
    """Recover the full state from predicted PV setpoints.

    prediction is ordered as the reduced output vector: active power for
    every non-slack generator (generator order), then voltage magnitude for
    every generator. theta is the full load vector [pd; qd] over load buses.

    Returns (PfSolution, x_g) with x_g = [p_g; q_g] implied by the solve.
    """
    ng = network.n_gen
    slack = network.slack_index
    gidx = network.gen_bus_indices
    nonslack = [j for j, b in enumerate(gidx) if b != slack]
    p_pred = np.zeros(ng)
    p_pred[nonslack] = prediction[: ng - 1]
    vmag = np.asarray(prediction[ng - 1 :], dtype=float)

    load_idx = network.load_bus_indices
    nl = len(load_idx)
    pd = dict(zip(load_idx, theta[:nl]))
    qd = dict(zip(load_idx, theta[nl:]))

    pv, pq = [], []
    slack_vm = 1.0
    for j, b in enumerate(gidx):
        if b == slack:
            slack_vm = vmag[j]
        else:
            pv.append((b, p_pred[j], vmag[j]))
    for b in load_idx:
        pq.append((b, -pd[b], -qd[b]))
    spec = PfSpec(slack, slack_vm, pv, pq)
    sol = solve_pf(network, spec, tol=tol, max_iter=max_iter)

    x_g = np.zeros(2 * ng)
    if sol.converged:
        for j, b in enumerate(gidx):
            x_g[j] = sol.p_slack if b == slack else p_pred[j]
            x_g[ng + j] = sol.q_injections[b]
    return sol, x_g
