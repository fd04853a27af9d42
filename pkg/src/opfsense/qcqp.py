"""Quadratic-form matrices and standard-form parametric QCQP assembly.

Voltages live in R^{2*Nb} as v = [v_real; v_imag]. The model carries

  equalities   v' L_l v  = a_l' x_g + b_l' theta,   l = 1..2*Nb+1
  inequalities v' M_m v <= d_m' theta + f_m,        m = 1..4*Ng+2*Nb+E

with x_g = [p_g; q_g] over generators and theta = [pd; qd] over load buses.
The last equality row is the angle-reference quadratic at the slack bus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netmodel import Network, branch_admittances


@dataclass
class QuadForms:
    """Dense symmetric quadratic-form matrices, one slice per bus/branch."""

    mp: np.ndarray  # (Nb, 2Nb, 2Nb) active injections
    mq: np.ndarray  # (Nb, 2Nb, 2Nb) reactive injections
    mv: np.ndarray  # (Nb, 2Nb, 2Nb) squared voltage magnitudes
    mi_from: np.ndarray  # (E, 2Nb, 2Nb) squared from-end branch current
    mi_to: np.ndarray  # (E, 2Nb, 2Nb) squared to-end branch current
    mref: np.ndarray  # (2Nb, 2Nb) angle reference selector


def _hermitian_to_real(h):
    """Real symmetric expansion of v* H v for Hermitian H."""
    hr, hi = h.real, h.imag
    return np.block([[hr, -hi], [hi, hr]])


def _abs2_of_linear(coeff, nb):
    """Matrix of |f' v_complex|^2 over the stacked real voltage vector.

    coeff is a dense complex row vector of length nb.
    """
    u = np.concatenate([coeff.real, -coeff.imag])
    z = np.concatenate([coeff.imag, coeff.real])
    return np.outer(u, u) + np.outer(z, z)


def build_quadforms(network: Network) -> QuadForms:
    nb = network.n_bus
    Y = network.ybus
    mp = np.empty((nb, 2 * nb, 2 * nb))
    mq = np.empty((nb, 2 * nb, 2 * nb))
    mv = np.zeros((nb, 2 * nb, 2 * nb))
    for n in range(nb):
        yn = np.zeros((nb, nb), dtype=complex)
        yn[n, :] = Y[n, :]
        mp[n] = _hermitian_to_real(0.5 * (yn.conj().T + yn))
        mq[n] = _hermitian_to_real((yn.conj().T - yn) / 2j)
        mv[n, n, n] = 1.0
        mv[n, nb + n, nb + n] = 1.0
    E = len(network.branches)
    mi_from = np.empty((E, 2 * nb, 2 * nb))
    mi_to = np.empty((E, 2 * nb, 2 * nb))
    adm = branch_admittances(network)
    for e, br in enumerate(network.branches):
        i, j = network.bus_index(br.from_bus), network.bus_index(br.to_bus)
        yff, yft, ytf, ytt = adm[e]
        cf = np.zeros(nb, dtype=complex)
        cf[i], cf[j] = yff, yft
        ct = np.zeros(nb, dtype=complex)
        ct[i], ct[j] = ytf, ytt
        mi_from[e] = _abs2_of_linear(cf, nb)
        mi_to[e] = _abs2_of_linear(ct, nb)
    mref = np.zeros((2 * nb, 2 * nb))
    s = network.slack_index
    mref[nb + s, nb + s] = 1.0
    return QuadForms(mp, mq, mv, mi_from, mi_to, mref)


def quad_eval(mats, v):
    """v' M_k v for a stack of matrices, vectorized over k."""
    return np.einsum("kij,i,j->k", mats, v, v, optimize=True)


def quad_grad(mats, v):
    """Gradients 2 M_k v, one row per matrix."""
    return 2.0 * np.einsum("kij,j->ki", mats, v, optimize=True)


# inequality index-map kinds
PG_UPPER, PG_LOWER = "pg_upper", "pg_lower"
QG_UPPER, QG_LOWER = "qg_upper", "qg_lower"
V_UPPER, V_LOWER = "v_upper", "v_lower"
FLOW_FROM, FLOW_TO = "flow_from", "flow_to"


@dataclass
class QcqpModel:
    network: Network
    forms: QuadForms
    L_all: np.ndarray  # (L, 2Nb, 2Nb)
    A: np.ndarray  # (2Nb, 2Ng)
    B: np.ndarray  # (2Nb, 2Nl)
    a0: np.ndarray  # (2Ng,)
    M_all: np.ndarray  # (M, 2Nb, 2Nb)
    d: np.ndarray  # (M, 2Nl)
    f: np.ndarray  # (M,)
    ineq_map: list  # (kind, bus-or-branch position, side) per inequality row
    theta_labels: list  # (bus_id, 'p'|'q') per theta entry
    theta0: np.ndarray  # nominal loads
    selected: np.ndarray = field(default=None)  # indices of theta varied as inputs

    def __post_init__(self):
        if self.selected is None:
            self.selected = np.arange(len(self.theta_labels))

    @property
    def nb(self):
        return self.network.n_bus

    @property
    def ng(self):
        return self.network.n_gen

    @property
    def nl(self):
        return self.nb - self.ng

    @property
    def n_eq(self):
        return self.L_all.shape[0]

    @property
    def n_ineq(self):
        return self.M_all.shape[0]

    @property
    def n_primal(self):
        return 2 * self.nb + 2 * self.ng

    def eq_rhs_matrix(self):
        """[A | B] so that equality right-hand sides are A x_g + B theta."""
        return self.A, self.B

    def full_theta(self, inputs, base=None):
        """Expand DNN-input entries (selected subset) into a full theta vector."""
        theta = np.array(self.theta0 if base is None else base, dtype=float)
        theta[self.selected] = inputs
        return theta


def assemble_qcqp(network: Network, forms: QuadForms = None, param_spec=None) -> QcqpModel:
    """Assemble the standard-form parametric QCQP for a validated network.

    param_spec optionally restricts which load entries act as varied inputs:
    a list of (bus_id, 'p'|'q') labels. All load-bus demands always enter the
    constraint data through theta; param_spec only marks the input subset.
    """
    if forms is None:
        forms = build_quadforms(network)
    nb, ng = network.n_bus, network.n_gen
    if network.gen_at(network.slack_bus) is None:
        raise ValueError("slack bus must host a generator (angle reference requirement)")

    gen_pos = {network.bus_index(g.bus): j for j, g in enumerate(network.generators)}
    load_idx = network.load_bus_indices
    load_pos = {n: k for k, n in enumerate(load_idx)}
    nl = len(load_idx)

    L_all = np.concatenate([forms.mp, forms.mq, forms.mref[None, :, :]], axis=0)
    A = np.zeros((2 * nb, 2 * ng))
    B = np.zeros((2 * nb, 2 * nl))
    for n, j in gen_pos.items():
        A[n, j] = 1.0
        A[nb + n, ng + j] = 1.0
    for n, k in load_pos.items():
        B[n, k] = -1.0
        B[nb + n, nl + k] = -1.0

    a0 = np.concatenate(
        [[g.cp for g in network.generators], [g.cq for g in network.generators]]
    )

    mats, f, ineq_map = [], [], []
    gens = network.generators
    for side, sign in ((PG_UPPER, 1.0), (PG_LOWER, -1.0)):
        for j, g in enumerate(gens):
            n = network.bus_index(g.bus)
            mats.append(sign * forms.mp[n])
            f.append(g.pmax if sign > 0 else -g.pmin)
            ineq_map.append((side, j, n))
    for side, sign in ((QG_UPPER, 1.0), (QG_LOWER, -1.0)):
        for j, g in enumerate(gens):
            n = network.bus_index(g.bus)
            mats.append(sign * forms.mq[n])
            f.append(g.qmax if sign > 0 else -g.qmin)
            ineq_map.append((side, j, n))
    for n, bus in enumerate(network.buses):
        mats.append(forms.mv[n])
        f.append(bus.vmax**2)
        ineq_map.append((V_UPPER, n, n))
    for n, bus in enumerate(network.buses):
        mats.append(-forms.mv[n])
        f.append(-bus.vmin**2)
        ineq_map.append((V_LOWER, n, n))
    for e, br in enumerate(network.branches):
        mats.append(forms.mi_from[e])
        f.append(br.imax if br.imax is not None else np.inf)
        ineq_map.append((FLOW_FROM, e, (br.from_bus, br.to_bus)))
    M_all = np.stack(mats)
    f = np.array(f)
    d = np.zeros((len(f), 2 * nl))

    theta_labels = [(network.buses[n].id, "p") for n in load_idx] + [
        (network.buses[n].id, "q") for n in load_idx
    ]
    theta0 = np.array(
        [network.buses[n].pd for n in load_idx] + [network.buses[n].qd for n in load_idx]
    )
    selected = None
    if param_spec is not None:
        pos = {lab: i for i, lab in enumerate(theta_labels)}
        try:
            selected = np.array([pos[tuple(lab)] for lab in param_spec])
        except KeyError as exc:
            raise ValueError(f"param_spec entry {exc} is not a load-bus demand")

    return QcqpModel(
        network, forms, L_all, A, B, a0, M_all, d, f, ineq_map, theta_labels, theta0, selected
    )


def eval_constraints(model: QcqpModel, v, x_g, theta):
    """Equality residuals h and inequality values g at a point."""
    h = quad_eval(model.L_all, v)
    h[:-1] -= model.A @ x_g + model.B @ theta
    g = quad_eval(model.M_all, v) - model.d @ theta - model.f
    return h, g


def dump_model(model: QcqpModel) -> str:
    """Plain-text dump: one constraint per record, sparse triplets + vectors."""
    out = []

    def triplets(mat):
        ii, jj = np.nonzero(np.triu(mat != 0.0))
        return " ".join(f"{i},{j},{mat[i, j]!r}" for i, j in zip(ii, jj))

    out.append(f"qcqp nb={model.nb} ng={model.ng} nl={model.nl} E={len(model.network.branches)}")
    out.append("a0 " + " ".join(repr(x) for x in model.a0))
    for l in range(model.n_eq):
        a = model.A[l] if l < 2 * model.nb else np.zeros(2 * model.ng)
        b = model.B[l] if l < 2 * model.nb else np.zeros(2 * model.nl)
        out.append(
            f"eq {l} | {triplets(model.L_all[l])} | a {' '.join(map(repr, a))} "
            f"| b {' '.join(map(repr, b))}"
        )
    for m in range(model.n_ineq):
        out.append(
            f"ineq {m} {model.ineq_map[m][0]} | {triplets(model.M_all[m])} "
            f"| d {' '.join(map(repr, model.d[m]))} | f {model.f[m]!r}"
        )
    return "\n".join(out) + "\n"
