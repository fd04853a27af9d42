import numpy as np
import pytest

from opfsense.netmodel import parse_case
from opfsense.opf import SolverOptions, kkt_residuals, solve_opf
from opfsense.qcqp import V_UPPER, assemble_qcqp, eval_constraints
from opfsense.sensitivity import (
    BOX,
    MAGNITUDE,
    SQUARED,
    DegenerateInstance,
    assemble_system,
    classify_constraints,
    default_thresholds,
    finite_difference_jacobian,
    gradient_variant,
    nullspace,
    output_jacobian,
    reduced_output,
    sensitivity_record,
    smallest_singular_ratio,
    solve_sensitivities,
    vmag_chain_rule,
)
from tests.conftest import CASE2_LOSSLESS, licq_instance, solve_tight


# ---------------------------------------------------------------------------
# classification


def test_classification_cases():
    g = np.array([-0.5, -1e-9, -1e-9, -0.5])
    mu = np.array([0.0, 2.0, 1e-9, 3.0])
    cls = classify_constraints(g, mu, tau_g=1e-6, tau_mu=1e-6)
    assert cls.inactive.tolist() == [0]
    assert cls.active.tolist() == [1]
    assert cls.degenerate.tolist() == [2, 3]  # index 3: mu > 0 but g far from 0
    assert cls.is_degenerate


def test_classification_threshold_validation():
    with pytest.raises(ValueError):
        classify_constraints([0.0], [0.0], tau_g=0.0, tau_mu=1e-6)


def test_default_thresholds_scale_with_mu(model3):
    tau_g, tau_mu = default_thresholds(model3, np.array([0.0, 5e4]))
    assert tau_mu == pytest.approx(5e4 * 1e-6)
    assert np.all(tau_g > 0)


# ---------------------------------------------------------------------------
# gradient variants


def test_gradient_variant_squared_vs_magnitude(model3, sol3):
    m = next(i for i, (k, *_ ) in enumerate(model3.ineq_map) if k == V_UPPER)
    gv_sq, _, _ = gradient_variant(model3, m, sol3.v, SQUARED)
    gv_mag, _, _ = gradient_variant(model3, m, sol3.v, MAGNITUDE)
    n = model3.ineq_map[m][1]
    vm = np.hypot(sol3.v[n], sol3.v[model3.nb + n])
    # d(vm^2) = 2 vm d(vm): at vm = 1 the gradients differ by a factor 2
    assert np.allclose(gv_sq, 2.0 * vm * gv_mag)


def test_gradient_variant_box(model3, sol3):
    m = 0  # pg upper of generator 0
    gv, gx, hv = gradient_variant(model3, m, sol3.v, BOX)
    assert not gv.any() and not hv.any()
    expected = np.zeros(2 * model3.ng)
    expected[0] = 1.0
    assert np.array_equal(gx, expected)
    with pytest.raises(ValueError, match="generator limits"):
        gradient_variant(model3, m + 4 * model3.ng, sol3.v, BOX)  # a voltage row


def test_gradient_variant_magnitude_rejects_non_voltage(model3, sol3):
    with pytest.raises(ValueError, match="voltage limits"):
        gradient_variant(model3, 0, sol3.v, MAGNITUDE)


# ---------------------------------------------------------------------------
# chain rule


def test_vmag_chain_rule_formula():
    assert vmag_chain_rule(complex(0.8, 0.6), np.array([1.0]), np.array([1.0]))[0] == pytest.approx(1.4)


def test_vmag_chain_rule_real_voltage():
    rows = np.array([0.3, -0.2])
    assert np.allclose(vmag_chain_rule(complex(1.0, 0.0), rows, np.zeros(2)), rows)


def test_vmag_chain_rule_rejects_tiny_magnitude():
    with pytest.raises(ValueError, match="1e-6"):
        vmag_chain_rule(complex(1e-8, 0.0), np.zeros(1), np.zeros(1))


def test_vmag_chain_rule_matches_fd(model3, sol3):
    rec = sensitivity_record(model3, sol3)
    jfd = finite_difference_jacobian(model3, sol3.theta, sol3)
    nb = model3.nb
    for n in range(nb):
        vc = complex(sol3.v[n], sol3.v[nb + n])
        dv = vmag_chain_rule(vc, rec.j_full[n], rec.j_full[nb + n])
        dv_fd = vmag_chain_rule(vc, jfd[n], jfd[nb + n])
        assert np.allclose(dv, dv_fd, atol=1e-6)


# ---------------------------------------------------------------------------
# the differentiated KKT system on a regular instance


def test_fd_oracle_agreement_three_bus(model3, sol3):
    rec = sensitivity_record(model3, sol3)
    assert rec.j_full is not None and not rec.degenerate
    jfd = finite_difference_jacobian(model3, sol3.theta, sol3)
    err = np.abs(rec.j_full - jfd)
    assert np.all(err <= np.maximum(1e-4 * np.abs(jfd), 1e-6))


def test_lossless_unit_sensitivity():
    # single generator, no losses, no binding limits: d p_g / d pd = 1
    model = assemble_qcqp(parse_case(CASE2_LOSSLESS))
    sol = solve_tight(model)
    rec = sensitivity_record(model, sol)
    dpg_dpd = rec.j_full[2 * model.nb + 0, 0]
    assert dpg_dpd == pytest.approx(1.0, abs=1e-8)


def test_output_jacobian_rows(model3, sol3):
    rec = sensitivity_record(model3, sol3)
    assert rec.j_out.shape == (2 * model3.ng - 1, len(model3.selected))
    y0 = reduced_output(model3, sol3.v, sol3.x_g)
    # compare against finite differences of the reduced output
    eps = 1e-5
    for p_local, p in enumerate(model3.selected):
        th = sol3.theta.copy()
        th[p] += eps
        sp = solve_tight(model3, th)
        th[p] -= 2 * eps
        sm = solve_tight(model3, th)
        fd = (reduced_output(model3, sp.v, sp.x_g)
              - reduced_output(model3, sm.v, sm.x_g)) / (2 * eps)
        assert np.allclose(rec.j_out[:, p_local], fd, atol=1e-5)
    assert np.all(np.isfinite(y0))


def test_perturbed_point_optimality_order(model3, sol3):
    """First-order updates x + J d_theta leave KKT residuals O(|d_theta|^2)."""
    rec = sensitivity_record(model3, sol3)
    nb, ng = model3.nb, model3.ng
    steps = [1e-2, 1e-3, 1e-4]
    direction = np.array([1.0, 0.5])
    L = model3.n_eq
    active = rec.active_set
    resids = []
    for h in steps:
        dtheta = h * direction
        dx = rec.j_full @ dtheta
        ddual = rec.j_dual @ dtheta
        v = sol3.v + dx[: 2 * nb]
        x_g = sol3.x_g + dx[2 * nb :]
        lam = sol3.lam + ddual[:L]
        mu = sol3.mu.copy()
        mu[active] += ddual[L:]
        stat, feas, comp = kkt_residuals(model3, v, x_g, lam, mu,
                                         sol3.theta + dtheta)
        resids.append(max(stat, feas, comp))
    exponent = np.polyfit(np.log(steps), np.log(resids), 1)[0]
    assert exponent >= 1.9


def test_c1_consistency_unreduced_system(model3, sol3):
    """Keeping an inactive constraint in the system must give d mu = 0."""
    _, g = eval_constraints(model3, sol3.v, sol3.x_g, sol3.theta)
    tau_g, tau_mu = default_thresholds(model3, sol3.mu)
    cls = classify_constraints(g, sol3.mu, tau_g, tau_mu)
    drop = [m for m in range(model3.n_ineq)
            if m not in cls.active and np.isfinite(model3.f[m])][0]
    # rebuild with the slack constraint kept: complementarity row becomes
    # mu_m * dg_m + g_m * dmu_m = ... with mu_m = 0, i.e. g_m * dmu_m = 0
    import dataclasses

    forced = dataclasses.replace(
        cls, active=np.sort(np.append(cls.active, drop)))
    sysm = assemble_system(model3, sol3, forced)
    # the retained row for the slack constraint must pin dmu to ~0: add the
    # D(g) diagonal entry that the reduced assembly omits for active rows
    pos = np.flatnonzero(forced.active == drop)[0]
    row = sysm.n_primal + model3.n_eq + pos
    sysm.S[row, row] = g[drop]
    gamma, *_ = np.linalg.lstsq(sysm.S, sysm.U, rcond=1e-10)
    assert np.max(np.abs(gamma[row])) < 1e-8
    # and the primal block matches the properly reduced solve
    rec = sensitivity_record(model3, sol3)
    assert np.allclose(gamma[: sysm.n_primal], rec.j_full, atol=1e-7)


def test_degenerate_instance_yields_value_only_record(model3, sol3):
    # force a fake degenerate classification through tiny thresholds on a
    # constraint that is weakly active: emulate by injecting a zero-mu,
    # zero-g constraint classification
    _, g = eval_constraints(model3, sol3.v, sol3.x_g, sol3.theta)
    mu = sol3.mu.copy()
    m = int(np.argmin(np.abs(g[np.isfinite(model3.f)])))
    g2 = g.copy()
    g2[m] = 0.0
    mu[m] = 0.0
    tau_g, tau_mu = default_thresholds(model3, mu)
    cls = classify_constraints(g2, mu, tau_g, tau_mu)
    if cls.is_degenerate:
        with pytest.raises(DegenerateInstance):
            assemble_system(model3, sol3, cls)


# ---------------------------------------------------------------------------
# LICQ violation: singular systems with a pure-dual null space


@pytest.fixture(scope="module")
def licq_vv():
    return licq_instance("vv")


def test_licq_system_singular(licq_vv):
    model, sol = licq_vv
    _, g = eval_constraints(model, sol.v, sol.x_g, sol.theta)
    tau_g, tau_mu = default_thresholds(model, sol.mu)
    cls = classify_constraints(g, sol.mu, tau_g, tau_mu)
    assert not cls.is_degenerate
    sysm = assemble_system(model, sol, cls)
    assert smallest_singular_ratio(sysm.S) < 1e-10
    ns = nullspace(sysm.S)
    assert len(ns) >= 1
    assert np.max(np.abs(ns[:, : sysm.n_primal])) < 1e-8


def test_licq_least_squares_matches_fd(licq_vv):
    model, sol = licq_vv
    rec = sensitivity_record(model, sol)
    assert rec.j_full is not None and rec.rank_deficient and rec.dual_caveat
    jfd = finite_difference_jacobian(model, sol.theta, sol)
    err = np.abs(rec.j_full - jfd)
    assert np.all(err <= np.maximum(1e-4 * np.abs(jfd), 1e-6))


def test_licq_dual_choice_invariance(licq_vv):
    """Shifting the duals along the null space leaves the primal block put."""
    model, sol = licq_vv
    _, g = eval_constraints(model, sol.v, sol.x_g, sol.theta)
    tau_g, tau_mu = default_thresholds(model, sol.mu)
    cls = classify_constraints(g, sol.mu, tau_g, tau_mu)
    sysm = assemble_system(model, sol, cls)
    base = solve_sensitivities(sysm)

    # alternative valid duals: move along the dual null direction of the
    # active gradients while keeping stationarity, then rebuild the system
    import dataclasses

    Jh = sysm.S[sysm.n_primal : sysm.n_primal + model.n_eq, : sysm.n_primal]
    Jg = sysm.S[sysm.n_primal + model.n_eq :, : sysm.n_primal] / sol.mu[cls.active, None]
    K = np.vstack([Jh, Jg])
    null_dual = nullspace(K @ K.T, rtol=1e-8)
    assert len(null_dual) >= 1
    shift = 0.05 * null_dual[0]
    lam2 = sol.lam.copy()
    mu2 = sol.mu.copy()
    lam2 += shift[: model.n_eq]
    mu2[cls.active] += shift[model.n_eq :]
    assert np.all(mu2[cls.active] > 0)
    sol2 = dataclasses.replace(sol, lam=lam2, mu=mu2)
    stat, _, _ = kkt_residuals(model, sol2.v, sol2.x_g, lam2, mu2, sol2.theta)
    assert stat < 1e-6  # still a valid KKT dual
    rec2 = sensitivity_record(model, sol2)
    assert rec2.j_full is not None
    assert np.max(np.abs(rec2.j_full - base.j_full)) < 1e-6
