"""Experiment harness: plain vs sensitivity-informed predictors.

Runs the evaluation protocol over a generated dataset: for every
(training size, run) split, train one predictor without the Jacobian term
(rho = 0, "p-dnn") and one with it ("si-dnn"), using identical training
points, architecture, initialization, optimizer, and schedule. Emits CSV
tables and SVG figures. All value CSVs are deterministic given seeds; wall
clock timings go to a separate file so the value tables are reproducible
byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataset import (Dataset, SplitPlan, input_scaling, output_scaling,
                      scaled_samples, split)
from .mlp import MlpModel, TrainConfig, forward, init_model, mse, predict, train
from .powerflow import state_from_prediction
from .qcqp import FLOW_FROM, QcqpModel, quad_eval

P_DNN, SI_DNN = "p-dnn", "si-dnn"


@dataclass
class RunResult:
    size: int
    run: int
    variant: str
    rho: float
    train_mse: float
    test_mse: float
    test_mse_per_output: np.ndarray
    wall_time: float
    curve: list
    label_hash: str
    model: MlpModel = field(repr=False, default=None)
    test_indices: list = field(repr=False, default=None)


def _label_hash(samples):
    h = hashlib.sha256()
    for theta, y, _ in samples:
        h.update(np.ascontiguousarray(theta, dtype=float).tobytes())
        h.update(np.ascontiguousarray(y, dtype=float).tobytes())
    return h.hexdigest()[:16]


def _mse_per_output(model, samples):
    err = np.zeros(model.n_out)
    for theta, y, _ in samples:
        err += (forward(model, theta) - np.asarray(y, dtype=float)) ** 2
    return err / len(samples)


def run_experiment(dataset: Dataset, plan: SplitPlan, hidden, epochs=2000,
                   rho=20.0, lr0=5e-4, keep_models=False):
    """Train both variants on every split; returns a list of RunResult.

    Both variants of a run share the training tensors, architecture, and
    initialization; only the Jacobian loss term differs. Per-run training
    failures are recorded as NaN rows instead of aborting the sweep.
    """
    model = dataset.model
    scaling = output_scaling(model)
    in_scaling = input_scaling(dataset)
    n_in = len(model.selected)
    n_out = 2 * model.ng - 1
    results = []
    for size, run, train_idx, test_idx in split(dataset, plan):
        if not test_idx:
            raise ValueError("empty test set")
        train_samples = scaled_samples(dataset, train_idx, scaling)
        test_samples = scaled_samples(dataset, test_idx, scaling)
        lhash = _label_hash(train_samples)
        init_seed = (plan.seed, size, run)
        for variant, rho_v in ((P_DNN, 0.0), (SI_DNN, rho)):
            net = init_model([n_in] + list(hidden) + [n_out], seed=init_seed,
                             scaling=scaling, input_scaling=in_scaling)
            cfg = TrainConfig(rho=rho_v, lr0=lr0, epochs=epochs,
                              seed=hash((plan.seed, size, run)) % 2**32)
            t0 = time.perf_counter()
            try:
                curve = train(net, train_samples, cfg)
            except FloatingPointError:
                results.append(RunResult(size, run, variant, rho_v, np.nan,
                                         np.nan, np.full(n_out, np.nan),
                                         time.perf_counter() - t0, [], lhash))
                continue
            wall = time.perf_counter() - t0
            results.append(RunResult(
                size, run, variant, rho_v,
                mse(net, train_samples), mse(net, test_samples),
                _mse_per_output(net, test_samples), wall, curve, lhash,
                model=net if keep_models else None,
                test_indices=test_idx if keep_models else None,
            ))
    return results


@dataclass
class ViolationStats:
    instances: int
    pf_failures: int
    violations_per_instance: float  # mean count of violations above threshold
    max_violation: float
    mean_violation: float  # over all checked constraints and instances


def violation_report(dataset: Dataset, indices, net: MlpModel,
                     threshold=1e-4) -> ViolationStats:
    """Constraint violations of predictor-implied states on given samples.

    Checks exactly the inequalities the tanh output does not enforce:
    load-bus voltage limits, branch flow limits, generator reactive limits,
    and the slack generator active limits. Flow and generation violations
    are normalized by the corresponding maximum limit; voltage violations
    stay in per unit. Instances whose power flow fails to converge are
    counted separately and excluded from the statistics.
    """
    model = dataset.model
    network = model.network
    nb, ng = model.nb, model.ng
    slack = network.slack_index
    slack_gen = network.gen_at(network.slack_bus)
    gen_buses = set(network.gen_bus_indices)

    flow_rows = [m for m, (kind, *_rest) in enumerate(model.ineq_map)
                 if kind == FLOW_FROM and np.isfinite(model.f[m])]
    i_lims = np.sqrt(model.f[flow_rows]) if flow_rows else np.zeros(0)
    i_max = float(np.max(i_lims)) if len(i_lims) else 1.0
    q_max = max(max(abs(g.qmin), abs(g.qmax)) for g in network.generators)
    p_max = max(g.pmax for g in network.generators)

    counts, total, n_constraints, worst = 0, 0.0, 0, 0.0
    pf_failures = 0
    used = 0
    for i in indices:
        s = dataset.samples[i]
        pred = predict(net, s.inputs)
        sol, x_g = state_from_prediction(network, s.theta, pred)
        if not sol.converged:
            pf_failures += 1
            continue
        used += 1
        viols = []
        vm = np.abs(sol.v)
        for n, bus in enumerate(network.buses):
            if n in gen_buses:
                continue  # predictor pins generator-bus magnitudes
            viols.append(max(0.0, bus.vmin - vm[n], vm[n] - bus.vmax))
        v_stacked = np.concatenate([sol.v.real, sol.v.imag])
        for m, lim in zip(flow_rows, i_lims):
            cur = np.sqrt(max(float(quad_eval(model.M_all[m][None], v_stacked)[0]), 0.0))
            viols.append(max(0.0, cur - lim) / i_max)
        for j, g in enumerate(network.generators):
            q = x_g[ng + j]
            viols.append(max(0.0, g.qmin - q, q - g.qmax) / q_max)
        p_slack = x_g[[j for j, b in enumerate(network.gen_bus_indices)
                       if b == slack][0]]
        viols.append(max(0.0, slack_gen.pmin - p_slack,
                         p_slack - slack_gen.pmax) / p_max)
        viols = np.array(viols)
        counts += int(np.sum(viols > threshold))
        total += float(np.sum(viols))
        worst = max(worst, float(np.max(viols, initial=0.0)))
        n_constraints += len(viols)
    if used == 0:
        return ViolationStats(0, pf_failures, np.nan, np.nan, np.nan)
    return ViolationStats(used, pf_failures, counts / used, worst,
                          total / n_constraints)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float) and np.isnan(x):
        return "nan"
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def emit_reports(results, out_dir, violations=None):
    """Write runs.csv, mse_table.csv, violations.csv, timing.csv and figures.

    Value tables contain no wall-clock data and are byte-identical across
    re-runs with the same seeds; timings live in their own file.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    p = os.path.join(out_dir, "runs.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "run", "variant", "rho", "train_mse", "test_mse",
                    "label_hash"])
        for r in results:
            w.writerow([r.size, r.run, r.variant, _fmt(r.rho),
                        _fmt(r.train_mse), _fmt(r.test_mse), r.label_hash])
    paths["runs"] = p

    p = os.path.join(out_dir, "mse_table.csv")
    cells = {}
    for r in results:
        cells.setdefault((r.size, r.variant), []).append(r.test_mse)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "variant", "runs", "mean_test_mse"])
        for (size, variant) in sorted(cells):
            vals = cells[(size, variant)]
            w.writerow([size, variant, len(vals), _fmt(float(np.mean(vals)))])
    paths["mse_table"] = p

    if violations is not None:
        p = os.path.join(out_dir, "violations.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "run", "variant", "instances", "pf_failures",
                        "violations_per_instance", "max_violation",
                        "mean_violation"])
            for (size, run, variant), vs in sorted(violations.items()):
                w.writerow([size, run, variant, vs.instances, vs.pf_failures,
                            _fmt(vs.violations_per_instance),
                            _fmt(vs.max_violation), _fmt(vs.mean_violation)])
        paths["violations"] = p

    p = os.path.join(out_dir, "timing.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "run", "variant", "wall_time_s"])
        for r in results:
            w.writerow([r.size, r.run, r.variant, _fmt(r.wall_time)])
    paths["timing"] = p

    paths["loss_curves"] = _plot_loss_curves(results, out_dir)
    paths["mse_vs_size"] = _plot_mse_vs_size(results, out_dir)
    return paths


def _savefig(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _plot_loss_curves(results, out_dir):
    import os

    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {P_DNN: "tab:orange", SI_DNN: "tab:blue"}
    seen = set()
    for r in results:
        if not r.curve:
            continue
        label = r.variant if r.variant not in seen else None
        seen.add(r.variant)
        ax.semilogy(r.curve, color=colors.get(r.variant, "gray"),
                    alpha=0.6, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    if seen:
        ax.legend()
    fig.tight_layout()
    return _savefig(fig, os.path.join(out_dir, "loss_curves.svg"))


def _plot_mse_vs_size(results, out_dir):
    import os

    cells = {}
    for r in results:
        cells.setdefault((r.variant, r.size), []).append(r.test_mse)
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant in sorted({v for v, _ in cells}):
        sizes = sorted(s for vv, s in cells if vv == variant)
        means = [float(np.nanmean(cells[(variant, s)])) for s in sizes]
        ax.plot(sizes, means, marker="o", label=variant)
    ax.set_xlabel("training size")
    ax.set_ylabel("mean test MSE (scaled outputs)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _savefig(fig, os.path.join(out_dir, "test_mse_vs_size.svg"))


def run_and_report(dataset: Dataset, plan: SplitPlan, hidden, out_dir,
                   epochs=2000, rho=20.0, lr0=5e-4, with_violations=True):
    """Full sweep -> CSV tables and figures; returns (results, paths)."""
    results = run_experiment(dataset, plan, hidden, epochs=epochs, rho=rho,
                             lr0=lr0, keep_models=with_violations)
    violations = None
    if with_violations:
        violations = {}
        for r in results:
            if r.model is None:
                continue
            violations[(r.size, r.run, r.variant)] = violation_report(
                dataset, r.test_indices, r.model
            )
    paths = emit_reports(results, out_dir, violations)
    return results, paths
