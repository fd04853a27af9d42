"""Labeled dataset generation, splits, and JSON-lines persistence.

Each sample pairs a load vector theta with the reduced optimizer output
(non-slack generator active powers, then generator voltage magnitudes) and,
when available, its Jacobian with respect to the selected inputs. Failed and
degenerate instances are kept with status fields rather than dropped so
experiment statistics can report them; only feasible samples enter splits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .mlp import OutputScaling
from .netmodel import to_json
from .opf import OPTIMAL, SolverOptions, solve_opf
from .qcqp import QcqpModel
from .sensitivity import (
    finite_difference_jacobian,
    output_jacobian,
    reduced_output,
    sensitivity_record,
)


@dataclass
class TrainingSample:
    theta: np.ndarray  # full load vector
    inputs: np.ndarray  # selected entries, the DNN input
    y: np.ndarray  # reduced output, physical units, length 2Ng - 1
    jac: np.ndarray | None  # d y / d inputs, or None for value-only samples
    status: str  # solver status
    objective: float
    active_set: list
    degenerate: bool
    fd_column: int = -1  # input column spot-checked at generation time
    fd_error: float = np.nan  # relative error of that column

    @property
    def feasible(self):
        return self.status == OPTIMAL

    @property
    def value_only(self):
        return self.jac is None


@dataclass
class Dataset:
    model: QcqpModel
    samples: list

    @property
    def feasible_indices(self):
        return [i for i, s in enumerate(self.samples) if s.feasible]

    def summary(self):
        n = len(self.samples)
        feas = self.feasible_indices
        return {
            "samples": n,
            "feasible": len(feas),
            "value_only": sum(1 for i in feas if self.samples[i].value_only),
            "failed": n - len(feas),
        }


def sample_thetas(model: QcqpModel, n, lo=0.8, hi=1.2, seed=0):
    """Entry-wise uniform scaling of the nominal demands; zeros stay zero."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if hi < lo:
        raise ValueError("empty sampling interval")
    rng = np.random.default_rng(seed)
    theta0 = model.theta0
    return [theta0 * rng.uniform(lo, hi, size=theta0.shape) for _ in range(n)]


def sample_inputs_grid(model: QcqpModel, bounds, points_per_axis):
    """Regular grid over the selected inputs; bounds is [(lo, hi), ...]."""
    if len(bounds) != len(model.selected):
        raise ValueError("one (lo, hi) pair per selected input required")
    axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    inputs = np.stack([m.ravel() for m in mesh], axis=1)
    return [model.full_theta(row) for row in inputs]


def generate(model: QcqpModel, thetas, solver_tol=1e-8, fd_check=True,
             fd_rtol=1e-3, seed=0) -> Dataset:
    """Solve every instance and attach sensitivities.

    Per-instance failures (non-convergence, inconsistent sensitivity system)
    are recorded on the sample, never abort the batch. With fd_check, one
    random Jacobian column per sample is re-validated against central finite
    differences and a mismatch beyond fd_rtol raises.
    """
    rng = np.random.default_rng(seed)
    samples = []
    warm = None
    for theta in thetas:
        theta = np.asarray(theta, dtype=float)
        opts = SolverOptions(tol_kkt=solver_tol, max_iter=200)
        if warm is not None:
            opts.warm_start, opts.warm_duals = warm
        sol = solve_opf(model, theta, opts)
        if sol.status != OPTIMAL and warm is not None:
            # retry cold: warm starts can mislead far from the previous optimum
            sol = solve_opf(model, theta, SolverOptions(tol_kkt=solver_tol, max_iter=200))
        inputs = theta[model.selected]
        if sol.status != OPTIMAL:
            warm = None
            samples.append(TrainingSample(theta, inputs, None, None,
                                          sol.status, np.nan, [], False))
            continue
        warm = ((sol.v, sol.x_g), (sol.lam, sol.mu))
        y = reduced_output(model, sol.v, sol.x_g)
        rec = sensitivity_record(model, sol)
        jac = rec.j_out
        fd_col, fd_err = -1, np.nan
        if jac is not None and fd_check:
            col = int(rng.integers(len(model.selected)))
            full_col = int(model.selected[col])
            jfd = finite_difference_jacobian(model, theta, sol, columns=[full_col])
            jout_fd = output_jacobian(model, sol.v, jfd)[:, col]
            scale = max(1.0, float(np.max(np.abs(jout_fd))))
            fd_col, fd_err = col, float(np.max(np.abs(jac[:, col] - jout_fd)) / scale)
            if fd_err > fd_rtol:
                raise RuntimeError(
                    f"spot finite-difference check failed: column {col}, "
                    f"relative error {fd_err:.3e}"
                )
        samples.append(TrainingSample(theta, inputs, y, jac, sol.status,
                                      sol.objective, rec.active_set,
                                      rec.degenerate, fd_col, fd_err))
    return Dataset(model, samples)


@dataclass
class SplitPlan:
    sizes: list  # training sizes
    runs: int  # runs per size
    seed: int = 0

    def __post_init__(self):
        if self.runs < 1 or any(s < 1 for s in self.sizes):
            raise ValueError("sizes and runs must be positive")


def split(dataset: Dataset, plan: SplitPlan):
    """Deterministic (size, run) -> (train_indices, test_indices) pairs.

    Training indices are drawn without replacement from the feasible
    samples; the test set is the feasible complement.
    """
    pool = dataset.feasible_indices
    out = []
    for size in plan.sizes:
        if size >= len(pool):
            raise ValueError(f"training size {size} needs a pool larger than itself")
        for run in range(plan.runs):
            rng = np.random.default_rng((plan.seed, size, run))
            chosen = rng.choice(len(pool), size=size, replace=False)
            train = sorted(int(pool[i]) for i in chosen)
            test = sorted(set(pool) - set(train))
            out.append((size, run, train, test))
    return out


def output_box(model: QcqpModel):
    """Box limits of the reduced output vector, for label scaling."""
    net = model.network
    slack = net.slack_index
    lo, hi = [], []
    for g in net.generators:
        if net.bus_index(g.bus) != slack:
            lo.append(g.pmin)
            hi.append(g.pmax)
    for g in net.generators:
        b = net.buses[net.bus_index(g.bus)]
        lo.append(b.vmin)
        hi.append(b.vmax)
    return np.array(lo), np.array(hi)


def output_scaling(model: QcqpModel) -> OutputScaling:
    lo, hi = output_box(model)
    return OutputScaling(0.5 * (lo + hi), 0.5 * (hi - lo))


def input_scaling(dataset: Dataset) -> OutputScaling:
    """Affine normalization of the network inputs to roughly [-1, 1].

    Built from the ranges seen over the feasible pool, so it is a fixed,
    deterministic function of the dataset; constant input dimensions keep a
    unit scale (they encode to zero either way).
    """
    idx = dataset.feasible_indices
    if not idx:
        raise ValueError("no feasible samples to derive input scaling from")
    inputs = np.array([dataset.samples[i].inputs for i in idx])
    lo, hi = inputs.min(axis=0), inputs.max(axis=0)
    half = 0.5 * (hi - lo)
    return OutputScaling(0.5 * (lo + hi), np.where(half > 1e-9, half, 1.0))


def scaled_samples(dataset: Dataset, indices, scaling: OutputScaling = None):
    """(input, scaled label, scaled Jacobian or None) triples for training."""
    if scaling is None:
        scaling = output_scaling(dataset.model)
    out = []
    for i in indices:
        s = dataset.samples[i]
        if not s.feasible:
            raise ValueError(f"sample {i} is not feasible")
        jac = None if s.jac is None else scaling.encode_jacobian(s.jac)
        out.append((s.inputs, scaling.encode(s.y), jac))
    return out


def _network_hash(model: QcqpModel):
    return hashlib.sha256(to_json(model.network).encode()).hexdigest()[:16]


def save_dataset(dataset: Dataset, path):
    """JSON-lines: a header record, then one record per sample in order."""
    model = dataset.model
    header = {
        "record": "header",
        "network_hash": _network_hash(model),
        "theta_labels": [list(t) for t in model.theta_labels],
        "selected": model.selected.tolist(),
        "output_order": "p_g non-slack generators in generator order, "
                        "then |v| at generator buses in generator order",
        "n_out": 2 * model.ng - 1,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in dataset.samples:
            rec = {
                "record": "sample",
                "theta": s.theta.tolist(),
                "status": s.status,
                "objective": None if np.isnan(s.objective) else s.objective,
                "active_set": list(map(int, s.active_set)),
                "degenerate": bool(s.degenerate),
                "y": None if s.y is None else s.y.tolist(),
                "jac": None if s.jac is None else s.jac.tolist(),
                "fd_column": s.fd_column,
                "fd_error": None if np.isnan(s.fd_error) else s.fd_error,
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path, model: QcqpModel) -> Dataset:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise ValueError("dataset file must start with a header record")
    header = lines[0]
    if header["network_hash"] != _network_hash(model):
        raise ValueError("dataset was generated for a different network")
    if header["selected"] != model.selected.tolist():
        raise ValueError("dataset input selection does not match the model")
    samples = []
    for rec in lines[1:]:
        theta = np.asarray(rec["theta"], dtype=float)
        y = None if rec["y"] is None else np.asarray(rec["y"], dtype=float)
        jac = None if rec["jac"] is None else np.asarray(rec["jac"], dtype=float)
        samples.append(TrainingSample(
            theta, theta[model.selected], y, jac, rec["status"],
            np.nan if rec["objective"] is None else rec["objective"],
            rec["active_set"], rec["degenerate"], rec.get("fd_column", -1),
            np.nan if rec.get("fd_error") is None else rec["fd_error"],
        ))
    return Dataset(model, samples)
