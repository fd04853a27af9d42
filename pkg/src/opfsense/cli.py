"""Command-line interface.

    opf-sense parse|pf|opf|sense|dataset|train|eval|report
              --case PATH_OR_NAME [--config PATH] [--seed N] [--out PATH]

The config file is plain "key = value" text (values parsed as JSON when
possible). On success the exit code is 0; any failure prints a single-line
JSON error object to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import case_path
from .dataset import (
    SplitPlan,
    generate,
    input_scaling,
    load_dataset,
    output_scaling,
    sample_inputs_grid,
    sample_thetas,
    save_dataset,
    scaled_samples,
)
from .expcli import run_and_report, violation_report
from .mlp import TrainConfig, init_model, load_model, mse, save_model, train
from .netmodel import parse_case, to_json
from .opf import SolverOptions, solve_opf
from .powerflow import nominal_spec, solve_pf
from .qcqp import assemble_qcqp
from .sensitivity import sensitivity_record


def _load_config(path):
    cfg = {}
    if path is None:
        return cfg
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                cfg[key] = json.loads(value)
            except json.JSONDecodeError:
                cfg[key] = value
    return cfg


def _read_case(args, cfg):
    path = args.case
    if path is None:
        raise ValueError("--case is required for this command")
    try:
        text = open(path).read()
    except FileNotFoundError:
        bundled = case_path(path if path.endswith(".m") else path + ".m")
        if not bundled.is_file():
            raise FileNotFoundError(f"case file not found: {path}")
        text = bundled.read_text()
    return parse_case(
        text,
        cost_mode=cfg.get("cost_mode", "reject"),
        flow_limit=cfg.get("flow_limit", "current"),
        strip_gen_bus_loads=bool(cfg.get("strip_gen_bus_loads", False)),
    )


def _model_from(args, cfg):
    network = _read_case(args, cfg)
    param_spec = cfg.get("param_spec")
    if param_spec is not None:
        param_spec = [(int(b), str(pq)) for b, pq in param_spec]
    return assemble_qcqp(network, param_spec=param_spec)


def _emit(doc, out):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_parse(args, cfg):
    network = _read_case(args, cfg)
    text = to_json(network)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_pf(args, cfg):
    network = _read_case(args, cfg)
    sol = solve_pf(network, nominal_spec(network),
                   tol=float(cfg.get("tol", 1e-9)))
    if not sol.converged:
        raise RuntimeError(f"power flow did not converge "
                           f"(mismatch {sol.max_mismatch:.3e})")
    _emit({
        "converged": sol.converged,
        "iterations": sol.iterations,
        "max_mismatch": sol.max_mismatch,
        "vm": np.abs(sol.v).tolist(),
        "va_deg": np.degrees(np.angle(sol.v)).tolist(),
        "p_slack": sol.p_slack,
    }, args.out)


def _solve(model, cfg):
    theta = model.theta0.copy()
    scale = cfg.get("theta_scale")
    if scale is not None:
        theta = theta * float(scale)
    opts = SolverOptions(tol_kkt=float(cfg.get("tol", 1e-8)),
                         max_iter=int(cfg.get("max_iter", 200)))
    sol = solve_opf(model, theta, opts)
    if sol.status != "optimal":
        raise RuntimeError(f"OPF terminated with status {sol.status} "
                           f"(kkt residuals {tuple(map(float, sol.kkt))})")
    return sol


def _cmd_opf(args, cfg):
    model = _model_from(args, cfg)
    sol = _solve(model, cfg)
    nb = model.nb
    _emit({
        "status": sol.status,
        "objective": sol.objective,
        "iterations": sol.iterations,
        "kkt": [float(x) for x in sol.kkt],
        "p_g": sol.x_g[: model.ng].tolist(),
        "q_g": sol.x_g[model.ng :].tolist(),
        "vm": np.hypot(sol.v[:nb], sol.v[nb:]).tolist(),
        "binding": [int(i) for i in np.flatnonzero(sol.mu > 1e-6)],
    }, args.out)


def _cmd_sense(args, cfg):
    model = _model_from(args, cfg)
    sol = _solve(model, cfg)
    rec = sensitivity_record(model, sol)
    doc = {
        "degenerate": rec.degenerate,
        "rank_deficient": rec.rank_deficient,
        "active_set": [int(i) for i in rec.active_set],
        "dual_caveat": rec.dual_caveat,
    }
    if rec.j_out is not None:
        doc["residual"] = rec.residual
        doc["output_jacobian"] = rec.j_out.tolist()
    _emit(doc, args.out)


def _cmd_dataset(args, cfg):
    if args.out is None:
        raise ValueError("--out is required for dataset generation")
    model = _model_from(args, cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    grid = cfg.get("grid")
    if grid is not None:
        bounds = [(float(lo), float(hi)) for lo, hi in cfg["bounds"]]
        thetas = sample_inputs_grid(model, bounds, int(grid))
    else:
        thetas = sample_thetas(model, int(cfg.get("n", 100)),
                               lo=float(cfg.get("lo", 0.8)),
                               hi=float(cfg.get("hi", 1.2)), seed=seed)
    ds = generate(model, thetas, solver_tol=float(cfg.get("tol", 1e-8)),
                  fd_check=bool(cfg.get("fd_check", True)), seed=seed)
    save_dataset(ds, args.out)
    print(json.dumps(ds.summary()))


def _prepare_training(args, cfg):
    model = _model_from(args, cfg)
    ds = load_dataset(cfg["dataset"], model)
    scaling = output_scaling(model)
    samples = scaled_samples(ds, ds.feasible_indices, scaling)
    return model, ds, scaling, samples


def _cmd_train(args, cfg):
    if args.out is None:
        raise ValueError("--out is required to store the trained model")
    model, ds, scaling, samples = _prepare_training(args, cfg)
    hidden = [int(u) for u in cfg.get("hidden", [256, 256, 256, 256])]
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    net = init_model([len(model.selected)] + hidden + [2 * model.ng - 1],
                     seed=seed, scaling=scaling, input_scaling=input_scaling(ds))
    tc = TrainConfig(rho=float(cfg.get("rho", 20.0)),
                     lr0=float(cfg.get("lr0", 5e-4)),
                     epochs=int(cfg.get("epochs", 2000)), seed=seed)
    curve = train(net, samples, tc)
    save_model(net, args.out)
    print(json.dumps({"final_loss": curve[-1] if curve else None,
                      "train_mse": mse(net, samples)}))


def _cmd_eval(args, cfg):
    model, ds, scaling, samples = _prepare_training(args, cfg)
    net = load_model(cfg["model"])
    doc = {"mse": mse(net, samples)}
    if cfg.get("violations", True):
        vs = violation_report(ds, ds.feasible_indices, net)
        doc["violations"] = {
            "instances": vs.instances,
            "pf_failures": vs.pf_failures,
            "violations_per_instance": vs.violations_per_instance,
            "max_violation": vs.max_violation,
            "mean_violation": vs.mean_violation,
        }
    _emit(doc, args.out)


def _cmd_report(args, cfg):
    if args.out is None:
        raise ValueError("--out directory is required for report")
    model = _model_from(args, cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    if "dataset" in cfg:
        ds = load_dataset(cfg["dataset"], model)
    else:
        thetas = sample_thetas(model, int(cfg.get("n", 200)),
                               lo=float(cfg.get("lo", 0.8)),
                               hi=float(cfg.get("hi", 1.2)), seed=seed)
        ds = generate(model, thetas, fd_check=bool(cfg.get("fd_check", True)),
                      seed=seed)
    plan = SplitPlan([int(s) for s in cfg.get("sizes", [10])],
                     int(cfg.get("runs", 5)), seed=seed)
    hidden = [int(u) for u in cfg.get("hidden", [256, 256, 256, 256])]
    _, paths = run_and_report(
        ds, plan, hidden, args.out,
        epochs=int(cfg.get("epochs", 2000)),
        rho=float(cfg.get("rho", 20.0)),
        lr0=float(cfg.get("lr0", 5e-4)),
        with_violations=bool(cfg.get("violations", True)),
    )
    print(json.dumps({"outputs": paths}))


_COMMANDS = {
    "parse": _cmd_parse,
    "pf": _cmd_pf,
    "opf": _cmd_opf,
    "sense": _cmd_sense,
    "dataset": _cmd_dataset,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="opf-sense",
        description="Parametric AC-OPF sensitivities and predictor training.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--case", help="case file path or bundled case name")
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output file or directory")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        _COMMANDS[args.command](args, cfg)
    except Exception as exc:  # single error funnel: JSON on stderr
        err = {"error": type(exc).__name__, "message": str(exc),
               "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
