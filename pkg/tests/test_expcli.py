import numpy as np
import pytest

from opfsense.dataset import SplitPlan, generate, sample_thetas
from opfsense.expcli import (
    P_DNN,
    SI_DNN,
    emit_reports,
    run_and_report,
    run_experiment,
    violation_report,
)


@pytest.fixture(scope="module")
def ds3(model3):
    return generate(model3, sample_thetas(model3, 16, seed=3), seed=3)


@pytest.fixture(scope="module")
def results(ds3):
    plan = SplitPlan(sizes=[5], runs=2, seed=9)
    return run_experiment(ds3, plan, hidden=[8], epochs=40, keep_models=True)


def test_run_experiment_structure(results):
    assert len(results) == 4  # 2 runs x 2 variants
    variants = [(r.size, r.run, r.variant) for r in results]
    assert (5, 0, P_DNN) in variants and (5, 1, SI_DNN) in variants
    for r in results:
        assert r.test_mse >= 0 and r.train_mse >= 0
        assert len(r.curve) == 40
        assert r.test_mse_per_output.shape == (r.model.n_out,)
        assert np.mean(r.test_mse_per_output) == pytest.approx(r.test_mse)


def test_variants_share_training_data(results):
    by_run = {}
    for r in results:
        by_run.setdefault(r.run, []).append(r)
    for run, pair in by_run.items():
        assert pair[0].label_hash == pair[1].label_hash
    assert results[0].label_hash != results[2].label_hash  # distinct runs


def test_p_dnn_has_zero_rho(results):
    for r in results:
        assert (r.rho == 0.0) == (r.variant == P_DNN)


def test_experiment_deterministic(ds3):
    plan = SplitPlan(sizes=[5], runs=1, seed=9)
    a = run_experiment(ds3, plan, hidden=[8], epochs=15)
    b = run_experiment(ds3, plan, hidden=[8], epochs=15)
    for ra, rb in zip(a, b):
        assert ra.test_mse == rb.test_mse
        assert ra.curve == rb.curve


def test_violation_report(ds3, results):
    r = next(r for r in results if r.variant == SI_DNN)
    stats = violation_report(ds3, r.test_indices, r.model)
    assert stats.instances + stats.pf_failures == len(r.test_indices)
    assert stats.instances > 0
    assert stats.max_violation >= stats.mean_violation >= 0.0
    assert stats.violations_per_instance >= 0.0


def test_emit_reports_and_files(results, ds3, tmp_path):
    stats = violation_report(ds3, results[0].test_indices, results[0].model)
    paths = emit_reports(results, tmp_path, {(5, 0, P_DNN): stats})
    for key in ("runs", "mse_table", "violations", "timing",
                "loss_curves", "mse_vs_size"):
        assert key in paths
    runs = (tmp_path / "runs.csv").read_text().splitlines()
    assert runs[0] == "size,run,variant,rho,train_mse,test_mse,label_hash"
    assert len(runs) == 1 + len(results)
    mse_lines = (tmp_path / "mse_table.csv").read_text().splitlines()
    assert len(mse_lines) == 3  # header + one row per variant
    assert "wall_time" not in (tmp_path / "runs.csv").read_text()
    svg = (tmp_path / "loss_curves.svg").read_text()
    assert svg.lstrip().startswith("<?xml")


def test_value_tables_byte_identical_across_reruns(ds3, tmp_path):
    plan = SplitPlan(sizes=[5], runs=1, seed=4)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        res = run_experiment(ds3, plan, hidden=[8], epochs=15)
        emit_reports(res, out)
    for name in ("runs.csv", "mse_table.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_run_and_report_end_to_end(ds3, tmp_path):
    plan = SplitPlan(sizes=[5], runs=1, seed=2)
    results, paths = run_and_report(ds3, plan, hidden=[8], out_dir=tmp_path,
                                    epochs=15)
    assert len(results) == 2
    assert (tmp_path / "violations.csv").exists()
    lines = (tmp_path / "violations.csv").read_text().splitlines()
    assert len(lines) == 3  # header + both variants
