import numpy as np
import pytest

from opfsense.dataset import (
    Dataset,
    SplitPlan,
    generate,
    input_scaling,
    load_dataset,
    output_box,
    output_scaling,
    sample_inputs_grid,
    sample_thetas,
    save_dataset,
    scaled_samples,
    split,
)


@pytest.fixture(scope="module")
def ds3(model3):
    thetas = sample_thetas(model3, 12, seed=1)
    return generate(model3, thetas, seed=1)


def test_sample_thetas_range_and_determinism(model3):
    a = sample_thetas(model3, 30, seed=7)
    b = sample_thetas(model3, 30, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    stacked = np.array(a)
    assert np.all(stacked >= 0.8 * model3.theta0 - 1e-12)
    assert np.all(stacked <= 1.2 * model3.theta0 + 1e-12)
    with pytest.raises(ValueError):
        sample_thetas(model3, 0)
    with pytest.raises(ValueError):
        sample_thetas(model3, 3, lo=1.2, hi=0.8)


def test_sample_thetas_zero_entries_stay_zero():
    from opfsense.netmodel import parse_case
    from opfsense.qcqp import assemble_qcqp
    from tests.conftest import CASE3

    net = parse_case(CASE3.replace("3	1	120	40", "3	1	120	0"))
    model = assemble_qcqp(net)
    assert model.theta0[1] == 0  # reactive demand removed above
    for th in sample_thetas(model, 5, seed=0):
        assert th[1] == 0 and th[0] > 0


def test_sample_inputs_grid(model3):
    thetas = sample_inputs_grid(model3, [(1.0, 1.4), (0.3, 0.5)], 3)
    assert len(thetas) == 9
    firsts = sorted({th[0] for th in thetas})
    assert firsts == pytest.approx([1.0, 1.2, 1.4])
    with pytest.raises(ValueError):
        sample_inputs_grid(model3, [(1.0, 1.4)], 3)


def test_generate_labels_and_jacobians(model3, ds3):
    assert ds3.summary()["samples"] == 12
    assert ds3.summary()["feasible"] == 12
    for s in ds3.samples:
        assert s.y.shape == (2 * model3.ng - 1,)
        assert s.jac.shape == (2 * model3.ng - 1, len(model3.selected))
        assert s.fd_error < 1e-3  # spot check recorded at generation time
        assert s.feasible and not s.value_only


def test_generate_keeps_failed_instances(model3):
    thetas = [model3.theta0, np.array([9.0, 2.0])]  # second is infeasible
    ds = generate(model3, thetas, seed=0)
    assert ds.summary() == {"samples": 2, "feasible": 1, "value_only": 0,
                            "failed": 1}
    bad = ds.samples[1]
    assert not bad.feasible and bad.y is None and np.isnan(bad.objective)


def test_split_plan(ds3):
    plan = SplitPlan(sizes=[4], runs=3, seed=5)
    parts = split(ds3, plan)
    assert len(parts) == 3
    for size, run, train, test in parts:
        assert size == 4 and len(train) == 4 and len(test) == 8
        assert not set(train) & set(test)
        assert sorted(train + test) == ds3.feasible_indices
    # deterministic
    again = split(ds3, plan)
    assert parts == again
    # distinct runs draw distinct training sets with high probability
    assert parts[0][2] != parts[1][2]
    with pytest.raises(ValueError):
        split(ds3, SplitPlan(sizes=[12], runs=1))
    with pytest.raises(ValueError):
        SplitPlan(sizes=[0], runs=1)


def test_output_box_excludes_slack_pg(model3):
    lo, hi = output_box(model3)
    assert len(lo) == 2 * model3.ng - 1
    gens = model3.network.generators
    slack = model3.network.slack_index
    nonslack = [g for g in gens if model3.network.bus_index(g.bus) != slack]
    assert lo[0] == nonslack[0].pmin and hi[0] == nonslack[0].pmax
    assert np.all(hi > lo)


def test_scaled_samples_roundtrip(model3, ds3):
    sc = output_scaling(model3)
    triples = scaled_samples(ds3, ds3.feasible_indices[:3], sc)
    for (x, y, J), i in zip(triples, ds3.feasible_indices[:3]):
        s = ds3.samples[i]
        assert np.allclose(sc.decode(y), s.y)
        assert np.all(np.abs(y) <= 1.0 + 1e-9)  # labels inside the box
        assert np.allclose(J * sc.scale[:, None], s.jac)


def test_scaled_samples_rejects_infeasible(model3):
    ds = generate(model3, [np.array([9.0, 2.0])], seed=0)
    with pytest.raises(ValueError, match="not feasible"):
        scaled_samples(ds, [0])


def test_input_scaling_covers_pool(ds3):
    sc = input_scaling(ds3)
    for i in ds3.feasible_indices:
        z = sc.encode(ds3.samples[i].inputs)
        assert np.all(np.abs(z) <= 1.0 + 1e-12)
    with pytest.raises(ValueError):
        input_scaling(Dataset(ds3.model, []))


def test_save_load_roundtrip(model3, ds3, tmp_path):
    path = tmp_path / "ds.jsonl"
    save_dataset(ds3, path)
    clone = load_dataset(path, model3)
    assert len(clone.samples) == len(ds3.samples)
    for a, b in zip(ds3.samples, clone.samples):
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.jac, b.jac)
        assert a.status == b.status and a.active_set == list(b.active_set)
    # canonical serialization is byte-stable
    path2 = tmp_path / "ds2.jsonl"
    save_dataset(clone, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_wrong_network(ds3, model_toy, tmp_path):
    path = tmp_path / "ds.jsonl"
    save_dataset(ds3, path)
    with pytest.raises(ValueError, match="different network"):
        load_dataset(path, model_toy)


def test_load_rejects_missing_header(model3, tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"record": "sample"}\n')
    with pytest.raises(ValueError, match="header"):
        load_dataset(path, model3)
