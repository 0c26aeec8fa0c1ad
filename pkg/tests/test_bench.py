import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtvrp.bench import (CVRPLibError, MissingReference, ReferenceRecord, collect_embeddings, eval_suite, gap,
                         hausdorff, load_references, parse_cvrplib, plot_gaps, reference_value)
from mtvrp.core import build_distance_matrix, dumps_instance, loads_instance, validate_instance
from mtvrp.instancegen import GenConfig, gen_batch
from mtvrp.policy import ModelConfig, init_params

VRP = "\n".join([
    "NAME : toy-n4",
    "COMMENT : hand made",
    "TYPE : CVRP",
    "DIMENSION : 5",
    "EDGE_WEIGHT_TYPE : EUC_2D",
    "CAPACITY : 100",
    "NODE_COORD_SECTION",
    " 1 500 250",
    " 2 0 0",
    " 3 1000 1000",
    " 4 250 750",
    " 5 1000 0",
    "DEMAND_SECTION",
    "1 10",
    "2 100",
    "3 0",
    "4 37",
    "5 3",
    "DEPOT_SECTION",
    " 3",
    " -1",
    "EOF",
    "",
])


def test_parse_toy():
    inst = parse_cvrplib(VRP)
    assert inst.name == "toy-n4" and inst.n == 4 and inst.variant == "CVRP"
    np.testing.assert_allclose(inst.coords[0], [1, 1])          # depot is node 3 of the file
    np.testing.assert_allclose(inst.coords[1], [0.5, 0.25])
    np.testing.assert_allclose(inst.demands, [0, 0.1, 1.0, 0.37, 0.03])
    assert validate_instance(inst) == []


def test_parse_preserves_aspect_ratio():
    text = VRP.replace(" 3 1000 1000", " 3 1000 500").replace(" 4 250 750", " 4 250 400")
    inst = parse_cvrplib(text)
    assert inst.coords[:, 0].max() == 1.0 and inst.coords[:, 1].max() == 0.5


def test_parse_roundtrip_distance_matrix():
    inst = parse_cvrplib(VRP)
    back = loads_instance(dumps_instance(inst))
    assert np.abs(build_distance_matrix(back) - build_distance_matrix(inst)).max() <= 1e-12


@pytest.mark.parametrize("broken, message", [
    (VRP.replace("DEMAND_SECTION", "DEMANDS"), "unexpected line|missing DEMAND_SECTION"),
    (VRP.replace("4 37", "4 3.5"), "non-integer"),
    (VRP.replace(" 3\n -1", " 3\n 1\n -1"), "exactly one depot"),
    (VRP.replace("CAPACITY : 100\n", ""), "missing CAPACITY"),
    (VRP.replace("2 100", "2 101"), "CAPACITY"),
])
def test_parse_errors(broken, message):
    with pytest.raises(CVRPLibError, match=message):
        parse_cvrplib(broken)


def test_gap_examples():
    assert round(gap(10.56, 10.38), 2) == 1.73
    assert gap(7.5, 7.5) == 0.0
    assert round(gap(16.80, 16.30), 2) == 3.07
    with pytest.raises(ValueError):
        gap(1.0, 0.0)


@given(st.floats(0.1, 100), st.floats(0.1, 100), st.floats(0.01, 100))
def test_gap_scale_invariance(c, r, a):
    assert gap(a * c, a * r) == pytest.approx(gap(c, r), rel=1e-9, abs=1e-9)


def test_hausdorff_examples():
    assert hausdorff([[0, 0]], [[3, 4]]) == 5.0
    pts = np.random.default_rng(0).random((20, 3))
    assert hausdorff(pts, pts) == 0.0
    with pytest.raises(ValueError):
        hausdorff(np.zeros((0, 2)), pts[:, :2])


point_sets = st.integers(1, 12).flatmap(
    lambda k: st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=k, max_size=k))


@given(point_sets, point_sets, point_sets)
def test_hausdorff_metric_properties(a, b, c):
    ab, ba = hausdorff(a, b), hausdorff(b, a)
    assert ab == ba
    assert hausdorff(a, c) <= ab + hausdorff(b, c) + 1e-9
    if set(a) != set(b):
        assert ab > 0


def test_references_file():
    refs = load_references()
    assert reference_value(refs, "HGS", "CVRP", 50) == 10.38
    assert reference_value(refs, "paper-table", "CVRP", 50) == 10.56
    assert all(r.provenance for r in refs)
    with pytest.raises(MissingReference):
        reference_value(refs, "HGS", "CVRP", 20)
    with pytest.raises(ValueError):
        ReferenceRecord("HGS", "CVRP", 50, -1.0, "x")
    with pytest.raises(ValueError):
        ReferenceRecord("HGS", "CVRP", 50, 1.0, "")


def test_collect_embeddings_seeded():
    model = init_params(ModelConfig(embed_dim=16, n_layers=1, n_heads=2, ff_hidden=32), 0)
    instances = gen_batch("CVRP", GenConfig(n=8), 3, 0) + gen_batch("VRPTW", GenConfig(n=8), 3, 1)
    a = collect_embeddings(model, instances, k=40, seed=5)
    b = collect_embeddings(model, instances, k=40, seed=5)
    assert len(a) == 80
    assert {s.variant for s in a} == {"CVRP", "VRPTW"}
    assert all(s.vector.shape == (16,) for s in a)
    assert all(np.array_equal(x.vector, y.vector) for x, y in zip(a, b))


def test_eval_suite_shape(tmp_path):
    model = init_params(ModelConfig(embed_dim=16, n_layers=1, n_heads=2, ff_hidden=32), 0)
    solvers = ["ni", "fi", "greedy", "aug8", "bruteforce"]
    report = eval_suite(model, ["CVRP", "OVRPL"], 7, 3, solvers, reference="bruteforce")
    assert len(report.rows) == 3 * 2 * 5
    assert len(report.summary) == 2 * 5
    assert all(r["feasible"] for r in report.rows)
    for row in report.summary:
        assert row["gap_pct"] >= -1e-9
        if row["solver"] == "bruteforce":
            assert row["gap_pct"] == 0
    paths = report.write(tmp_path)
    assert json.loads(paths[0].read_text())["reference"] == "bruteforce"
    assert len(paths[2].read_text().splitlines()) == 31
    assert plot_gaps(report.summary, tmp_path / "gaps.png").stat().st_size > 0


def test_eval_suite_reference_errors():
    with pytest.raises(MissingReference):
        eval_suite(None, ["CVRP"], 6, 1, ["ni"], reference="fi")
    with pytest.raises(MissingReference):
        eval_suite(None, ["CVRP"], 6, 1, ["ni"], reference="table:HGS")
    r = eval_suite(None, ["CVRP"], 50, 1, ["ni"], reference="table:HGS")
    assert r.summary[0]["gap_pct"] == pytest.approx(gap(r.summary[0]["mean_cost"], 10.38))
