import json
import math

import numpy as np
import pytest

from rbcseg.imbalance import (ClassDistribution, WeightScheme, class_weights, focal_loss,
                              imbalance_ratio, summary_json, upsample_plan)

from oracles import CLASS_COUNTS


@pytest.fixture
def class_counts():
    return ClassDistribution.from_mapping(CLASS_COUNTS)


def test_inverse_sqrt_weight():
    d = ClassDistribution.from_mapping({"a": 4, "b": 9})
    assert class_weights(d, "inverse_sqrt") == {"a": 0.5, "b": pytest.approx(1 / 3)}


def test_inverse_weight_on_class_counts(class_counts):
    w = class_weights(class_counts, WeightScheme.inverse)
    assert w["Normal"] == pytest.approx(1.59083e-4, rel=1e-5)
    assert w["Normal"] == 1 / 6286


def test_uniform_weights(class_counts):
    assert set(class_weights(class_counts, "uniform").values()) == {1.0}


def test_cbrt_weights():
    d = ClassDistribution.from_mapping({"a": 8, "b": 27})
    w = class_weights(d, "inverse_cbrt")
    assert w["a"] == pytest.approx(0.5, rel=1e-15)
    assert w["b"] == pytest.approx(1 / 3, rel=1e-15)


def test_weight_ladder(class_counts):
    counts = sorted(CLASS_COUNTS.items(), key=lambda kv: kv[1])
    (lo, _), (hi, _) = counts[0], counts[-1]
    spreads = []
    for scheme in ("inverse", "inverse_sqrt", "inverse_cbrt"):
        w = class_weights(class_counts, scheme)
        for (na, fa), (nb, fb) in zip(counts, counts[1:]):
            if fa < fb:
                assert w[na] > w[nb]
        spreads.append(w[lo] / w[hi])
    assert spreads[0] > spreads[1] > spreads[2] > 1


def test_zero_count_weight_error():
    d = ClassDistribution.from_mapping({"a": 3, "empty": 0})
    with pytest.raises(ValueError, match="empty"):
        class_weights(d, "inverse")
    assert class_weights(d, "uniform")["empty"] == 1.0


def test_focal_loss_values():
    assert focal_loss(0.5, 0) == pytest.approx(0.6931472, abs=1e-7)
    assert focal_loss(0.5, 2) == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert focal_loss(1.0, 3.5) == 0.0
    grid = np.linspace(1e-6, 1, 1000)
    assert np.abs(focal_loss(grid, 0) + np.log(grid)).max() <= 1e-12


def test_focal_loss_monotone():
    p = np.linspace(0.01, 0.99, 99)
    gammas = [0, 0.5, 1, 2, 5]
    losses = [focal_loss(p, g) for g in gammas]
    for a, b in zip(losses, losses[1:]):
        assert np.all(b <= a)
    for row in losses:
        assert np.all(np.diff(row) <= 0)


def test_focal_loss_domain():
    for bad in (0.0, -0.1, 1.01, float("nan")):
        with pytest.raises(ValueError):
            focal_loss(bad)
    with pytest.raises(ValueError):
        focal_loss(0.5, -1)


def test_imbalance_ratio(class_counts):
    assert imbalance_ratio(class_counts) == pytest.approx(34.538, abs=1e-3)
    assert imbalance_ratio(ClassDistribution.from_mapping({"a": 5, "b": 5})) == 1.0
    assert imbalance_ratio(ClassDistribution.from_mapping({"a": 10, "b": 5})) == 2.0
    with pytest.raises(ValueError):
        imbalance_ratio(ClassDistribution.from_mapping({"a": 10, "b": 0}))


def test_upsample_plan_class_counts(class_counts):
    plan = upsample_plan(class_counts, "Normal").as_dict()
    assert plan["Teardrop"] == {"count": 305, "copies": 20, "remainder": 186, "total": 6286}
    assert plan["Normal"]["copies"] == 1 and plan["Normal"]["remainder"] == 0
    assert {v["total"] for v in plan.values()} == {6286}
    for v in plan.values():
        assert v["remainder"] < v["count"]


def test_upsample_indices_reconstruct_totals(class_counts):
    plan = upsample_plan(class_counts, "Normal")
    for name in class_counts.names:
        idx = plan.indices(name)
        assert len(idx) == 6286
        counts = np.bincount(idx, minlength=class_counts.count(name))
        assert counts.max() - counts.min() <= 1
    first = plan.indices("Teardrop")
    assert np.array_equal(first[-186:], np.arange(186))
    seeded = plan.indices("Teardrop", seed=7)
    assert np.array_equal(seeded, plan.indices("Teardrop", seed=7))
    assert len(set(seeded[-186:])) == 186


def test_upsample_errors(class_counts):
    with pytest.raises(KeyError):
        upsample_plan(class_counts, "Platelet")
    with pytest.raises(ValueError):
        upsample_plan(class_counts, "Teardrop")  # larger classes cannot shrink
    with pytest.raises(ValueError):
        upsample_plan(ClassDistribution.from_mapping({"a": 5, "b": 0}), "a")


def test_distribution_validation():
    with pytest.raises(ValueError):
        ClassDistribution(())
    with pytest.raises(ValueError):
        ClassDistribution((("a", 1), ("a", 2)))
    with pytest.raises(ValueError):
        ClassDistribution((("a", -1),))
    with pytest.raises(ValueError):
        ClassDistribution((("a", 0),))


def test_csv_input(tmp_path):
    text = "class,count\n" + "\n".join(f"{k},{v}" for k, v in CLASS_COUNTS.items()) + "\n"
    d = ClassDistribution.from_csv(text)
    assert d.names == list(CLASS_COUNTS)
    path = tmp_path / "counts.csv"
    path.write_text(text)
    assert ClassDistribution.from_csv(path).total == sum(CLASS_COUNTS.values())
    with pytest.raises(ValueError):
        ClassDistribution.from_csv("name,n\na,1\n")


def test_summary_json(class_counts):
    doc = json.loads(summary_json(class_counts, "Normal"))
    assert doc["counts"]["Teardrop"] == 305
    assert doc["weights"]["uniform"]["Normal"] == 1.0
    assert doc["upsample"]["Uncategorised"]["total"] == 6286
    assert "upsample" not in json.loads(summary_json(class_counts))
