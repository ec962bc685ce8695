import json
import math

import pytest

from srpmoe.acceptance import (
    ablation_variants,
    check_accuracy_drop,
    check_agent_order,
    check_augmentation_gap,
    check_cost_trend,
    check_frontier,
    check_oracle,
    check_overfit_cost,
    check_published_endpoints,
    main,
    per_lambda,
)
from srpmoe.evaluator import export_metrics_csv
from srpmoe.schema import MetricsRecord

PROBE = [
    {"expert": "tsf-b", "cost_tflops": 0.59, "test_acc": 85.0},
    {"expert": "vmae-b", "cost_tflops": 2.7, "test_acc": 89.0},
    {"expert": "vmae-l", "cost_tflops": 8.9, "test_acc": 91.0},
]


def record(lam, seed=1, test_acc=90.0, avg_tflops=5.0, train_acc=None, **kwargs):
    fields = dict(
        lam=lam,
        seed=seed,
        agent="dqn",
        mode="direct",
        augment=True,
        overfit=False,
        train_acc=test_acc + 1.0 if train_acc is None else train_acc,
        test_acc=test_acc,
        avg_tflops=avg_tflops,
        acc_per_tflop=test_acc / avg_tflops,
        episodes=100,
    )
    fields.update(kwargs)
    return MetricsRecord(**fields)


def sweep_records(costs, accs, **kwargs):
    lams = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    return [
        record(lam, seed, acc, cost, **kwargs)
        for lam, cost, acc in zip(lams, costs, accs)
        for seed in (1, 2, 3)
    ]


def test_per_lambda_skips_failed_cells():
    failed = record(0.0, seed=2, test_acc=math.nan, avg_tflops=math.nan, failed=True)
    table = per_lambda([record(0.0, test_acc=80.0), failed, record(0.5, test_acc=70.0)])
    assert table["lambda"].to_list() == [0.0, 0.5]
    assert table["test_acc"].to_list() == [80.0, 70.0]
    assert table["cells"].to_list() == [1, 1]
    with pytest.raises(ValueError):
        per_lambda([failed])


def test_cost_trend():
    falling = sweep_records([9.0, 7.0, 5.0, 5.5, 2.0, 1.0], [90.0] * 6)
    result = check_cost_trend(falling)
    # one swapped neighbour pair still clears -0.9
    assert result.passed
    assert result.value == pytest.approx(-0.942857, abs=1e-5)
    flat = check_cost_trend(sweep_records([3.0] * 6, [90.0] * 6))
    assert not flat.passed
    rising = check_cost_trend(sweep_records([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [90.0] * 6))
    assert not rising.passed and rising.value == pytest.approx(1.0)


def test_accuracy_drop():
    records = sweep_records([9.0] * 6, [91.0, 90.0, 90.0, 89.0, 88.0, 87.5])
    result = check_accuracy_drop(records)
    assert result.passed and result.value == pytest.approx(3.5)
    assert not check_accuracy_drop(sweep_records([9.0] * 6, [88.0] * 6)).passed
    with pytest.raises(ValueError):
        check_accuracy_drop(records, high=0.9)


def test_frontier():
    records = sweep_records([5.0, 4.0, 3.0, 2.0, 1.0, 0.6], [90.5, 90.2, 89.0, 88.0, 86.0, 85.0])
    at_zero = check_frontier(records, PROBE)
    assert at_zero.passed
    assert at_zero.value == pytest.approx(5.0 / 8.9)
    # any lambda, wider gap: the cheapest router within 3 points
    relaxed = check_frontier(records, PROBE, lambdas=None, max_gap=3.0)
    assert relaxed.value == pytest.approx(2.0 / 8.9)
    too_costly = sweep_records([6.0] * 6, [91.0] * 6)
    assert not check_frontier(too_costly, PROBE).passed
    too_weak = check_frontier(sweep_records([1.0] * 6, [85.0] * 6), PROBE)
    assert not too_weak.passed and math.isnan(too_weak.value)
    assert too_weak.to_dict()["value"] is None


def test_agent_order_uses_matched_lambdas():
    dqn = sweep_records([5.0] * 6, [90.0, 90.0, 89.0, 88.0, 87.0, 86.0])
    pg = [record(0.0, seed, 88.0, agent="pg") for seed in (1, 2, 3)]
    result = check_agent_order(dqn, pg)
    assert result.passed and result.value == pytest.approx(2.0)
    better = [record(0.0, seed, 95.0, agent="pg") for seed in (1, 2, 3)]
    assert not check_agent_order(dqn, better).passed
    with pytest.raises(ValueError):
        check_agent_order(dqn, [record(0.9, agent="pg")])


def test_augmentation_gap():
    augmented = [record(0.2, seed, 85.0, train_acc=88.0) for seed in (1, 2, 3)]
    plain = [record(0.2, seed, 84.0, train_acc=97.0, augment=False) for seed in (1, 2, 3)]
    result = check_augmentation_gap(augmented, plain)
    assert result.passed and result.value == pytest.approx(10.0)
    assert not check_augmentation_gap(plain, augmented).passed


def test_overfit_cost():
    base = [record(lam, seed, avg_tflops=3.0) for lam in (0.2, 0.3) for seed in (1, 2)]
    overfit = [
        record(lam, seed, avg_tflops=6.0, overfit=True) for lam in (0.2, 0.3) for seed in (1, 2)
    ]
    result = check_overfit_cost(base, overfit)
    assert result.passed and result.value == pytest.approx(3.0)
    assert not check_overfit_cost(base, base).passed


def test_published_endpoints():
    result = check_published_endpoints()
    assert result.passed, result.detail


def test_oracle_means_over_seeds():
    reports = [
        {"K": 8, "lambda": 0.0, "ratio": 0.97},
        {"K": 8, "lambda": 0.0, "ratio": 0.94},
        {"K": 8, "lambda": 0.0, "ratio": 0.96},
        {"K": 16, "lambda": 0.5, "ratio": 0.99},
    ]
    result = check_oracle(reports)
    assert result.passed
    assert result.value == pytest.approx(0.9566667, abs=1e-6)
    assert not check_oracle(reports + [{"K": 16, "lambda": 0.5, "ratio": None}]).passed
    assert not check_oracle(reports, min_ratio=0.97).passed
    with pytest.raises(ValueError):
        check_oracle([])


def test_ablation_variants():
    rows = [
        record(0.2),
        record(0.2, agent="pg"),
        record(0.2, mode="aggregated"),
        record(0.2, augment=False),
        record(0.2, overfit=True),
    ]
    variants = ablation_variants(rows)
    assert {name: len(group) for name, group in variants.items()} == {
        "dqn": 1,
        "pg": 1,
        "aggregated": 1,
        "no_augment": 1,
        "overfit": 1,
    }
    assert variants["overfit"][0].overfit and variants["pg"][0].agent == "pg"


def write_results(root, dqn_costs):
    dqn = sweep_records(dqn_costs, [91.0, 90.5, 90.0, 89.0, 88.0, 87.0])
    pg = sweep_records(dqn_costs, [85.0] * 6, agent="pg")
    cells = [(lam, seed) for lam in (0.0, 0.5) for seed in (1, 2)]
    ablations = (
        [record(lam, seed, 90.0, 3.0, train_acc=91.0) for lam, seed in cells]
        + [record(lam, seed, 89.0, 3.0, train_acc=99.0, augment=False) for lam, seed in cells]
        + [record(lam, seed, 89.0, 6.0, overfit=True) for lam, seed in cells]
    )
    for name, rows, file_name in (
        ("sweep_dqn", dqn, "metrics.csv"),
        ("sweep_pg", pg, "metrics.csv"),
        ("ablations", ablations, "ablations.csv"),
    ):
        (root / name).mkdir(parents=True)
        export_metrics_csv(rows, str(root / name / file_name))
    (root / "probe").mkdir()
    (root / "probe" / "probe.json").write_text(json.dumps(PROBE), encoding="utf-8")
    for k in (8, 16):
        (root / f"oracle_k{k}").mkdir()
        report = {
            "optimal_value": 0.8,
            "learned_value": 0.79,
            "ratio": 0.79 / 0.8,
            "K": k,
            "lambda": 0.2,
        }
        (root / f"oracle_k{k}" / "oracle.json").write_text(json.dumps(report), encoding="utf-8")


def test_main_passes_on_expected_trends(tmp_path):
    write_results(tmp_path, [5.0, 4.0, 3.0, 2.0, 1.0, 0.6])
    assert main(["--root", str(tmp_path)]) == 0
    with open(tmp_path / "check.json", encoding="utf-8") as f:
        checks = json.load(f)
    assert [c["name"] for c in checks] == [
        "cost_trend",
        "accuracy_drop",
        "frontier",
        "pg_not_above_dqn",
        "augmentation_gap",
        "overfit_cost",
        "published_endpoints",
        "oracle_ratio",
    ]
    assert all(c["passed"] for c in checks)


def test_main_fails_on_broken_trend(tmp_path):
    write_results(tmp_path, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert main(["--root", str(tmp_path)]) == 2
    with open(tmp_path / "check.json", encoding="utf-8") as f:
        checks = {c["name"]: c["passed"] for c in json.load(f)}
    assert not checks["cost_trend"]
    assert checks["published_endpoints"]


def test_main_missing_results(tmp_path):
    assert main(["--root", str(tmp_path / "nowhere")]) == 1
