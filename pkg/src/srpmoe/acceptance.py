"""Trend checks over the outputs of a reproduction run.

Reads the sweeps, ablations, probe points and oracle reports that reproduce.sh
writes under one root, evaluates each expected trend, writes check.json next to
them and exits with status 2 when any check fails.
"""

import argparse
import glob
import json
import math
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np
import polars as pl
from loguru import logger
from scipy.stats import spearmanr

from srpmoe.evaluator import acc_per_cost, read_metrics_csv
from srpmoe.schema import MetricsRecord

# (test accuracy %, avg TFLOPs, accuracy per TFLOP truncated to one decimal)
PUBLISHED_ENDPOINTS = [(92.2, 3.38, 27.2), (89.2, 0.96, 92.9)]


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | None
    detail: str

    def to_dict(self):
        row = asdict(self)
        if row["value"] is not None and math.isnan(row["value"]):
            row["value"] = None
        return row


def per_lambda(records: list[MetricsRecord]) -> pl.DataFrame:
    """Means over the finished cells of every lambda, sorted by lambda."""
    rows = [r.to_row() for r in records if not r.failed]
    if not rows:
        raise ValueError("No finished cells to aggregate")
    return (
        pl.DataFrame(rows)
        .group_by("lambda")
        .agg(
            pl.col("test_acc").mean(),
            (pl.col("train_acc") - pl.col("test_acc")).mean().alias("gap"),
            pl.col("avg_tflops").mean(),
            pl.len().alias("cells"),
        )
        .sort("lambda")
    )


def _at(table: pl.DataFrame, lam: float, column: str) -> float:
    values = table.filter((pl.col("lambda") - lam).abs() < 1e-9)[column]
    if values.len() == 0:
        raise ValueError(f"No finished cells at lambda={lam}")
    return float(values[0])


def _matched(
    a: list[MetricsRecord], b: list[MetricsRecord]
) -> tuple[list[MetricsRecord], list[MetricsRecord]]:
    """Restrict both record sets to the lambdas they share."""
    shared = {round(r.lam, 9) for r in a} & {round(r.lam, 9) for r in b}
    if not shared:
        raise ValueError("Record sets share no lambda")
    return (
        [r for r in a if round(r.lam, 9) in shared],
        [r for r in b if round(r.lam, 9) in shared],
    )


def _mean(records: list[MetricsRecord], column: str) -> float:
    return float(per_lambda(records)[column].mean())


def check_cost_trend(records: list[MetricsRecord], max_rho: float = -0.9) -> CheckResult:
    table = per_lambda(records)
    if table.height < 3:
        raise ValueError(f"Cost trend needs at least 3 lambdas, got {table.height}")
    costs = table["avg_tflops"].to_numpy()
    rho = float(spearmanr(table["lambda"].to_numpy(), costs).statistic)
    non_increasing = bool(np.all(np.diff(costs) <= 1e-9))
    return CheckResult(
        "cost_trend",
        # nan (constant costs) fails
        bool(rho <= max_rho),
        rho,
        f"per-lambda mean TFLOPs {np.round(costs, 3).tolist()}, "
        f"Spearman rho {rho:.3f}, non-increasing {non_increasing}",
    )


def check_accuracy_drop(
    records: list[MetricsRecord], low: float = 0.0, high: float = 0.5
) -> CheckResult:
    table = per_lambda(records)
    acc_low, acc_high = _at(table, low, "test_acc"), _at(table, high, "test_acc")
    return CheckResult(
        "accuracy_drop",
        acc_low > acc_high,
        acc_low - acc_high,
        f"test accuracy {acc_low:.2f}% at lambda={low}, {acc_high:.2f}% at lambda={high}",
    )


def check_frontier(
    records: list[MetricsRecord],
    probe_points: list[dict],
    lambdas: tuple[float, ...] | None = (0.0,),
    max_gap: float = 1.0,
    max_cost_fraction: float = 0.6,
) -> CheckResult:
    """Some router (mean over seeds, one of the given lambdas; None means any)
    is within max_gap points of the best single expert at a fraction of its cost.

    The value is the lowest cost fraction among routers within max_gap, nan if none.
    """
    best = max(probe_points, key=lambda p: p["test_acc"])
    table = per_lambda(records)
    if lambdas is not None:
        table = table.filter(
            pl.any_horizontal([(pl.col("lambda") - lam).abs() < 1e-9 for lam in lambdas])
        )
        if table.height == 0:
            raise ValueError(f"No finished cells at lambdas {list(lambdas)}")
    routers = [
        tuple(round(v, 3) for v in row)
        for row in table.select("lambda", "test_acc", "avg_tflops").rows()
    ]
    close = table.filter(pl.col("test_acc") >= best["test_acc"] - max_gap)
    fraction = math.nan
    if close.height:
        fraction = float(close["avg_tflops"].min()) / best["cost_tflops"]
    return CheckResult(
        "frontier",
        bool(fraction <= max_cost_fraction),
        fraction,
        f"best expert {best['expert']} at {best['test_acc']}% for {best['cost_tflops']} "
        f"TFLOPs; routers (lambda, acc, TFLOPs) {routers}",
    )


def check_agent_order(dqn: list[MetricsRecord], pg: list[MetricsRecord]) -> CheckResult:
    dqn, pg = _matched(dqn, pg)
    dqn_acc, pg_acc = _mean(dqn, "test_acc"), _mean(pg, "test_acc")
    return CheckResult(
        "pg_not_above_dqn",
        pg_acc <= dqn_acc,
        dqn_acc - pg_acc,
        f"mean test accuracy dqn {dqn_acc:.2f}%, pg {pg_acc:.2f}%",
    )


def check_augmentation_gap(
    augmented: list[MetricsRecord], plain: list[MetricsRecord]
) -> CheckResult:
    augmented, plain = _matched(augmented, plain)
    aug_gap, plain_gap = _mean(augmented, "gap"), _mean(plain, "gap")
    return CheckResult(
        "augmentation_gap",
        plain_gap > aug_gap,
        plain_gap - aug_gap,
        f"mean train-test gap {aug_gap:.2f} with augmentation, {plain_gap:.2f} without",
    )


def check_overfit_cost(base: list[MetricsRecord], overfit: list[MetricsRecord]) -> CheckResult:
    base, overfit = _matched(base, overfit)
    base_cost, overfit_cost = _mean(base, "avg_tflops"), _mean(overfit, "avg_tflops")
    return CheckResult(
        "overfit_cost",
        overfit_cost > base_cost,
        overfit_cost - base_cost,
        f"mean TFLOPs {base_cost:.3f} on the plain bank, {overfit_cost:.3f} on the overfit bank",
    )


def check_published_endpoints() -> CheckResult:
    got = []
    for test_acc, avg_tflops, _ in PUBLISHED_ENDPOINTS:
        record = MetricsRecord(
            lam=0.0,
            seed=0,
            agent="dqn",
            mode="direct",
            augment=True,
            overfit=False,
            train_acc=test_acc,
            test_acc=test_acc,
            avg_tflops=avg_tflops,
            acc_per_tflop=test_acc / avg_tflops,
            episodes=0,
        )
        got.append(acc_per_cost(record, decimals=1))
    expected = [value for _, _, value in PUBLISHED_ENDPOINTS]
    return CheckResult(
        "published_endpoints", got == expected, None, f"got {got}, expected {expected}"
    )


def check_oracle(reports: list[dict], min_ratio: float = 0.95) -> CheckResult:
    """Mean learned/optimal ratio per (K, lambda) over the reports of every seed."""
    if not reports:
        raise ValueError("No oracle reports")
    groups: dict[tuple, list] = {}
    for report in reports:
        ratio = report.get("ratio")
        groups.setdefault((report["K"], report["lambda"]), []).append(
            math.nan if ratio is None else ratio
        )
    means = {key: float(np.mean(ratios)) for key, ratios in sorted(groups.items())}
    worst = min(means.values())
    return CheckResult(
        "oracle_ratio",
        all(mean >= min_ratio for mean in means.values()),
        worst,
        "mean ratio per (K, lambda) "
        + ", ".join(f"{key}: {mean:.4f}" for key, mean in means.items()),
    )


def ablation_variants(records: list[MetricsRecord]) -> dict[str, list[MetricsRecord]]:
    """Split ablation rows by the design flag each variant changes."""
    variants = {"dqn": [], "pg": [], "aggregated": [], "no_augment": [], "overfit": []}
    for r in records:
        if r.overfit:
            variants["overfit"].append(r)
        elif r.agent == "pg":
            variants["pg"].append(r)
        elif r.mode == "aggregated":
            variants["aggregated"].append(r)
        elif not r.augment:
            variants["no_augment"].append(r)
        else:
            variants["dqn"].append(r)
    return variants


def run_checks(root: str) -> list[CheckResult]:
    dqn = read_metrics_csv(os.path.join(root, "sweep_dqn", "metrics.csv"))
    pg = read_metrics_csv(os.path.join(root, "sweep_pg", "metrics.csv"))
    ablations = ablation_variants(
        read_metrics_csv(os.path.join(root, "ablations", "ablations.csv"))
    )
    with open(os.path.join(root, "probe", "probe.json"), "r", encoding="utf-8") as f:
        probe_points = json.load(f)
    reports = []
    for path in sorted(glob.glob(os.path.join(root, "oracle_*", "oracle.json"))):
        with open(path, "r", encoding="utf-8") as f:
            reports.append(json.load(f))

    return [
        check_cost_trend(dqn),
        check_accuracy_drop(dqn),
        check_frontier(dqn, probe_points),
        check_agent_order(dqn, pg),
        check_augmentation_gap(ablations["dqn"], ablations["no_augment"]),
        check_overfit_cost(ablations["dqn"], ablations["overfit"]),
        check_published_endpoints(),
        check_oracle(reports),
    ]


def write_report(results: list[CheckResult], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in results], f, ensure_ascii=False, indent=4)
    logger.info(f"Wrote {len(results)} checks to {path}")


def parse_args(argv=None):
    parser = argparse.ArgumentParser("Check a reproduction run's trends")
    parser.add_argument("--root", type=str, default="results")
    parser.add_argument("--out", type=str, default=None, help="Defaults to <root>/check.json")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        results = run_checks(args.root)
    except (OSError, ValueError, KeyError) as e:
        logger.error(f"Cannot check {args.root}: {e}")
        return 1
    write_report(results, args.out or os.path.join(args.root, "check.json"))
    for r in results:
        if r.passed:
            logger.info(f"PASS {r.name}: {r.detail}")
        else:
            logger.error(f"FAIL {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 2


if __name__ == "__main__":
    sys.exit(main())
