import argparse
import math
import os
from itertools import cycle
from typing import Callable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import polars as pl  # noqa: E402
from loguru import logger  # noqa: E402

from srpmoe.expert_bank import EmbeddingBank, probe_accuracy  # noqa: E402
from srpmoe.router import RouterNetwork, greedy_action  # noqa: E402
from srpmoe.routing_env import Action, Observation, RoutingEnv  # noqa: E402
from srpmoe.schema import (  # noqa: E402
    ASSIGNMENT_COLUMNS,
    METRICS_COLUMNS,
    AssignmentRecord,
    MetricsRecord,
    RouterConfig,
)

Policy = Callable[[Observation, np.ndarray], int]


def greedy_policy(net: RouterNetwork) -> Policy:
    def policy(observation: Observation, mask: np.ndarray) -> int:
        return greedy_action(net, observation, mask)

    return policy


def evaluate(
    policy: Policy, bank: EmbeddingBank, split: str, cfg: RouterConfig
) -> tuple[float, float, list[AssignmentRecord]]:
    """One rollout per sample of the split, in order, without augmentation.

    Returns (accuracy in percent with one decimal, mean episode TFLOPs, assignments).
    """
    env = RoutingEnv(bank, cfg)
    assignments = []
    correct = 0
    for sample in bank.indices(split):
        sample = int(sample)
        observation = env.reset(sample)
        mask = env.mask
        while True:
            action = Action.from_index(policy(observation, mask))
            result = env.step(action)
            if result.done:
                break
            observation, mask = result.next_observation, result.valid_action_mask
        label = int(bank.labels[sample])
        correct += int(action.label == label)
        x = y = None
        if bank.latent is not None:
            x, y = (float(v) for v in bank.latent[sample])
        assignments.append(
            AssignmentRecord(
                sample_id=sample,
                x=x,
                y=y,
                label=label,
                pred=action.label,
                experts=env.state.activated,
                cost=env.state.accumulated_cost,
            )
        )
    accuracy = round(100.0 * correct / len(assignments), 1)
    avg_tflops = float(np.mean([a.cost for a in assignments]))
    return accuracy, avg_tflops, assignments


def truncate_decimals(value: float, decimals: int = 1) -> float:
    """Drop digits past the given decimal place (27.28 -> 27.2, -1.25 -> -1.3)."""
    scale = 10.0**decimals
    # tolerance so values already on the grid (e.g. 0.3 * 10 = 2.9999...) stay put
    return math.floor(value * scale + 1e-9) / scale


def acc_per_cost(record: MetricsRecord, decimals: int | None = None) -> float:
    """Test accuracy (%) per average TFLOP, truncated to decimals places when given."""
    if not record.avg_tflops > 0:
        raise ValueError(f"avg_tflops must be positive, got {record.avg_tflops}")
    ratio = record.test_acc / record.avg_tflops
    return ratio if decimals is None else truncate_decimals(ratio, decimals)


def expert_usage(assignments: list[AssignmentRecord], num_experts: int) -> np.ndarray:
    """Fraction of samples on which each expert was activated."""
    masks = np.array([a.experts for a in assignments])
    return np.array([float(np.mean(masks >> e & 1)) for e in range(num_experts)])


def single_expert_points(bank: EmbeddingBank) -> list[dict]:
    """(cost, probe test accuracy) of every expert used on its own."""
    points = []
    for e in bank.experts:
        points.append(
            {
                "expert": e.name,
                "cost_tflops": e.cost_tflops,
                "test_acc": round(probe_accuracy(bank, e.id, "test"), 1),
            }
        )
    return points


def _format(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def metrics_frame(records: list[MetricsRecord]) -> pl.DataFrame:
    rows = [{key: _format(value) for key, value in r.to_row().items()} for r in records]
    return pl.DataFrame(rows, schema={column: pl.Utf8 for column in METRICS_COLUMNS})


def export_metrics_csv(records: list[MetricsRecord], path: str) -> None:
    if not records:
        raise ValueError("No records to export")
    metrics_frame(records).write_csv(path)
    logger.info(f"Wrote {len(records)} metrics rows to {path}")


def read_metrics_csv(path: str) -> list[MetricsRecord]:
    df = pl.read_csv(path, infer_schema_length=0)
    records = []
    for row in df.iter_rows(named=True):
        record = MetricsRecord(
            lam=float(row["lambda"]),
            seed=int(row["seed"]),
            agent=row["agent"],
            mode=row["mode"],
            augment=row["augment"] == "true",
            overfit=row["overfit"] == "true",
            train_acc=float(row["train_acc"]),
            test_acc=float(row["test_acc"]),
            avg_tflops=float(row["avg_tflops"]),
            acc_per_tflop=float(row["acc_per_tflop"]),
            episodes=int(row["episodes"]),
        )
        record.failed = math.isnan(record.test_acc)
        records.append(record)
    return records


def series_name(record: MetricsRecord) -> str:
    name = f"{record.agent}/{record.mode}"
    if not record.augment:
        name += "/no-aug"
    if record.overfit:
        name += "/overfit"
    return name


def export_frontier_svg(
    records: list[MetricsRecord], path: str, expert_points: list[dict] | None = None
) -> None:
    """Scatter of (avg TFLOPs, test accuracy), one series per agent/mode variant.

    Each record is drawn as its own marker group with id "record-<i>".
    """
    if not records:
        raise ValueError("No records to plot")
    plt.rcParams["svg.hashsalt"] = "srpmoe"
    fig, ax = plt.subplots(figsize=(800 / 72, 600 / 72))
    colors = cycle(plt.rcParams["axes.prop_cycle"].by_key()["color"])
    series = sorted({series_name(r) for r in records})
    palette = {name: next(colors) for name in series}
    labelled = set()
    for i, record in enumerate(records):
        if record.failed or math.isnan(record.test_acc):
            continue
        name = series_name(record)
        ax.plot(
            [record.avg_tflops],
            [record.test_acc],
            marker="o",
            linestyle="none",
            color=palette[name],
            gid=f"record-{i}",
            label=name if name not in labelled else "_nolegend_",
        )
        labelled.add(name)
    for point in expert_points or []:
        ax.plot(
            [point["cost_tflops"]],
            [point["test_acc"]],
            marker="s",
            linestyle="none",
            color="black",
            gid=f"expert-{point['expert']}",
            label="single expert" if "single expert" not in labelled else "_nolegend_",
        )
        ax.annotate(point["expert"], (point["cost_tflops"], point["test_acc"]))
        labelled.add("single expert")
    ax.set_xlabel("Avg. TFLOPs")
    ax.set_ylabel("Test accuracy (%)")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote frontier plot ({len(records)} records) to {path}")


def export_assignments_csv(records: list[AssignmentRecord], path: str) -> None:
    df = pl.DataFrame(
        [r.to_dict() for r in records],
        schema={
            "sample_id": pl.Int64,
            "x": pl.Float64,
            "y": pl.Float64,
            "label": pl.Int64,
            "pred": pl.Int64,
            "experts": pl.Int64,
            "cost": pl.Float64,
        },
    ).select(ASSIGNMENT_COLUMNS)
    df.write_csv(path)
    logger.info(f"Wrote {len(records)} assignments to {path}")


def parse_args():
    parser = argparse.ArgumentParser("Plot an accuracy/compute frontier from a metrics CSV")
    parser.add_argument("--metrics", type=str, required=True)
    parser.add_argument("--out", type=str, default="frontier.svg")
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    records = read_metrics_csv(args.metrics)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    export_frontier_svg(records, args.out)
