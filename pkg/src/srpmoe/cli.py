import argparse
import json
import os
import sys
from loguru import logger

from srpmoe.errors import ConfigError, FormatError, SrpmoeError
from srpmoe.evaluator import (
    evaluate,
    expert_usage,
    export_assignments_csv,
    export_frontier_svg,
    export_metrics_csv,
    greedy_policy,
    read_metrics_csv,
    single_expert_points,
)
from srpmoe.expert_bank import (
    EmbeddingBank,
    default_expert_triple,
    generate_synthetic,
    load_bank,
    overfit_counterpart,
    probe_accuracy,
    save_bank,
)
from srpmoe.oracle import build_quantized, learned_value, oracle_report, solve_optimal
from srpmoe.router import RouterNetwork
from srpmoe.schema import CliConfig, MetricsRecord, from_dict, merge_dict
from srpmoe.trainer import ablation_study, save_log, sweep_cells, train

COMMANDS = ("synth", "train", "sweep", "eval", "oracle", "plot", "probe", "ablate")
SEED_ENV = "SRPMOE_SEED"
# gap used by `ablate` when the configured bank is not already overfit
DEFAULT_OVERFIT_GAP = 0.5


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _number_list(cast):
    def parse(text: str) -> list:
        try:
            return [cast(item) for item in text.split(",") if item.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}") from e

    return parse


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON config file")
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--lambda", dest="lam", type=float, default=None)
    common.add_argument("--lambdas", type=_number_list(float), default=None)
    common.add_argument("--seeds", type=_number_list(int), default=None)
    common.add_argument("--agent", type=str, choices=["dqn", "pg"], default=None)
    common.add_argument("--mode", type=str, choices=["direct", "aggregated"], default=None)
    common.add_argument("--no-augment", action="store_true")
    common.add_argument("--aug-sigma", type=float, default=None)
    common.add_argument("--episodes", type=int, default=None)
    common.add_argument("--overfit-gap", type=float, default=None)
    common.add_argument("--jobs", type=int, default=None)
    common.add_argument("--bank", type=str, default=None, help="Bank directory or manifest")
    common.add_argument("--checkpoint", type=str, default=None)
    common.add_argument("--bins", type=int, default=None, help="Oracle latent bins K")
    common.add_argument("--metrics", type=str, default=None, help="Metrics CSV for `plot`")
    common.add_argument("--verbose", action="store_true")

    parser = CliParser(prog="srpmoe", description="Cost-aware recurrent expert router")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub.add_parser(command, parents=[common])
    return parser


def load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def resolve_config(args: argparse.Namespace) -> CliConfig:
    """Defaults, then the JSON config file, then flags."""
    file_data = load_config_file(args.config) if args.config else {}
    cfg = from_dict(CliConfig, merge_dict(CliConfig().to_dict(), file_data))

    seed = args.seed
    if seed is None and "seed" not in file_data.get("run", {}) and os.getenv(SEED_ENV):
        try:
            seed = int(os.getenv(SEED_ENV))
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer") from e
    if seed is not None:
        cfg.run.seed = seed
        cfg.synthetic.seed = seed
    if args.lam is not None:
        cfg.run.router.cost_coefficient = args.lam
    if args.lambdas is not None:
        cfg.lambdas = args.lambdas
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.agent is not None:
        cfg.run.agent = args.agent
    if args.mode is not None:
        cfg.run.mode = args.mode
    if args.aug_sigma is not None:
        cfg.run.aug_sigma = args.aug_sigma
        cfg.run.augment = args.aug_sigma > 0
    if args.no_augment:
        cfg.run.augment = False
        cfg.run.aug_sigma = 0.0
    if args.episodes is not None:
        cfg.run.dqn.train_episodes = args.episodes
        cfg.run.pg.train_episodes = args.episodes
    if args.overfit_gap is not None:
        cfg.synthetic.overfit_gap = args.overfit_gap
    for name in ("jobs", "bins", "out", "bank", "checkpoint", "metrics"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if cfg.bank:
        cfg.run.bank = cfg.bank
    if cfg.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {cfg.jobs}")
    cfg.synthetic.validate()
    return cfg


def write_config(cfg: CliConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, ensure_ascii=False, indent=4)


def resolve_bank(cfg: CliConfig) -> EmbeddingBank:
    if cfg.bank:
        return load_bank(cfg.bank)
    return generate_synthetic(cfg.synthetic, default_expert_triple())


def cmd_synth(cfg: CliConfig) -> int:
    bank = generate_synthetic(cfg.synthetic, default_expert_triple())
    save_bank(bank, cfg.out)
    write_config(cfg, cfg.out)
    return 0


def cmd_train(cfg: CliConfig) -> int:
    bank = resolve_bank(cfg)
    result = train(cfg.run, bank)
    write_config(cfg, cfg.out)
    save_log(result.log, os.path.join(cfg.out, "train_log.csv"))
    if result.failed:
        logger.error(f"Training failed: {result.error}")
        return 2
    result.net.save(cfg.checkpoint or os.path.join(cfg.out, "router.ckpt"))
    return 0


def cmd_eval(cfg: CliConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    net = RouterNetwork.load(cfg.checkpoint)
    bank = resolve_bank(cfg)
    dims = {e.id: e.dim for e in bank.experts}
    if {e: p.input_dim for e, p in net.projections.items()} != dims:
        raise FormatError(f"Checkpoint {cfg.checkpoint} was trained for other experts")

    policy = greedy_policy(net)
    train_acc, _, _ = evaluate(policy, bank, "train", cfg.run.router)
    test_acc, avg_tflops, assignments = evaluate(policy, bank, "test", cfg.run.router)
    # the record describes the checkpoint's training run; older checkpoints carry no meta
    meta = net.meta
    record = MetricsRecord(
        lam=float(meta.get("lambda", cfg.run.router.cost_coefficient)),
        seed=int(meta.get("seed", cfg.run.seed)),
        agent="dqn" if net.kind == "dueling" else "pg",
        mode=net.mode,
        augment=bool(meta.get("augment", cfg.run.augment)),
        overfit=bank.overfit,
        train_acc=train_acc,
        test_acc=test_acc,
        avg_tflops=avg_tflops,
        acc_per_tflop=test_acc / avg_tflops,
        episodes=int(meta.get("episodes", cfg.run.episodes)),
    )
    os.makedirs(cfg.out, exist_ok=True)
    export_metrics_csv([record], os.path.join(cfg.out, "metrics.csv"))
    export_assignments_csv(assignments, os.path.join(cfg.out, "assignments.csv"))
    usage = expert_usage(assignments, bank.num_experts)
    with open(os.path.join(cfg.out, "usage.json"), "w", encoding="utf-8") as f:
        shares = {e.name: float(u) for e, u in zip(bank.experts, usage)}
        json.dump(shares, f, ensure_ascii=False, indent=4)
    write_config(cfg, cfg.out)
    logger.info(f"Test accuracy {test_acc}% at {avg_tflops:.3f} TFLOPs")
    return 0


def cmd_sweep(cfg: CliConfig) -> int:
    bank = resolve_bank(cfg)
    cells = sweep_cells(cfg.grid(), bank, cfg.jobs)
    records = [cell.record for cell in cells]
    os.makedirs(cfg.out, exist_ok=True)
    write_config(cfg, cfg.out)
    export_metrics_csv(records, os.path.join(cfg.out, "metrics.csv"))
    export_frontier_svg(
        records, os.path.join(cfg.out, "frontier.svg"), single_expert_points(bank)
    )
    if all(r.failed for r in records):
        logger.error("Every sweep cell failed")
        return 2
    return 0


def cmd_ablate(cfg: CliConfig) -> int:
    bank = resolve_bank(cfg)
    if bank.synthetic is None:
        raise ConfigError("ablate needs a synthetic bank to regenerate its overfit counterpart")
    # both banks share the generator seed and experts; only the overfit gap differs
    if bank.overfit:
        bank, overfit_bank = overfit_counterpart(bank, 1.0), bank
    else:
        gap = cfg.synthetic.overfit_gap if cfg.synthetic.overfit_gap < 1 else DEFAULT_OVERFIT_GAP
        overfit_bank = overfit_counterpart(bank, gap)
    results = ablation_study(cfg.grid(), bank, overfit_bank, jobs=cfg.jobs)
    records = [record for variant in results.values() for record in variant]
    os.makedirs(cfg.out, exist_ok=True)
    write_config(cfg, cfg.out)
    export_metrics_csv(records, os.path.join(cfg.out, "ablations.csv"))
    export_frontier_svg(records, os.path.join(cfg.out, "ablations.svg"))
    return 0


def cmd_oracle(cfg: CliConfig) -> int:
    experts = load_bank(cfg.bank).experts if cfg.bank else default_expert_triple()
    lam = cfg.run.router.cost_coefficient
    mdp = build_quantized(cfg.synthetic, experts, cfg.bins, lam, cfg.run.router.initial_expert)
    solution = solve_optimal(mdp)
    learned = learned_value(mdp, cfg.run, seed=cfg.run.seed)
    os.makedirs(cfg.out, exist_ok=True)
    write_config(cfg, cfg.out)
    report = oracle_report(
        os.path.join(cfg.out, "oracle.json"), solution.value, learned, cfg.bins, lam
    )
    print(json.dumps(report, ensure_ascii=False))
    return 0


def cmd_plot(cfg: CliConfig) -> int:
    if not cfg.metrics:
        raise ConfigError("plot needs --metrics")
    records = read_metrics_csv(cfg.metrics)
    os.makedirs(cfg.out, exist_ok=True)
    export_frontier_svg(records, os.path.join(cfg.out, "frontier.svg"))
    return 0


def cmd_probe(cfg: CliConfig) -> int:
    bank = resolve_bank(cfg)
    points = single_expert_points(bank)
    for point, e in zip(points, bank.experts):
        point["train_acc"] = round(probe_accuracy(bank, e.id, "train"), 1)
        print(
            f"{e.name}: {point['cost_tflops']} TFLOPs, "
            f"train {point['train_acc']}%, test {point['test_acc']}%"
        )
    os.makedirs(cfg.out, exist_ok=True)
    write_config(cfg, cfg.out)
    with open(os.path.join(cfg.out, "probe.json"), "w", encoding="utf-8") as f:
        json.dump(points, f, ensure_ascii=False, indent=4)
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "plot": cmd_plot,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
}


def run(argv: list[str] | None = None) -> int:
    """Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1

    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if args.verbose else "INFO")
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 1
    except (SrpmoeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
