import argparse
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from loguru import logger
from sklearn.linear_model import LogisticRegression

from srpmoe.errors import ConfigError, DataError, FormatError
from srpmoe.schema import ExpertSpec, SyntheticConfig, from_dict

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
# observation noise that even a perfect-fidelity expert keeps
NOISE_FLOOR = 0.05
SPLITS = ("train", "test")


def default_expert_triple() -> list[ExpertSpec]:
    """TimeSFormer-B, VideoMAE ViT-B and ViT-L stand-ins with their TFLOPs."""
    return [
        ExpertSpec(id=0, name="tsf-b", dim=768, cost_tflops=0.59, fidelity=0.55),
        ExpertSpec(id=1, name="vmae-b", dim=768, cost_tflops=2.7, fidelity=0.8),
        ExpertSpec(id=2, name="vmae-l", dim=1024, cost_tflops=8.9, fidelity=0.95),
    ]


def validate_experts(experts: list[ExpertSpec], synthetic: bool = False) -> None:
    if not experts:
        raise ConfigError("At least one expert is required")
    ids = sorted(e.id for e in experts)
    if ids != list(range(len(experts))):
        raise ConfigError(f"Expert ids must be unique and dense 0..E-1, got {ids}")
    for e in experts:
        if not e.cost_tflops > 0:
            raise ConfigError(f"Expert {e.name}: cost_tflops must be > 0")
        if e.dim <= 0:
            raise ConfigError(f"Expert {e.name}: dim must be positive")
        if synthetic and not 0 < e.fidelity <= 1:
            raise ConfigError(f"Expert {e.name}: fidelity must be in (0, 1]")
    if synthetic:
        by_cost = sorted(experts, key=lambda e: e.cost_tflops)
        for cheap, dear in zip(by_cost[:-1], by_cost[1:]):
            if dear.fidelity < cheap.fidelity:
                raise ConfigError(
                    f"Fidelity must not decrease with cost: {cheap.name} > {dear.name}"
                )


def noise_scale(cfg: SyntheticConfig, expert: ExpertSpec) -> float:
    return cfg.latent_noise * (1.0 - expert.fidelity + NOISE_FLOOR)


@dataclass
class EmbeddingBank:
    experts: list[ExpertSpec]
    labels: np.ndarray  # (N,) 0 non-fight, 1 fight
    split: np.ndarray  # (N,) "train" / "test"
    embeddings: dict[int, np.ndarray]  # expert id -> (N, d_e) float32
    latent: np.ndarray | None = None  # (N, 2), synthetic banks only
    overfit: bool = False
    # generator config of a synthetic bank, None for extracted banks
    synthetic: SyntheticConfig | None = None

    def __post_init__(self):
        self.experts = sorted(self.experts, key=lambda e: e.id)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        self.validate()
        # banks are shared read-only between runs
        for array in [self.labels, self.split, *self.embeddings.values()]:
            array.flags.writeable = False
        if self.latent is not None:
            self.latent.flags.writeable = False

    def validate(self) -> None:
        n = self.num_samples
        if n == 0:
            raise DataError("Bank holds no samples")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("Labels must be 0 or 1")
        if self.split.shape != (n,) or not np.isin(self.split, SPLITS).all():
            raise DataError("Split must hold one of 'train'/'test' per sample")
        for name in SPLITS:
            if not (self.split == name).any():
                raise DataError(f"Split '{name}' is empty")
        if set(self.embeddings) != {e.id for e in self.experts}:
            raise DataError("Embedding matrices do not match the expert list")
        for e in self.experts:
            matrix = self.embeddings[e.id]
            if matrix.shape != (n, e.dim):
                raise DataError(
                    f"Expert {e.name}: matrix shape {matrix.shape} != ({n}, {e.dim})"
                )
            if not np.all(np.isfinite(matrix)):
                raise DataError(f"Expert {e.name}: non-finite embedding values")
        if self.latent is not None:
            if self.latent.shape != (n, 2) or not np.all(np.isfinite(self.latent)):
                raise DataError("Latent must be a finite (N, 2) matrix")

    @property
    def num_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def costs(self) -> np.ndarray:
        return np.array([e.cost_tflops for e in self.experts])

    def expert(self, expert_id: int) -> ExpertSpec:
        return self.experts[expert_id]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"Unknown split: {split}")
        return np.flatnonzero(self.split == split)

    def embedding(self, sample: int, expert_id: int) -> np.ndarray:
        return self.embeddings[expert_id][sample]

    def train_mean(self, expert_id: int) -> np.ndarray:
        rows = self.embeddings[expert_id][self.indices("train")]
        return rows.astype(np.float64).mean(axis=0)

    def train_std(self, expert_id: int) -> np.ndarray:
        rows = self.embeddings[expert_id][self.indices("train")]
        return rows.astype(np.float64).std(axis=0)

    def equals(self, other: "EmbeddingBank") -> bool:
        if self.experts != other.experts or self.overfit != other.overfit:
            return False
        if self.synthetic != other.synthetic:
            return False
        if (self.latent is None) != (other.latent is None):
            return False
        same = np.array_equal(self.labels, other.labels) and np.array_equal(
            self.split, other.split
        )
        same = same and all(
            np.array_equal(self.embeddings[e.id], other.embeddings[e.id])
            for e in self.experts
        )
        if self.latent is not None:
            same = same and np.array_equal(self.latent, other.latent)
        return bool(same)


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2 :] = 1
    return rng.permutation(labels)


def generate_synthetic(cfg: SyntheticConfig, experts: list[ExpertSpec]) -> EmbeddingBank:
    """Two Gaussian classes at +-(mu, mu) in a 2D latent, lifted per expert.

    An expert with fidelity f sees the latent through a fixed orthonormal affine
    lift plus isotropic noise of std latent_noise * (1 - f + 0.05). On overfit
    experts the train rows are pulled towards their class centre by
    overfit_gap, so their train split looks cleaner than their test split.
    """
    cfg.validate()
    validate_experts(experts, synthetic=True)
    experts = sorted(experts, key=lambda e: e.id)
    for e in experts:
        if e.dim < 2:
            raise ConfigError(f"Expert {e.name}: dim must be >= 2 to hold the 2D latent")

    rng = np.random.default_rng(cfg.seed)
    labels = np.concatenate(
        [_balanced_labels(cfg.num_train, rng), _balanced_labels(cfg.num_test, rng)]
    )
    split = np.array(["train"] * cfg.num_train + ["test"] * cfg.num_test)
    n = labels.shape[0]
    centres = (2.0 * labels - 1.0)[:, None] * cfg.class_separation * np.ones((1, 2))
    deviation = cfg.latent_noise * rng.standard_normal((n, 2))
    latent = centres + deviation

    overfit_ids = set(cfg.overfit_experts or [])
    if cfg.overfit_experts is None:
        overfit_ids = {max(experts, key=lambda e: e.cost_tflops).id}
    overfit = cfg.overfit_gap < 1.0
    is_train = split == "train"

    embeddings = {}
    for e in experts:
        lift_rng = np.random.default_rng([cfg.seed, e.id])
        basis, _ = np.linalg.qr(lift_rng.standard_normal((e.dim, 2)))
        offset = lift_rng.standard_normal(e.dim)
        noise_rng = np.random.default_rng([cfg.seed, e.id, 1])
        noise = noise_scale(cfg, e) * noise_rng.standard_normal((n, e.dim))
        view = latent
        if overfit and e.id in overfit_ids:
            shrink = np.where(is_train, cfg.overfit_gap, 1.0)[:, None]
            view = centres + shrink * deviation
            noise = shrink * noise
        embeddings[e.id] = (view @ basis.T + offset + noise).astype(np.float32)

    logger.info(
        f"Generated synthetic bank: {n} samples, {len(experts)} experts, seed {cfg.seed}"
        + (f", overfit experts {sorted(overfit_ids)} gap {cfg.overfit_gap}" if overfit else "")
    )
    return EmbeddingBank(
        experts=experts,
        labels=labels,
        split=split,
        embeddings=embeddings,
        latent=latent.astype(np.float32),
        overfit=overfit,
        synthetic=cfg,
    )


def overfit_counterpart(bank: EmbeddingBank, gap: float) -> EmbeddingBank:
    """Regenerate a synthetic bank with the same seed and experts but another overfit_gap.

    Labels, splits, the latent and the rows of non-overfit experts are unchanged.
    """
    if bank.synthetic is None:
        raise ConfigError("Bank carries no generator config, only synthetic banks regenerate")
    return generate_synthetic(replace(bank.synthetic, overfit_gap=gap), bank.experts)


def save_bank(bank: EmbeddingBank, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "labels.txt"), "w", encoding="utf-8") as f:
        f.writelines(f"{label}\n" for label in bank.labels)
    with open(os.path.join(out_dir, "split.txt"), "w", encoding="utf-8") as f:
        f.writelines(f"{name}\n" for name in bank.split)

    manifest = {
        "version": MANIFEST_VERSION,
        "num_samples": bank.num_samples,
        "labels_file": "labels.txt",
        "split_file": "split.txt",
        "overfit": bank.overfit,
        "experts": [],
    }
    if bank.synthetic is not None:
        manifest["synthetic"] = bank.synthetic.to_dict()
    if bank.latent is not None:
        np.asarray(bank.latent, dtype="<f4").tofile(os.path.join(out_dir, "latent.f32"))
        manifest["latent_file"] = "latent.f32"
    for e in bank.experts:
        file_name = f"expert_{e.id}.f32"
        np.asarray(bank.embeddings[e.id], dtype="<f4").tofile(
            os.path.join(out_dir, file_name)
        )
        manifest["experts"].append(
            {
                "id": e.id,
                "name": e.name,
                "dim": e.dim,
                "cost_tflops": e.cost_tflops,
                "fidelity": e.fidelity,
                "file": file_name,
            }
        )

    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=4)
    logger.info(f"Saved bank ({bank.num_samples} samples) to {manifest_path}")
    return manifest_path


def _read_tokens(path: str, allowed: tuple[str, ...], n: int) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        tokens = [line.strip() for line in f if line.strip()]
    if len(tokens) != n:
        raise FormatError(f"{path}: expected {n} lines, found {len(tokens)}")
    bad = set(tokens) - set(allowed)
    if bad:
        raise FormatError(f"{path}: unexpected tokens {sorted(bad)}")
    return tokens


def _read_matrix(path: str, rows: int, cols: int) -> np.ndarray:
    expected = rows * cols * 4
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(
            f"{path}: {actual} bytes, manifest implies {rows}x{cols} float32 = {expected}"
        )
    matrix = np.fromfile(path, dtype="<f4").reshape(rows, cols).astype(np.float32)
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"{path}: non-finite values")
    return matrix


def load_bank(manifest_path: str) -> EmbeddingBank:
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, MANIFEST_NAME)
    base = os.path.dirname(manifest_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON ({e})") from e

    try:
        if manifest["version"] != MANIFEST_VERSION:
            raise FormatError(f"Unsupported manifest version {manifest['version']}")
        n = int(manifest["num_samples"])
        expert_entries = manifest["experts"]
        ids = [int(entry["id"]) for entry in expert_entries]
        if len(set(ids)) != len(ids):
            raise FormatError(f"Duplicate expert ids in {manifest_path}: {ids}")
        if sorted(ids) != list(range(len(ids))):
            raise FormatError(f"Expert ids must be dense 0..E-1, got {sorted(ids)}")

        labels = _read_tokens(os.path.join(base, manifest["labels_file"]), ("0", "1"), n)
        split = _read_tokens(os.path.join(base, manifest["split_file"]), SPLITS, n)
        experts, embeddings = [], {}
        for entry in expert_entries:
            spec = ExpertSpec(
                id=int(entry["id"]),
                name=str(entry["name"]),
                dim=int(entry["dim"]),
                cost_tflops=float(entry["cost_tflops"]),
                fidelity=float(entry.get("fidelity", 1.0)),
            )
            experts.append(spec)
            embeddings[spec.id] = _read_matrix(
                os.path.join(base, entry["file"]), n, spec.dim
            )
        latent = None
        if manifest.get("latent_file"):
            latent = _read_matrix(os.path.join(base, manifest["latent_file"]), n, 2)
        synthetic = None
        if manifest.get("synthetic") is not None:
            synthetic = from_dict(SyntheticConfig, manifest["synthetic"])
            synthetic.validate()
    except KeyError as e:
        raise FormatError(f"{manifest_path}: missing key {e}") from e
    except FileNotFoundError as e:
        raise FormatError(f"{manifest_path}: referenced file missing ({e.filename})") from e
    except ConfigError as e:
        raise FormatError(f"{manifest_path}: invalid synthetic config ({e})") from e

    try:
        validate_experts(experts)
    except ConfigError as e:
        raise FormatError(str(e)) from e
    bank = EmbeddingBank(
        experts=experts,
        labels=np.array([int(t) for t in labels]),
        split=np.array(split),
        embeddings=embeddings,
        latent=latent,
        overfit=bool(manifest.get("overfit", False)),
        synthetic=synthetic,
    )
    logger.info(f"Loaded bank ({n} samples, {len(experts)} experts) from {manifest_path}")
    return bank


def probe_accuracy(
    bank: EmbeddingBank, expert_id: int, split: str = "test", seed: int = 0
) -> float:
    """Accuracy (%) of a logistic-regression probe fit on the train split."""
    train = bank.indices("train")
    target = bank.indices(split)
    matrix = bank.embeddings[expert_id].astype(np.float64)
    probe = LogisticRegression(max_iter=2000, random_state=seed)
    probe.fit(matrix[train], bank.labels[train])
    accuracy = probe.score(matrix[target], bank.labels[target])
    if not math.isfinite(accuracy):
        logger.warning(f"Probe for expert {expert_id} returned {accuracy}")
    return 100.0 * float(accuracy)


def parse_args():
    parser = argparse.ArgumentParser("Generate a synthetic expert embedding bank")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=str, default="bank")
    parser.add_argument("--overfit-gap", type=float, default=1.0)
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    bank = generate_synthetic(
        SyntheticConfig(seed=args.seed, overfit_gap=args.overfit_gap),
        default_expert_triple(),
    )
    save_bank(bank, args.out)
    for e in bank.experts:
        print(f"{e.name}: probe test accuracy {probe_accuracy(bank, e.id):.1f}%")
