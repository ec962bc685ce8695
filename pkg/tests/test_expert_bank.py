import json

import numpy as np
import pytest
from conftest import make_experts

from srpmoe.errors import ConfigError, DataError, FormatError
from srpmoe.expert_bank import (
    EmbeddingBank,
    default_expert_triple,
    generate_synthetic,
    load_bank,
    overfit_counterpart,
    probe_accuracy,
    save_bank,
)
from srpmoe.schema import SyntheticConfig


def test_default_expert_triple():
    experts = default_expert_triple()
    assert [e.id for e in experts] == [0, 1, 2]
    assert [e.name for e in experts] == ["tsf-b", "vmae-b", "vmae-l"]
    assert experts[0].cost_tflops == 0.59
    assert experts[1].cost_tflops == 2.7
    assert experts[2].cost_tflops == 8.9
    assert [e.dim for e in experts] == [768, 768, 1024]
    assert [e.fidelity for e in experts] == [0.55, 0.8, 0.95]


def test_generation_is_deterministic(experts):
    cfg = SyntheticConfig(num_train=50, num_test=20, seed=11)
    assert generate_synthetic(cfg, experts).equals(generate_synthetic(cfg, experts))
    other = generate_synthetic(SyntheticConfig(num_train=50, num_test=20, seed=12), experts)
    assert not generate_synthetic(cfg, experts).equals(other)


def test_generated_bank_layout(small_bank):
    assert small_bank.num_samples == 180
    assert (small_bank.split[:120] == "train").all()
    assert (small_bank.split[120:] == "test").all()
    # balanced classes within each split
    assert small_bank.labels[:120].sum() == 60
    assert small_bank.labels[120:].sum() == 30
    assert small_bank.embeddings[2].shape == (180, 8)
    assert small_bank.embeddings[2].dtype == np.float32
    assert small_bank.latent.shape == (180, 2)
    assert not small_bank.overfit


def test_bank_is_read_only(small_bank):
    with pytest.raises(ValueError):
        small_bank.embeddings[0][0, 0] = 1.0
    with pytest.raises(ValueError):
        small_bank.labels[0] = 1


def test_degenerate_config_rejected(experts):
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(num_train=0), experts)
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(latent_noise=0.0), experts)
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(overfit_gap=1.5), experts)


def test_fidelity_must_follow_cost():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(), make_experts(fidelities=(0.9, 0.8, 0.95)))


def test_probe_accuracy_follows_fidelity():
    experts = make_experts(dims=(8, 8, 8), fidelities=(0.3, 0.7, 1.0))
    accuracies = []
    for seed in (1, 2, 3):
        bank = generate_synthetic(
            SyntheticConfig(num_train=2000, num_test=2000, latent_noise=0.8, seed=seed), experts
        )
        accuracies.append([probe_accuracy(bank, e.id) for e in experts])
    mean = np.mean(accuracies, axis=0)
    assert mean[0] <= mean[1] + 0.25
    assert mean[1] <= mean[2] + 0.25
    assert mean[0] < mean[2]


def test_overfit_gap_separates_train_and_test(experts):
    bank = generate_synthetic(
        SyntheticConfig(num_train=800, num_test=800, overfit_gap=0.3, seed=5), experts
    )
    assert bank.overfit
    train_acc = probe_accuracy(bank, 2, "train")
    test_acc = probe_accuracy(bank, 2, "test")
    assert train_acc > test_acc + 3.0


def test_overfit_gap_leaves_other_experts_alone(experts):
    plain = generate_synthetic(SyntheticConfig(num_train=40, num_test=20, seed=5), experts)
    overfit = generate_synthetic(
        SyntheticConfig(num_train=40, num_test=20, overfit_gap=0.3, seed=5), experts
    )
    assert np.array_equal(plain.embeddings[0], overfit.embeddings[0])
    assert np.array_equal(plain.embeddings[2][40:], overfit.embeddings[2][40:])
    assert not np.array_equal(plain.embeddings[2][:40], overfit.embeddings[2][:40])


def test_save_load_round_trip(tmp_path, small_bank):
    manifest_path = save_bank(small_bank, str(tmp_path / "bank"))
    loaded = load_bank(manifest_path)
    assert loaded.equals(small_bank)
    # the directory works as well as the manifest path
    assert load_bank(str(tmp_path / "bank")).equals(small_bank)
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["version"] == 1
    assert manifest["num_samples"] == 180
    assert [e["file"] for e in manifest["experts"]] == [
        "expert_0.f32",
        "expert_1.f32",
        "expert_2.f32",
    ]


def test_short_embedding_file_is_format_error(tmp_path, small_bank):
    out = tmp_path / "bank"
    save_bank(small_bank, str(out))
    path = out / "expert_1.f32"
    data = path.read_bytes()
    path.write_bytes(data[: -6 * 4])
    with pytest.raises(FormatError):
        load_bank(str(out))


def test_duplicate_expert_ids_is_format_error(tmp_path, small_bank):
    out = tmp_path / "bank"
    manifest_path = save_bank(small_bank, str(out))
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    manifest["experts"][1]["id"] = 0
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f)
    with pytest.raises(FormatError):
        load_bank(manifest_path)


def test_malformed_manifest_is_format_error(tmp_path, small_bank):
    out = tmp_path / "bank"
    manifest_path = save_bank(small_bank, str(out))
    (out / "manifest.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(FormatError):
        load_bank(manifest_path)

    save_bank(small_bank, str(out))
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    del manifest["labels_file"]
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f)
    with pytest.raises(FormatError):
        load_bank(manifest_path)


def test_bad_label_token_is_format_error(tmp_path, small_bank):
    out = tmp_path / "bank"
    save_bank(small_bank, str(out))
    lines = (out / "labels.txt").read_text(encoding="utf-8").splitlines()
    lines[0] = "2"
    (out / "labels.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(FormatError):
        load_bank(str(out))


def test_non_finite_embedding_is_data_error(tmp_path, small_bank):
    out = tmp_path / "bank"
    save_bank(small_bank, str(out))
    matrix = np.fromfile(out / "expert_0.f32", dtype="<f4")
    matrix[3] = np.nan
    matrix.tofile(out / "expert_0.f32")
    with pytest.raises(DataError):
        load_bank(str(out))


def test_manifest_keeps_generator_config(tmp_path, experts):
    cfg = SyntheticConfig(num_train=40, num_test=20, overfit_gap=0.4, seed=11)
    bank = generate_synthetic(cfg, experts)
    manifest_path = save_bank(bank, str(tmp_path / "bank"))
    with open(manifest_path, encoding="utf-8") as f:
        assert json.load(f)["synthetic"] == cfg.to_dict()
    loaded = load_bank(manifest_path)
    assert loaded.synthetic == cfg
    assert loaded.equals(bank)


def test_manifest_with_bad_generator_config_is_format_error(tmp_path, small_bank):
    manifest_path = save_bank(small_bank, str(tmp_path / "bank"))
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    manifest["synthetic"]["overfit_gap"] = 2.0
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f)
    with pytest.raises(FormatError):
        load_bank(manifest_path)


def test_overfit_counterpart_keeps_seed_and_experts(experts):
    bank = generate_synthetic(SyntheticConfig(num_train=40, num_test=20, seed=7), experts)
    overfit = overfit_counterpart(bank, 0.3)
    assert overfit.overfit and not bank.overfit
    assert overfit.synthetic.seed == 7 and overfit.synthetic.overfit_gap == 0.3
    assert np.array_equal(overfit.labels, bank.labels)
    assert np.array_equal(overfit.latent, bank.latent)
    assert np.array_equal(overfit.embeddings[0], bank.embeddings[0])
    assert np.array_equal(overfit.embeddings[2][40:], bank.embeddings[2][40:])
    assert overfit_counterpart(overfit, 1.0).equals(bank)


def test_overfit_counterpart_needs_generator_config(small_bank):
    extracted = EmbeddingBank(
        experts=small_bank.experts,
        labels=small_bank.labels,
        split=small_bank.split,
        embeddings=small_bank.embeddings,
    )
    with pytest.raises(ConfigError):
        overfit_counterpart(extracted, 0.5)
