import json

import pytest
import yaml

from composed_retrieval.artifacts import read_manifest
from composed_retrieval.cli import main
from composed_retrieval.config import RunConfig, load_config
from composed_retrieval.errors import InvalidConfig

TINY_RUN = {
    "world": {
        "attributes": {
            "color": ["red", "blue", "green"],
            "pattern": ["plain", "striped"],
            "object": ["dress", "shirt"],
        },
        "image_size": 16,
        "seed": 7,
    },
    "sampling": {"strategy": "global_random", "n_pairs": 40, "seed": 5},
    "model": {
        "image_size": 16,
        "patch_size": 8,
        "d_model": 16,
        "n_heads": 2,
        "n_blocks": 1,
        "mlp_ratio": 2,
        "text_layers": 1,
        "max_text_len": 12,
        "seed": 3,
    },
    "train": {"batch_size": 16, "epochs": 2, "seed": 1, "combiner_steps": 10},
    "eval_set": {"n_cases": 5, "seed": 2, "strategy": "global_random", "subset_size": 3},
    "eval_protocol": {"ks": [1, 5], "subset_ks": [1], "keep_rankings": 3},
    "sweep": {"counts": [10, 20]},
}


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY_RUN))
    return path


# ---------------------------------------------------------------- config


def test_defaults_load_and_validate():
    cfg = load_config(None, use_env=False)
    cfg.validate()
    assert cfg.sampling.strategy == "same_meta_class"
    assert cfg.model.d_model == 64
    assert cfg.train.batch_size == 32


def test_config_file_roundtrip(config_file):
    cfg = load_config(config_file, use_env=False)
    assert cfg.world.image_size == 16
    assert cfg.sampling.n_pairs == 40
    assert cfg.train.epochs == 2
    assert cfg.hash() == load_config(config_file, use_env=False).hash()


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"worlds": {}}))
    with pytest.raises(InvalidConfig):
        load_config(path, use_env=False)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"train": {"batch_size": 8, "warmup": 3}}))
    with pytest.raises(InvalidConfig):
        load_config(path, use_env=False)


def test_env_override(config_file, monkeypatch):
    monkeypatch.setenv("CIR_TRAIN__EPOCHS", "9")
    monkeypatch.setenv("CIR_WORD_CAP", "10")
    cfg = load_config(config_file)
    assert cfg.train.epochs == 9
    assert cfg.word_cap == 10


def test_apply_seed_overrides_all(config_file):
    cfg = load_config(config_file, use_env=False)
    cfg.apply_seed(99)
    assert cfg.world.seed == 99
    assert cfg.sampling.seed == 99
    assert cfg.model.seed == 99
    assert cfg.train.seed == 99
    assert cfg.eval_set.seed == 99


def test_resolve_paths(config_file, tmp_path):
    cfg = load_config(config_file, use_env=False)
    cfg.resolve_paths(tmp_path / "out")
    assert str(cfg.paths.dataset).startswith(str(tmp_path / "out"))


def test_paper_preset_selected(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"train_preset": "paper"}))
    cfg = load_config(path, use_env=False)
    effective = cfg.effective_train()
    assert effective.learning_rate == pytest.approx(2e-6)
    assert effective.weight_decay == pytest.approx(0.1)


def test_sweep_counts_must_increase():
    cfg = RunConfig()
    cfg.sweep.counts = [100, 100]
    with pytest.raises(InvalidConfig):
        cfg.validate()


# ---------------------------------------------------------------- cli


def _run(args):
    return main(args)


def test_cli_pipeline_end_to_end(config_file, tmp_path, capsys):
    out = str(tmp_path / "artifacts")
    base = ["--config", str(config_file), "--out", out]
    assert _run(["generate-data", *base]) == 0
    assert _run(["train", *base]) == 0
    assert _run(["finetune-combiner", *base]) == 0
    assert _run(["evaluate", *base]) == 0
    assert _run(["gallery", *base]) == 0
    capsys.readouterr()

    report = json.loads((tmp_path / "artifacts" / "eval_report.json").read_text())
    assert report["n_cases"] == 5
    assert "reformulated" in report["metrics"]
    assert (tmp_path / "artifacts" / "gallery.html").exists()
    manifest = read_manifest(tmp_path / "artifacts" / "triplets.jsonl")
    assert manifest["kind"] == "triplet_dataset"


def test_cli_scale_sweep_and_ablate(config_file, tmp_path, capsys):
    out = str(tmp_path / "artifacts")
    base = ["--config", str(config_file), "--out", out]
    assert _run(["generate-data", *base]) == 0
    assert _run(["scale-sweep", *base]) == 0
    assert _run(["ablate", *base]) == 0
    capsys.readouterr()

    sweep_lines = (tmp_path / "artifacts" / "scale_sweep.csv").read_text().strip().splitlines()
    assert len(sweep_lines) == 3  # header + 2 counts
    assert sweep_lines[0].startswith("n_triplets")
    assert (tmp_path / "artifacts" / "scale_sweep.png").exists()
    ablation_lines = (tmp_path / "artifacts" / "ablation.csv").read_text().strip().splitlines()
    assert len(ablation_lines) == 4  # header + three variants
    assert ablation_lines[1].startswith("full")


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"nonsense": 1}}))
    assert _run(["train", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_missing_config_file(tmp_path, capsys):
    assert _run(["train", "--config", str(tmp_path / "absent.yaml")]) == 2
    capsys.readouterr()


def test_cli_runtime_error_exit_code(config_file, tmp_path, capsys):
    # evaluate before generate-data/train: inputs are missing
    out = str(tmp_path / "empty")
    assert _run(["evaluate", "--config", str(config_file), "--out", out]) == 1
    err = capsys.readouterr().err
    assert "evaluate failed" in err


def test_cli_seed_flag_changes_dataset(config_file, tmp_path, capsys):
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert _run(["generate-data", "--config", str(config_file), "--out", out_a]) == 0
    assert _run(["generate-data", "--config", str(config_file), "--out", out_b,
                 "--seed", "123"]) == 0
    capsys.readouterr()
    a = (tmp_path / "a" / "triplets.jsonl").read_text()
    b = (tmp_path / "b" / "triplets.jsonl").read_text()
    assert a != b
