import json
import os

import numpy as np
import pytest

from afbc_lab import cli, datasets, envlab
from afbc_lab.config import resolve_config, validate_config
from afbc_lab.errors import ConfigError
from afbc_lab.seeding import stream


class TestConfig:
    def test_empty_config_gets_all_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{}\n")
        cfg = validate_config(path)
        assert cfg.gamma == 0.99
        assert cfg.tau_polyak == 0.005
        assert cfg.target_delay == 2
        assert cfg.batch_size == 512
        assert cfg.hidden == [64, 64]
        assert cfg.k_advantage_samples == 4
        assert cfg.per["alpha"] == 0.6
        assert cfg.per["epsilon"] == 1e-3
        assert cfg.filter["kind"] == "binary"
        assert cfg.mode == "afbc_per"

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            resolve_config({"per": {"alpha": 1.5}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            resolve_config({"learning_rate": 3e-4})

    def test_type_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            resolve_config({"steps": "many"})
        with pytest.raises(ConfigError):
            resolve_config({"use_popart": 1})

    def test_redq_subset_bounded_by_ensemble(self):
        with pytest.raises(ConfigError):
            resolve_config({"ensemble_size": 2, "redq_subset": 3})
        cfg = resolve_config({"ensemble_size": 4, "redq_subset": 3})
        assert cfg.redq_subset == 3

    def test_beta_with_binary_filter_warns(self):
        cfg = resolve_config({"filter": {"kind": "binary", "beta": 2.0}})
        assert any("beta" in w for w in cfg.warnings)
        cfg = resolve_config({"filter": {"kind": "exponential", "beta": 2.0}})
        assert not cfg.warnings

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n  "steps": oops\n}\n')
        with pytest.raises(ConfigError, match="line 2"):
            validate_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            validate_config(tmp_path / "absent.json")

    def test_resolved_snapshot_round_trips(self, tmp_path):
        cfg = resolve_config({"seed": 7, "steps": 123, "filter": {"kind": "exponential"}})
        path = tmp_path / "resolved.json"
        path.write_text(cfg.to_json())
        again = validate_config(path)
        assert again.to_dict() == cfg.to_dict()


@pytest.fixture(scope="module")
def mc_dataset(tmp_path_factory):
    """A small pure-expert mountain-car dataset on disk."""
    root = tmp_path_factory.mktemp("data")
    built = datasets.build_mountain_car_sets(stream(0, "cli-data"), total=1500)
    ds, manifest = built["mc-expert"]
    path = root / "mc-expert.bin"
    datasets.save_dataset(ds, manifest, path)
    return str(path)


def write_config(tmp_path, dataset, **overrides):
    cfg = {
        "env": "mountain-car-1d",
        "dataset": dataset,
        "mode": "bc",
        "steps": 60,
        "batch_size": 64,
        "eval_interval": 30,
        "eval_episodes": 2,
        "log_interval": 10,
        "max_episode_steps": 60,
    }
    cfg.update(overrides)
    path = os.path.join(tmp_path, "config.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return path


class TestExitCodes:
    def test_config_error_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"per": {"alpha": 2.0}}')
        assert cli.main(["train", "--config", str(bad)]) == 2

    def test_runtime_error_exits_3(self, tmp_path, mc_dataset):
        cfg = write_config(tmp_path, mc_dataset)
        raw = json.load(open(cfg))
        raw["dataset"] = str(tmp_path / "missing.bin")
        json.dump(raw, open(cfg, "w"))
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 3

    def test_success_exits_0(self, tmp_path, mc_dataset):
        cfg = write_config(tmp_path, mc_dataset)
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0


class TestTrainCommand:
    def test_writes_snapshot_log_and_checkpoint(self, tmp_path, mc_dataset):
        cfg = write_config(tmp_path, mc_dataset)
        out = tmp_path / "run"
        assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "resolved_config.json").exists()
        assert (out / "train_log.jsonl").exists()
        assert (out / "checkpoint.bin").exists()
        snapshot = json.load(open(out / "resolved_config.json"))
        assert snapshot["gamma"] == 0.99
        lines = [json.loads(l) for l in open(out / "train_log.jsonl") if l.strip()]
        assert lines
        assert all("step" in rec for rec in lines)

    def test_seed_flag_overrides_config(self, tmp_path, mc_dataset):
        cfg = write_config(tmp_path, mc_dataset, seed=1)
        out = tmp_path / "run"
        cli.main(["train", "--config", cfg, "--seed", "9", "--out", str(out)])
        snapshot = json.load(open(out / "resolved_config.json"))
        assert snapshot["seed"] == 9

    def test_repeat_run_byte_identical(self, tmp_path, mc_dataset):
        cfg = write_config(tmp_path, mc_dataset, mode="afbc_per", steps=40)
        blobs = []
        for name in ("run_a", "run_b"):
            out = tmp_path / name
            assert cli.main(["train", "--config", cfg, "--seed", "7", "--out", str(out)]) == 0
            assert cli.main(["report", "--run-dir", str(out)]) == 0
            blob = {}
            for fname in sorted(os.listdir(out)):
                if fname != "resolved_config.json":  # embeds the out path
                    blob[fname] = open(out / fname, "rb").read()
            blobs.append(blob)
        assert sorted(blobs[0]) == sorted(blobs[1])
        for fname in blobs[0]:
            assert blobs[0][fname] == blobs[1][fname], fname


class TestEvaluateCommand:
    def test_evaluate_from_checkpoint(self, tmp_path, mc_dataset, capsys):
        cfg = write_config(tmp_path, mc_dataset)
        out = tmp_path / "run"
        cli.main(["train", "--config", cfg, "--out", str(out)])
        code = cli.main(["evaluate", "--checkpoint", str(out / "checkpoint.bin"), "--episodes", "2"])
        assert code == 0
        assert "mean return" in capsys.readouterr().out

    def test_evaluate_requires_env_or_sidecar(self, tmp_path, mc_dataset):
        cfg = write_config(tmp_path, mc_dataset)
        out = tmp_path / "run"
        cli.main(["train", "--config", cfg, "--out", str(out)])
        lone = tmp_path / "lone.bin"
        lone.write_bytes(open(out / "checkpoint.bin", "rb").read())
        assert cli.main(["evaluate", "--checkpoint", str(lone)]) == 2


class TestDatasetCommands:
    def test_collect_then_build_then_train(self, tmp_path):
        plan_backup = datasets.PENDULUM_COLLECTION_PLAN[:]
        # tiny plan: one reliably-Expert source and one reliably-VeryBad source
        datasets.PENDULUM_COLLECTION_PLAN[:] = [
            ("controller-n0.00", lambda: envlab.PendulumController(noise=0.0), 2),
            ("spinner-n0.00", lambda: envlab.PendulumSpinner(noise=0.0), 3),
        ]
        try:
            tiers = tmp_path / "tiers"
            assert cli.main(["collect", "--env", "pendulum", "--out", str(tiers), "--episodes-per-block", "2", "--seed", "1"]) == 0
            assert (tiers / "index.json").exists()
            out = tmp_path / "ds.bin"
            code = cli.main([
                "build-dataset", "--recipe", "stitching", "--budget", "400",
                "--tiers", str(tiers), "--out", str(out), "--seed", "1",
            ])
            assert code == 0
            ds, manifest = datasets.load_dataset(out)
            assert len(ds) == 400
            assert manifest.tag_counts == {0: 400}
        finally:
            datasets.PENDULUM_COLLECTION_PLAN[:] = plan_backup

    def test_build_dataset_insufficient_tiers_fails(self, tmp_path):
        store = datasets.TierStore("pendulum", (0.0, 1000.0))
        store.save(tmp_path / "tiers")
        code = cli.main([
            "build-dataset", "--recipe", "great-expert", "--budget", "100",
            "--tiers", str(tmp_path / "tiers"), "--out", str(tmp_path / "ds.bin"),
        ])
        assert code == 3

    def test_build_mountain_car_recipe(self, tmp_path):
        out = tmp_path / "mc.bin"
        code = cli.main(["build-dataset", "--recipe", "mc-expert", "--budget", "1000", "--out", str(out)])
        assert code == 0
        ds, manifest = datasets.load_dataset(out)
        assert len(ds) == 1000
        assert manifest.tag_counts == {0: 1000}
