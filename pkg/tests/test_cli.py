import os

import numpy as np
import pytest
import yaml

from vfsynth import checkpoint as ck
from vfsynth import data as d
from vfsynth import nn
from vfsynth.cli import main
from vfsynth.config import ConfigError, load_config
from vfsynth.rng import RngStream


def write_toy_csv(path, n=32, seed=0):
    rng = RngStream(seed, "clicsv")
    rows = ["a,b,k"]
    ks = ["u", "v", "w"]
    av = rng.normal(n) + 1
    bv = rng.normal(n) * 2
    kv = rng.integers(0, 3, size=n)
    for i in range(n):
        rows.append(f"{float(av[i])!r},{float(bv[i])!r},{ks[kv[i]]}")
    path.write_text("\n".join(rows) + "\n")


def toy_config(tmp_path, n=32, extra=None, seed=3):
    csv = tmp_path / "toy.csv"
    write_toy_csv(csv, n=n)
    doc = {
        "config_version": 1,
        "dataset": {
            "path": str(csv),
            "schema": {
                "target": "k",
                "attributes": [
                    {"name": "a", "kind": "continuous"},
                    {"name": "b", "kind": "continuous"},
                    {"name": "k", "kind": "categorical",
                     "categories": ["u", "v", "w"]},
                ],
            },
        },
        "split": [[0, 1], [2]],
        "variant": "vflgan",
        "seed": seed,
        "output_dir": str(tmp_path / "run"),
        "gan": {
            "latent_dim": 4,
            "gen_hidden": [8],
            "disc_part1_hidden": [8],
            "feature_dim": 4,
            "disc_part2_hidden": [8],
            "server_hidden": [8],
            "batch_size": 8,
            "disc_steps": 2,
            "epochs": 3,
        },
    }
    if extra:
        doc.update(extra)
    cfg_path = tmp_path / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(doc))
    return cfg_path


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        rng = RngStream(1)
        models = {
            "g0": nn.init_mlp([3, 5, 2], rng.child(0)),
            "g1": nn.init_mlp([3, 4, 7], rng.child(1), hidden_activation="tanh"),
        }
        p = tmp_path / "m.ckpt"
        ck.write_checkpoint(p, models)
        back = ck.read_checkpoint(p)
        assert sorted(back) == ["g0", "g1"]
        for name in models:
            for a, b in zip(models[name].layers, back[name].layers):
                assert np.array_equal(a.w, b.w)
                assert np.array_equal(a.b, b.b)
                assert a.activation == b.activation
                assert a.slope == b.slope

    def test_deterministic_bytes(self, tmp_path):
        rng = RngStream(2)
        models = {"g0": nn.init_mlp([3, 4, 1], rng)}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ck.write_checkpoint(p1, models)
        ck.write_checkpoint(p2, models)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(ck.CheckpointError, match="magic"):
            ck.read_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        rng = RngStream(3)
        p = tmp_path / "t.ckpt"
        ck.write_checkpoint(p, {"g0": nn.init_mlp([3, 4, 1], rng)})
        blob = p.read_bytes()
        p.write_bytes(blob[:-7])
        with pytest.raises(ck.CheckpointError, match="truncated"):
            ck.read_checkpoint(p)


class TestConfig:
    def test_load_valid(self, tmp_path):
        cfg = load_config(toy_config(tmp_path))
        assert cfg.variant == "vflgan"
        assert cfg.schema.target == "k"
        assert cfg.gan.epochs == 3

    def test_version_checked(self, tmp_path):
        p = toy_config(tmp_path, extra={"config_version": 99})
        with pytest.raises(ConfigError, match="config_version"):
            load_config(p)

    def test_unknown_gan_key(self, tmp_path):
        p = toy_config(tmp_path, extra={"gan": {"latent_dimension": 5}})
        with pytest.raises(ConfigError, match="unknown gan settings"):
            load_config(p)

    def test_split_validated(self, tmp_path):
        p = toy_config(tmp_path, extra={"split": [[0], [1]]})
        with pytest.raises(ConfigError, match="split"):
            load_config(p)

    def test_audit_needs_target_or_select(self, tmp_path):
        p = toy_config(tmp_path, extra={"audit": {"shadows": 4}})
        with pytest.raises(ConfigError, match="target"):
            load_config(p)


class TestTrainCommand:
    def test_train_writes_run_dir(self, tmp_path):
        cfg_path = toy_config(tmp_path)
        assert main(["train", "--config", str(cfg_path)]) == 0
        run = tmp_path / "run"
        assert (run / "manifest.yaml").exists()
        assert (run / "checkpoints" / "final.ckpt").exists()
        assert (run / "checkpoints" / "best.ckpt").exists()
        log = (run / "logs" / "train_log.csv").read_text().strip().split("\n")
        assert len(log) == 4  # header + 3 epochs
        manifest = yaml.safe_load((run / "manifest.yaml").read_text())
        assert manifest["status"] == "completed"
        # every inventoried digest verifies
        import hashlib

        for rel, want in manifest["inventory"].items():
            got = hashlib.sha256((run / rel).read_bytes()).hexdigest()
            assert got == want

    def test_refuses_nonempty_output(self, tmp_path):
        cfg_path = toy_config(tmp_path)
        run = tmp_path / "run"
        run.mkdir()
        (run / "junk").write_text("x")
        assert main(["train", "--config", str(cfg_path)]) == 1

    def test_same_seed_byte_identical(self, tmp_path):
        cfg_path = toy_config(tmp_path)
        assert main(["train", "--config", str(cfg_path),
                     "--out", str(tmp_path / "r1")]) == 0
        assert main(["train", "--config", str(cfg_path),
                     "--out", str(tmp_path / "r2")]) == 0
        for rel in ("checkpoints/final.ckpt", "checkpoints/best.ckpt",
                    "logs/train_log.csv"):
            b1 = (tmp_path / "r1" / rel).read_bytes()
            b2 = (tmp_path / "r2" / rel).read_bytes()
            assert b1 == b2

    def test_dp_run_records_budget(self, tmp_path):
        cfg_path = toy_config(
            tmp_path, extra={"dp": {"epsilon": 10.0, "delta": 1e-3, "clip": 1.0}}
        )
        assert main(["train", "--config", str(cfg_path)]) == 0
        manifest = yaml.safe_load((tmp_path / "run" / "manifest.yaml").read_text())
        dp = manifest["dp"]
        assert dp["epsilon_external"] <= 10.0
        assert dp["epsilon_internal"] >= dp["epsilon_external"]
        assert dp["sigma"] > 0

    def test_failed_run_marked(self, tmp_path, monkeypatch):
        from vfsynth import fedgan as fg

        cfg_path = toy_config(tmp_path)

        def boom(*a, **k):
            raise fg.TrainingDiverged("non-finite loss at epoch 1, role d1")

        monkeypatch.setattr("vfsynth.cli.fg.train", boom)
        assert main(["train", "--config", str(cfg_path)]) == 1
        manifest = yaml.safe_load((tmp_path / "run" / "manifest.yaml").read_text())
        assert manifest["status"] == "failed"
        assert "epoch 1" in manifest["error"]


class TestGenerateCommand:
    def test_generate_roundtrip(self, tmp_path):
        cfg_path = toy_config(tmp_path)
        assert main(["train", "--config", str(cfg_path)]) == 0
        out = tmp_path / "synth.csv"
        rc = main(["generate", "--run", str(tmp_path / "run"), "--n", "20",
                   "--seed", "9", "--out", str(out)])
        assert rc == 0
        cfg = load_config(cfg_path)
        back = d.load_csv(out, cfg.schema)
        assert back.n_rows == 20

    def test_zero_rows_header_only(self, tmp_path):
        cfg_path = toy_config(tmp_path)
        main(["train", "--config", str(cfg_path)])
        out = tmp_path / "empty.csv"
        assert main(["generate", "--run", str(tmp_path / "run"), "--n", "0",
                     "--seed", "9", "--out", str(out)]) == 0
        assert out.read_text().strip() == "a,b,k"

    def test_same_seed_same_csv(self, tmp_path):
        cfg_path = toy_config(tmp_path)
        main(["train", "--config", str(cfg_path)])
        o1, o2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
        main(["generate", "--run", str(tmp_path / "run"), "--n", "15",
              "--seed", "4", "--out", str(o1)])
        main(["generate", "--run", str(tmp_path / "run"), "--n", "15",
              "--seed", "4", "--out", str(o2)])
        assert o1.read_bytes() == o2.read_bytes()

    def test_tampered_checkpoint_rejected(self, tmp_path):
        cfg_path = toy_config(tmp_path)
        main(["train", "--config", str(cfg_path)])
        target = tmp_path / "run" / "checkpoints" / "final.ckpt"
        blob = bytearray(target.read_bytes())
        blob[-1] ^= 0xFF
        target.write_bytes(bytes(blob))
        rc = main(["generate", "--run", str(tmp_path / "run"), "--n", "5",
                   "--seed", "1", "--out", str(tmp_path / "x.csv")])
        assert rc == 1


class TestEvalCommand:
    def test_eval_self_comparison(self, tmp_path):
        cfg_path = toy_config(tmp_path, n=120)
        cfg = load_config(cfg_path)
        rc = main([
            "eval", "--real", cfg.dataset_path, "--synth", cfg.dataset_path,
            "--config", str(cfg_path), "--out", str(tmp_path / "ev"),
            "--seed", "2",
        ])
        assert rc == 0
        rep = yaml.safe_load((tmp_path / "ev" / "report.yaml").read_text())
        assert rep["frechet_distance"] == pytest.approx(0.0, abs=1e-8)
        assert rep["total_difference"] < 0.05
        lines = (tmp_path / "ev" / "metrics.csv").read_text().strip().split("\n")
        assert lines[0] == "setting,accuracy,f1"
        assert len(lines) == 7  # 4 settings + FD + total difference

    def test_missing_target_named(self, tmp_path, capsys):
        cfg_path = toy_config(tmp_path)
        cfg = load_config(cfg_path)
        rc = main([
            "eval", "--real", cfg.dataset_path, "--synth", cfg.dataset_path,
            "--config", str(cfg_path), "--target", "nope",
            "--out", str(tmp_path / "ev2"),
        ])
        assert rc == 1
        assert "nope" in capsys.readouterr().err


class TestAuditCommand:
    def test_audit_end_to_end_small(self, tmp_path):
        cfg_path = toy_config(
            tmp_path,
            n=24,
            extra={
                "audit": {
                    "modes": ["assd"],
                    "shadows": 4,
                    "repeats": 2,
                    "feature_kinds": ["naive"],
                    "select": "nn",
                    "train_count": 2,
                    "test_count": 2,
                },
                "gan": {
                    "latent_dim": 4, "gen_hidden": [8],
                    "disc_part1_hidden": [8], "feature_dim": 4,
                    "disc_part2_hidden": [8], "server_hidden": [8],
                    "batch_size": 8, "disc_steps": 1, "epochs": 2,
                },
            },
        )
        rc = main(["audit", "--config", str(cfg_path),
                   "--out", str(tmp_path / "aud")])
        assert rc == 0
        rep = yaml.safe_load((tmp_path / "aud" / "audit_report.yaml").read_text())
        assert "assd" in rep["results"]
        assert 0.0 <= rep["results"]["assd"]["naive"]["auc_mean"] <= 1.0
        assert (tmp_path / "aud" / "features_assd_naive.csv").exists()

    def test_select_nn_deterministic(self, tmp_path):
        cfg_path = toy_config(
            tmp_path, n=24,
            extra={"audit": {"modes": ["assd"], "shadows": 2, "repeats": 2,
                             "feature_kinds": ["naive"], "select": "nn"}},
        )
        from vfsynth.audit import find_vulnerable_nn

        cfg = load_config(cfg_path)
        ds = d.load_csv(cfg.dataset_path, cfg.schema)
        assert find_vulnerable_nn(ds) == find_vulnerable_nn(ds)

    def test_too_few_shadows_rejected(self, tmp_path):
        cfg_path = toy_config(
            tmp_path,
            extra={"audit": {"modes": ["assd"], "shadows": 1, "select": "nn"}},
        )
        with pytest.raises(ConfigError):
            load_config(cfg_path)


class TestAccountantCommand:
    def test_report_matches_library(self, capsys):
        assert main(["accountant", "report", "--sigma", "1", "--gamma", "1",
                     "--steps", "1", "--delta", "1e-5"]) == 0
        out = capsys.readouterr().out
        assert "epsilon_external=5.30259" in out
        assert "alpha=6" in out

    def test_report_curve_csv(self, tmp_path, capsys):
        curve = tmp_path / "curve.csv"
        assert main(["accountant", "report", "--sigma", "1", "--gamma", "0.1",
                     "--steps", "10", "--delta", "1e-5",
                     "--curve", str(curve)]) == 0
        lines = curve.read_text().strip().split("\n")
        assert lines[0] == "alpha,epsilon"
        assert len(lines) == 512  # alpha grid 2..512

    def test_calibrate_round_trip(self, capsys):
        assert main(["accountant", "calibrate", "--epsilon", "5.302585",
                     "--delta", "1e-5", "--gamma", "1", "--steps", "1"]) == 0
        out = capsys.readouterr().out
        sigma = float(out.split("sigma=")[1].split("\n")[0])
        assert 0.99 <= sigma <= 1.01

    def test_gamma_out_of_range(self, capsys):
        assert main(["accountant", "report", "--sigma", "1", "--gamma", "1.5",
                     "--steps", "1", "--delta", "1e-5"]) == 1
        assert "gamma" in capsys.readouterr().err
