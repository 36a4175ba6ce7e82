import json
import subprocess
import sys

import numpy as np
import pytest

from symsiam import experiment
from symsiam.cli import main

TINY = {
    "data": {"n_cases": 12, "height": 64, "width": 48, "patch_size": 16, "lesion_radius": [3, 5],
             "max_misalignment": 2, "max_shift": 3, "lesion_prob": 0.8, "seed": 5},
    "train": {"batch_size": 16, "epochs": 2, "seed": 5,
              "encoder": {"input_side": 16, "channels_per_stage": [4, 8], "embedding_dim": 8}},
    "eval": {"split": "val", "probe": {"epochs": 5}},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root, str(cfg)


def first_line_json(path):
    line = path.read_text().splitlines()[0]
    assert line.startswith("# ")
    return json.loads(line[2:])


class TestSynth:
    def test_byte_identical_rerun(self, work, tmp_path):
        root, cfg = work
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again/manifest.json").read_bytes() == (root / "data/manifest.json").read_bytes()

    def test_refuses_non_empty_out_without_force(self, work, capsys):
        root, cfg = work
        assert main(["synth", "--config", cfg, "--out", str(root / "data")]) == 2
        assert "force" in capsys.readouterr().err

    def test_force_overwrites(self, work, tmp_path):
        _, cfg = work
        out = tmp_path / "d"
        out.mkdir()
        (out / "junk").write_text("x")
        assert main(["synth", "--config", cfg, "--out", str(out), "--force"]) == 0
        assert (out / "manifest.json").exists()

    def test_flags_override_config(self, work, tmp_path):
        _, cfg = work
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d"), "--n-cases", "10"]) == 0
        m = json.loads((tmp_path / "d/manifest.json").read_text())
        assert len(m["cases"]) == 10

    def test_too_few_cases_is_data_error(self, work, tmp_path):
        _, cfg = work
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d"), "--n-cases", "5"]) == 3

    def test_bad_config_values(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--patch-size", "30"]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "e")]) == 2
        bad.write_text(json.dumps({"extra": {}}))
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "f")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == 3


class TestPretrain:
    def test_artifacts_embed_config(self, work):
        root, _ = work
        run = root / "run"
        for name in ("best.ckpt", "last.ckpt", "metrics.csv", "summary.json"):
            assert (run / name).exists(), name
        prov = first_line_json(run / "metrics.csv")
        assert prov["config"]["train"]["epochs"] == 2
        assert prov["dataset_digest"] == experiment.manifest_digest(root / "data")
        summary = json.loads((run / "summary.json").read_text())
        assert summary["config"] == prov["config"]

    def test_rerun_is_bit_exact(self, work, tmp_path):
        root, cfg = work
        assert main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "r")]) == 0
        for name in ("metrics.csv", "last.ckpt", "best.ckpt", "summary.json"):
            assert (tmp_path / "r" / name).read_bytes() == (root / "run" / name).read_bytes(), name

    def test_resume_continues(self, work, tmp_path):
        root, cfg = work
        data = str(root / "data")
        out = str(tmp_path / "r")
        assert main(["pretrain", "--config", cfg, "--data", data, "--out", out, "--epochs", "1"]) == 0
        assert main(["pretrain", "--config", cfg, "--data", data, "--out", out, "--resume"]) == 0
        resumed = (tmp_path / "r/metrics.csv").read_text().splitlines()
        assert resumed[1:] == (root / "run/metrics.csv").read_text().splitlines()[1:]

    def test_resume_on_other_dataset_refused(self, work, tmp_path):
        root, cfg = work
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d2"), "--data-seed", "6"]) == 0
        import shutil

        shutil.copytree(root / "run", tmp_path / "r")
        code = main(["pretrain", "--config", cfg, "--data", str(tmp_path / "d2"), "--out", str(tmp_path / "r"),
                     "--resume"])
        assert code in (2, 3)

    def test_experimental_mode_needs_flag(self, work, tmp_path):
        root, cfg = work
        args = ["pretrain", "--config", cfg, "--data", str(root / "data"), "--single-network"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 2
        assert main(args + ["--out", str(tmp_path / "b"), "--experimental", "--epochs", "1"]) == 0

    @pytest.mark.parametrize("loss", ["triplet", "ssl-mix"])
    def test_alternative_losses_run(self, work, tmp_path, loss):
        root, cfg = work
        assert main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / loss),
                     "--loss", loss, "--score", "P", "--experimental", "--epochs", "1"]) == 0

    def test_microbatch_must_divide(self, work, tmp_path):
        root, cfg = work
        assert main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "x"),
                     "--accumulation-microbatch", "5"]) == 2

    def test_sweep_selects_best_validation(self, work, tmp_path):
        root, cfg = work
        out = tmp_path / "sweep"
        assert main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--out", str(out), "--sweep",
                     "--batch-sizes", "8,16", "--lrs", "0.001,0.002", "--epochs", "1"]) == 0
        summary = json.loads((out / "sweep_summary.json").read_text())["result"]
        runs = summary["runs"]
        assert len(runs) == 4
        assert {(r["batch_size"], r["learning_rate"]) for r in runs} == {(8, 0.001), (8, 0.002), (16, 0.001),
                                                                        (16, 0.002)}
        best = max(runs, key=lambda r: r["best_val_avg_auc"])
        assert (summary["best"]["batch_size"], summary["best"]["learning_rate"]) == (
            best["batch_size"], best["learning_rate"])
        prov, rows = experiment.read_csv_artifact(out / "sweep_summary.csv")
        assert len(rows) == 4 and prov["config"]["sweep_batch_sizes"] == [8, 16]


class TestEval:
    def test_oracle_pair_auc_is_one(self, work, tmp_path):
        root, cfg = work
        assert main(["eval", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "e"),
                     "--task", "pair-auc", "--score", "oracle", "--untrained", "--split", "train"]) == 0
        report = json.loads((tmp_path / "e/report.json").read_text())
        assert report["metrics"]["average_auc"] == 1.0
        prov, rows = experiment.read_csv_artifact(tmp_path / "e/auc_curve.csv")
        assert len(rows) == 100 and prov["config"]["eval"]["score"] == "oracle"

    def test_pair_auc_from_checkpoint_is_reproducible(self, work, tmp_path):
        root, cfg = work
        args = ["eval", "--config", cfg, "--data", str(root / "data"), "--task", "pair-auc",
                "--checkpoint", str(root / "run/best.ckpt")]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        for name in ("report.json", "auc_curve.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_undefined_metric_exit_code(self, work, tmp_path):
        root, cfg = work
        # the tiny test split has no abnormal pairs
        code = main(["eval", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "e"),
                     "--task", "pair-auc", "--untrained", "--split", "test"])
        assert code == 3

    def test_missing_checkpoint(self, work, tmp_path):
        root, cfg = work
        code = main(["eval", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "e"),
                     "--task", "pair-auc", "--checkpoint", str(tmp_path / "none.ckpt")])
        assert code == 3

    def test_probe_binary(self, work, tmp_path):
        root, cfg = work
        assert main(["probe", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "p"),
                     "--task", "probe-binary", "--checkpoint", str(root / "run/best.ckpt"), "--split", "val"]) == 0
        prov, rows = experiment.read_csv_artifact(tmp_path / "p/probe_auc.csv")
        assert rows[0]["class"] == "abnormal" and 0.0 <= float(rows[0]["auc"]) <= 1.0
        assert prov["config"]["eval"]["probe"]["epochs"] == 5

    def test_probe_needs_task(self, work, tmp_path):
        root, cfg = work
        assert main(["probe", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "p")]) == 2

    def test_probe_without_labels_refused(self, work, tmp_path):
        root, cfg = work
        import shutil

        data = tmp_path / "nolabels"
        shutil.copytree(root / "data", data)
        m = json.loads((data / "manifest.json").read_text())
        m["labeled_patches"] = []
        (data / "manifest.json").write_text(json.dumps(m))
        assert main(["probe", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "p"),
                     "--task", "probe-binary", "--untrained"]) == 3

    def test_export_embeddings(self, work, tmp_path):
        root, cfg = work
        assert main(["export", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "x"),
                     "--checkpoint", str(root / "run/best.ckpt"), "--net", "2"]) == 0
        prov, rows = experiment.read_csv_artifact(tmp_path / "x/embeddings.csv")
        n_val = sum(p["split"] == "val" for p in json.loads((root / "data/manifest.json").read_text())["pairs"])
        assert len(rows) == n_val and len(rows[0]) == 3 + 16
        assert prov["config"]["eval"]["net"] == 2
        assert all(np.isfinite(float(v)) for v in list(rows[0].values())[3:])


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "symsiam", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("symsiam ")
