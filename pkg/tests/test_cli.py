import numpy as np
import yaml

from scoreflow.cli import main
from scoreflow.summary import load_dataset

TINY = {
    "problem": {"kind": "linear_gaussian", "x_dim": 2, "y_dim": 4},
    "flow": {"n_blocks": 2, "hidden": [8]},
    "training": {
        "n_train": 12,
        "stages": 1,
        "max_epochs": 3,
        "patience": 3,
        "n_s_train": 4,
        "n_s_infer": 8,
    },
    "eval": {"n_test": 2, "n_samples": 20},
    "sweep": {"sizes": [8, 12]},
    "seed": 0,
}


def write_cfg(tmp_path, extra=None, name="run.yaml"):
    raw = yaml.safe_load(yaml.safe_dump(TINY))
    if extra:
        for k, v in extra.items():
            raw.setdefault(k, {}).update(v) if isinstance(v, dict) else raw.update({k: v})
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


class TestGenerate:
    def test_writes_dataset_and_manifest(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "out"
        assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
        ds = load_dataset((out / "dataset_stage000.bin").read_bytes(), expected_stage=0)
        assert ds.n_records == 12
        assert (out / "dataset_manifest.json").exists()

    def test_rerun_is_bitwise_identical(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "out"
        main(["generate", "--config", str(cfg), "--out", str(out)])
        first = (out / "dataset_stage000.bin").read_bytes()
        main(["generate", "--config", str(cfg), "--out", str(out)])
        assert (out / "dataset_stage000.bin").read_bytes() == first

    def test_seed_override_changes_data(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["generate", "--config", str(cfg), "--out", str(out1)])
        main(["generate", "--config", str(cfg), "--out", str(out2), "--seed", "99"])
        assert (out1 / "dataset_stage000.bin").read_bytes() != (out2 / "dataset_stage000.bin").read_bytes()


class TestTrain:
    def test_writes_bundle_and_losses(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        bundle = out / "bundle"
        assert (bundle / "manifest.json").exists()
        assert (bundle / "flow_000.ckpt").exists()
        assert (bundle / "flow_001.ckpt").exists()
        losses = (out / "training_loss.csv").read_text().splitlines()
        assert losses[0].startswith("# config_hash=")
        assert losses[1] == "stage,epoch,train_loss,val_loss"

    def test_rerun_is_bitwise_identical(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "out"
        main(["train", "--config", str(cfg), "--out", str(out)])
        first = (out / "bundle" / "flow_001.ckpt").read_bytes()
        main(["train", "--config", str(cfg), "--out", str(out)])
        assert (out / "bundle" / "flow_001.ckpt").read_bytes() == first


class TestInferAndEvaluate:
    def _trained(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "out"
        main(["train", "--config", str(cfg), "--out", str(out)])
        return cfg, out / "bundle"

    def test_infer_outputs(self, tmp_path):
        cfg, bundle = self._trained(tmp_path)
        ypath = tmp_path / "y.txt"
        np.savetxt(ypath, np.arange(4, dtype=float))
        out = tmp_path / "inf"
        rc = main([
            "infer", "--config", str(cfg), "--bundle", str(bundle),
            "--y", str(ypath), "--n-samples", "30", "--out", str(out),
        ])
        assert rc == 0
        samples = np.loadtxt(out / "samples.csv", delimiter=",", skiprows=1)
        assert samples.shape == (30, 2)
        mean = np.loadtxt(out / "mean.csv", delimiter=",", skiprows=1)
        assert np.allclose(mean, samples.mean(axis=0), atol=1e-12)
        traj = (out / "trajectory.csv").read_text().splitlines()
        assert len(traj) == 2 + 2  # comment + header + stages 0..1

    def test_infer_wrong_observation_length(self, tmp_path):
        cfg, bundle = self._trained(tmp_path)
        ypath = tmp_path / "y.txt"
        np.savetxt(ypath, np.arange(5, dtype=float))
        rc = main([
            "infer", "--config", str(cfg), "--bundle", str(bundle),
            "--y", str(ypath), "--out", str(tmp_path / "inf"),
        ])
        assert rc == 1

    def test_evaluate_outputs(self, tmp_path):
        cfg, bundle = self._trained(tmp_path)
        out = tmp_path / "ev"
        rc = main(["evaluate", "--config", str(cfg), "--bundle", str(bundle), "--out", str(out)])
        assert rc == 0
        records = (out / "metrics_records.csv").read_text().splitlines()
        assert len(records) == 2 + 2 * 2  # comment + header + 2 obs x 2 stages
        assert (out / "metrics_summary.csv").exists()

    def test_evaluate_mismatched_problem(self, tmp_path):
        cfg, bundle = self._trained(tmp_path)
        other = yaml.safe_load((tmp_path / "run.yaml").read_text())
        other["problem"]["x_dim"] = 3
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump(other))
        rc = main(["evaluate", "--config", str(bad), "--bundle", str(bundle), "--out", str(tmp_path / "ev")])
        assert rc == 1


class TestErrors:
    def test_missing_config_file(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "none.yaml")]) == 1

    def test_invalid_config_key(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"problem": {"kind": "linear_gaussian", "oops": 1}}))
        assert main(["generate", "--config", str(path), "--out", str(tmp_path / "o")]) == 1

    def test_missing_bundle(self, tmp_path):
        cfg = write_cfg(tmp_path)
        ypath = tmp_path / "y.txt"
        np.savetxt(ypath, np.zeros(4))
        rc = main([
            "infer", "--config", str(cfg), "--bundle", str(tmp_path / "nope"),
            "--y", str(ypath), "--out", str(tmp_path / "o"),
        ])
        assert rc == 2  # bundle errors are pipeline failures


class TestSweep:
    def test_sweep_outputs(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "sw"
        assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
        sweep = (out / "sweep.csv").read_text().splitlines()
        assert len(sweep) == 2 + 2 * 2  # comment + header + 2 sizes x 2 stages
        assert (out / "sweep_summary_n8.csv").exists()
        assert (out / "sweep_summary_n12.csv").exists()
