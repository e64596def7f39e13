"""End-to-end command-line tests via click's CliRunner."""

import hashlib
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from stackpool.cli import main

GEN = ["gen-data", "--seed", "3", "--scenes", "12", "--test-scenes", "4",
       "--height", "32", "--width", "32", "--count-min", "2",
       "--count-max", "8"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared dataset + two short training runs for the read-only commands."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    r = runner.invoke(main, GEN + ["--out", str(root / "ds")])
    assert r.exit_code == 0, r.output
    for name, pool in (("runv", "vanilla:2:s2"), ("runs", "stacked:2,2,3:s2")):
        r = runner.invoke(main, [
            "train", "--data", str(root / "ds"), "--net", "base_s",
            "--pool", pool, "--epochs", "4", "--patches", "3",
            "--lr", "3e-4", "--seed", "1", "--out", str(root / name)])
        assert r.exit_code == 0, r.output
    return root


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class TestGenData:
    def test_same_seed_bit_identical(self, tmp_path):
        runner = CliRunner()
        for sub in ("a", "b"):
            r = runner.invoke(main, GEN + ["--out", str(tmp_path / sub)])
            assert r.exit_code == 0, r.output
        files = sorted(p.relative_to(tmp_path / "a")
                       for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            # run-manifest.json records the differing --out paths; its
            # artifact hash table must still agree
            if rel.name == "run-manifest.json":
                ma = json.loads((tmp_path / "a" / rel).read_text())
                mb = json.loads((tmp_path / "b" / rel).read_text())
                assert ma["artifacts"] == mb["artifacts"]
            else:
                assert sha256(tmp_path / "a" / rel) \
                    == sha256(tmp_path / "b" / rel)

    def test_manifest_rerun_reproduces_artifacts(self, workdir, tmp_path):
        runner = CliRunner()
        manifest = json.loads(
            (workdir / "ds" / "run-manifest.json").read_text())
        r = runner.invoke(main, ["gen-data", "--out", str(tmp_path / "re"),
                                 "--config",
                                 str(workdir / "ds" / "run-manifest.json")])
        assert r.exit_code == 0, r.output
        for rel, digest in manifest["artifacts"].items():
            assert sha256(tmp_path / "re" / rel) == digest

    def test_refuses_nonempty_dir_without_force(self, tmp_path):
        (tmp_path / "old.txt").write_text("x")
        r = CliRunner().invoke(main, GEN + ["--out", str(tmp_path)])
        assert r.exit_code != 0
        assert "--force" in r.output

    def test_zero_head_dataset(self, tmp_path):
        r = CliRunner().invoke(main, [
            "gen-data", "--out", str(tmp_path / "z"), "--scenes", "10",
            "--test-scenes", "0", "--count-min", "0", "--count-max", "0"])
        assert r.exit_code == 0, r.output
        manifest = json.loads((tmp_path / "z" / "manifest.json").read_text())
        assert manifest["total_heads"] == 0


class TestTrain:
    def test_artifacts_and_loss_decreases(self, workdir):
        out = workdir / "runv"
        for name in ("best.ckpt", "log.csv", "summary.json", "curve.png",
                     "run-manifest.json"):
            assert (out / name).exists(), name
        lines = (out / "log.csv").read_text().splitlines()[1:]
        losses = [float(ln.split(",")[1]) for ln in lines]
        assert losses[-1] < losses[0]

    def test_deterministic_checkpoint(self, workdir, tmp_path):
        r = CliRunner().invoke(main, [
            "train", "--data", str(workdir / "ds"), "--net", "base_s",
            "--pool", "vanilla:2:s2", "--epochs", "4", "--patches", "3",
            "--lr", "3e-4", "--seed", "1", "--out", str(tmp_path / "again")])
        assert r.exit_code == 0, r.output
        assert sha256(tmp_path / "again" / "best.ckpt") \
            == sha256(workdir / "runv" / "best.ckpt")

    def test_missing_dataset_path(self, tmp_path):
        r = CliRunner().invoke(main, [
            "train", "--data", str(tmp_path / "nope"),
            "--out", str(tmp_path / "o")])
        assert r.exit_code != 0


class TestEval:
    def test_outputs_and_determinism(self, workdir, tmp_path):
        runner = CliRunner()
        args = ["eval", "--ckpt", str(workdir / "runv" / "best.ckpt"),
                "--data", str(workdir / "ds"), "--split", "test",
                "--buckets", "2"]
        ra = runner.invoke(main, args + ["--out", str(tmp_path / "a")])
        rb = runner.invoke(main, args + ["--out", str(tmp_path / "b")])
        assert ra.exit_code == 0, ra.output
        assert rb.exit_code == 0, rb.output
        assert "MAE" in ra.output
        for name in ("counts.csv", "metrics.json"):
            assert sha256(tmp_path / "a" / name) == sha256(tmp_path / "b" / name)
        assert (tmp_path / "a" / "groups.png").exists()

    def test_empty_split_rejected(self, tmp_path):
        runner = CliRunner()
        r = runner.invoke(main, [
            "gen-data", "--out", str(tmp_path / "d"), "--scenes", "10",
            "--test-scenes", "0", "--height", "32", "--width", "32"])
        assert r.exit_code == 0, r.output
        r = runner.invoke(main, [
            "train", "--data", str(tmp_path / "d"), "--epochs", "1",
            "--patches", "1", "--out", str(tmp_path / "t")])
        assert r.exit_code == 0, r.output
        r = runner.invoke(main, [
            "eval", "--ckpt", str(tmp_path / "t" / "best.ckpt"),
            "--data", str(tmp_path / "d"), "--split", "test",
            "--out", str(tmp_path / "e")])
        assert r.exit_code != 0
        assert "empty" in r.output


class TestVerify:
    def test_pass_with_grad_check(self, tmp_path):
        r = CliRunner().invoke(main, [
            "verify", "--pool", "multi:2,4,8:s2", "--trials", "10",
            "--extents", "32x32", "--grad-check", "--net", "base_s",
            "--out", str(tmp_path)])
        assert r.exit_code == 0, r.output
        assert r.output.count("PASS") == 2
        report = json.loads((tmp_path / "verify.json").read_text())
        assert report["equivalence_pass"] is True
        assert report["max_forward_diff"] == 0.0
        assert report["grad_check"]["pass"] is True

    def test_indivisible_kernel_gap_rejected(self):
        r = CliRunner().invoke(main, ["verify", "--pool", "multi:2,5:s2",
                                      "--trials", "1"])
        assert r.exit_code != 0
        assert "divisible" in r.output

    def test_non_multi_spec_rejected(self):
        r = CliRunner().invoke(main, ["verify", "--pool", "vanilla:2:s2"])
        assert r.exit_code != 0


class TestBench:
    def test_outputs_and_baseline_diff(self, tmp_path):
        runner = CliRunner()
        args = ["bench", "--reps", "30", "--warmups", "5",
                "--layer-extents", "64", "--net-extents", "32",
                "--arch", "base_s"]
        r = runner.invoke(main, args + ["--out", str(tmp_path / "a")])
        assert r.exit_code in (0, 1), r.output  # orderings are machine-dependent
        for name in ("bench_layer.csv", "bench_network.csv", "bench.json",
                     "bench.png", "run-manifest.json"):
            assert (tmp_path / "a" / name).exists(), name
        r2 = runner.invoke(main, args + [
            "--out", str(tmp_path / "b"),
            "--baseline", str(tmp_path / "a" / "bench.json")])
        assert r2.exit_code in (0, 1), r2.output
        diff = json.loads((tmp_path / "b" / "bench.json").read_text())
        assert set(diff["baseline_diff"]) == set(diff["checks"])

    def test_protocol_violation_is_clean_error(self, tmp_path):
        r = CliRunner().invoke(main, ["bench", "--reps", "3",
                                      "--out", str(tmp_path)])
        assert r.exit_code != 0
        assert "repetitions" in r.output


class TestInvariance:
    def test_same_checkpoint_equal_gammas(self, workdir, tmp_path):
        ckpt = str(workdir / "runv" / "best.ckpt")
        r = CliRunner().invoke(main, [
            "invariance", "--ckpt-a", ckpt, "--ckpt-b", ckpt,
            "--data", str(workdir / "ds"), "--split", "test",
            "--out", str(tmp_path)])
        assert r.exit_code == 0, r.output
        payload = json.loads((tmp_path / "invariance.json").read_text())
        variants = list(payload["mean_gamma"])
        assert len(variants) == 2
        assert payload["mean_gamma"][variants[0]] \
            == payload["mean_gamma"][variants[1]]
        assert (tmp_path / "invariance.png").exists()

    def test_beta_one_all_zero(self, workdir, tmp_path):
        r = CliRunner().invoke(main, [
            "invariance", "--ckpt-a", str(workdir / "runv" / "best.ckpt"),
            "--ckpt-b", str(workdir / "runs" / "best.ckpt"),
            "--data", str(workdir / "ds"), "--split", "test",
            "--beta", "1.0", "--out", str(tmp_path)])
        assert r.exit_code == 0, r.output
        payload = json.loads((tmp_path / "invariance.json").read_text())
        for layers in payload["mean_gamma"].values():
            assert all(v == 0.0 for v in layers.values())
