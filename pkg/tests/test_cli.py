import numpy as np
import pytest
from click.testing import CliRunner

from videodiff.cli import main
from videodiff.config import RunConfig
from videodiff.tensor import get_tape


@pytest.fixture(autouse=True)
def clean_tape():
    get_tape().clear()
    yield
    get_tape().clear()


@pytest.fixture()
def runner():
    return CliRunner()


MICRO_CONFIG = RunConfig(
    height=16, width=16, past_frames=2, future_frames=2, clip_frames=6,
    downsample_factor=2, latent_channels=12,
    embed_dim=16, heads=2, mlp_ratio=2.0, backbone_widths=(16, 16, 16),
    time_embed_dim=16, n_train_sigmas=10, n_sample_steps=3,
    p_self_cond=0.9, lr=1e-3, batch_size=2, train_steps=4,
    checkpoint_every=2, seed=0, n_trajectories=2,
)


@pytest.fixture()
def workspace(tmp_path, runner):
    """Dataset + micro config + a 4-step training run."""
    data = tmp_path / "data"
    result = runner.invoke(main, ["gen-data", "--out", str(data),
                                  "--train", "3", "--test", "2",
                                  "--frames", "6", "--height", "16",
                                  "--width", "16", "--seed", "1"])
    assert result.exit_code == 0, result.output
    cfg_path = tmp_path / "config.txt"
    MICRO_CONFIG.save(cfg_path)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, ["train", "--config", str(cfg_path),
                                  "--data", str(data), "--out", str(run_dir)])
    assert result.exit_code == 0, result.output
    return tmp_path


class TestGenData:
    def test_default_counts(self, tmp_path, runner):
        out = tmp_path / "d"
        result = runner.invoke(main, ["gen-data", "--out", str(out),
                                      "--frames", "4"])
        assert result.exit_code == 0, result.output
        assert "10 clips" in result.output
        manifest = (out / "manifest.txt").read_text().splitlines()
        assert sum(line.startswith("train") for line in manifest) == 8
        assert sum(line.startswith("test") for line in manifest) == 2

    def test_idempotent_same_seed(self, tmp_path, runner):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            result = runner.invoke(main, ["gen-data", "--out", str(out),
                                          "--train", "2", "--test", "1",
                                          "--frames", "4", "--seed", "7"])
            assert result.exit_code == 0, result.output
        for rel in sorted(p.relative_to(out_a) for p in out_a.rglob("*.png")):
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()


class TestTrain:
    def test_writes_checkpoints_and_log(self, workspace):
        run_dir = workspace / "run"
        assert (run_dir / "ckpt_0000004.bin").exists()
        log = (run_dir / "loss.log").read_text().splitlines()
        assert len(log) == 4
        for line in log:
            step, loss, sigma, sc = line.split("\t")
            assert float(loss) > 0 and float(sigma) > 0
            assert sc in ("0", "1")

    def test_resume_continues_step_counter(self, workspace, runner):
        run_dir = workspace / "run"
        result = runner.invoke(main, [
            "train", "--config", str(workspace / "config.txt"),
            "--data", str(workspace / "data"), "--out", str(run_dir),
            "--resume", str(run_dir / "ckpt_0000004.bin"), "--steps", "6"])
        assert result.exit_code == 0, result.output
        assert "resumed from step 4" in result.output
        assert (run_dir / "ckpt_0000006.bin").exists()

    def test_protocol_longer_than_clip_rejected(self, tmp_path, runner):
        data = tmp_path / "d"
        runner.invoke(main, ["gen-data", "--out", str(data), "--train", "2",
                             "--test", "1", "--frames", "3", "--height", "16",
                             "--width", "16"])
        cfg = tmp_path / "c.txt"
        MICRO_CONFIG.save(cfg)  # P+F = 4 > 3
        result = runner.invoke(main, ["train", "--config", str(cfg),
                                      "--data", str(data),
                                      "--out", str(tmp_path / "r")])
        assert result.exit_code != 0
        assert "exceeds clip length" in str(result.exception)

    def test_config_hash_printed(self, workspace, runner):
        result = runner.invoke(main, [
            "train", "--config", str(workspace / "config.txt"),
            "--data", str(workspace / "data"),
            "--out", str(workspace / "run"), "--steps", "4"])
        assert result.exit_code == 0, result.output
        assert f"{MICRO_CONFIG.config_hash():#018x}" in result.output


class TestSample:
    def test_trajectory_directories(self, workspace, runner):
        out = workspace / "samples"
        result = runner.invoke(main, [
            "sample", "--ckpt", str(workspace / "run" / "ckpt_0000004.bin"),
            "--config", str(workspace / "config.txt"),
            "--clip", str(workspace / "data" / "clip_0000"),
            "--out", str(out), "--traj", "3", "--steps", "2"])
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in out.iterdir()) == [
            "conditioning", "traj_00", "traj_01", "traj_02"]
        assert len(list((out / "traj_00").glob("frame_*.png"))) == 2
        assert len(list((out / "conditioning").glob("frame_*.png"))) == 2

    def test_fixed_seed_reproducible(self, workspace, runner):
        outs = []
        for name in ("s1", "s2"):
            out = workspace / name
            result = runner.invoke(main, [
                "sample", "--ckpt", str(workspace / "run" / "ckpt_0000004.bin"),
                "--config", str(workspace / "config.txt"),
                "--clip", str(workspace / "data" / "clip_0000"),
                "--out", str(out), "--traj", "1", "--steps", "2",
                "--seed", "5"])
            assert result.exit_code == 0, result.output
            outs.append((out / "traj_00" / "frame_0000.png").read_bytes())
        assert outs[0] == outs[1]

    def test_one_step_sampler(self, workspace, runner):
        out = workspace / "one"
        result = runner.invoke(main, [
            "sample", "--ckpt", str(workspace / "run" / "ckpt_0000004.bin"),
            "--config", str(workspace / "config.txt"),
            "--clip", str(workspace / "data" / "clip_0000"),
            "--out", str(out), "--traj", "1", "--steps", "1"])
        assert result.exit_code == 0, result.output

    def test_hash_mismatch_rejected(self, workspace, runner):
        bad_cfg = workspace / "bad.txt"
        MICRO_CONFIG.replace(lr=9e-9).save(bad_cfg)
        result = runner.invoke(main, [
            "sample", "--ckpt", str(workspace / "run" / "ckpt_0000004.bin"),
            "--config", str(bad_cfg),
            "--clip", str(workspace / "data" / "clip_0000"),
            "--out", str(workspace / "x")])
        assert result.exit_code != 0
        assert "hash" in str(result.exception)


class TestEval:
    def test_report_files(self, workspace, runner):
        out = workspace / "eval"
        result = runner.invoke(main, [
            "eval", "--ckpt", str(workspace / "run" / "ckpt_0000004.bin"),
            "--config", str(workspace / "config.txt"),
            "--data", str(workspace / "data"), "--out", str(out),
            "--traj", "2", "--steps", "2"])
        assert result.exit_code == 0, result.output
        table = (out / "report.txt").read_text()
        assert "MEAN" in table and "psnr" in table
        assert (out / "report.jsonl").read_text().count("\n") == 3  # 2 clips + agg

    def test_more_trajectories_never_worse(self, workspace, runner):
        import json

        vals = {}
        for traj in (1, 2):
            out = workspace / f"eval{traj}"
            result = runner.invoke(main, [
                "eval", "--ckpt", str(workspace / "run" / "ckpt_0000004.bin"),
                "--config", str(workspace / "config.txt"),
                "--data", str(workspace / "data"), "--out", str(out),
                "--traj", str(traj), "--steps", "2"])
            assert result.exit_code == 0, result.output
            rows = [json.loads(line) for line in
                    (out / "report.jsonl").read_text().splitlines()]
            vals[traj] = {r["clip"]: r["metrics"] for r in rows
                          if r["clip"] != "__aggregate__"}
        for clip in vals[1]:
            assert vals[2][clip]["psnr"] >= vals[1][clip]["psnr"]
            assert vals[2][clip]["ssim"] >= vals[1][clip]["ssim"]
            assert vals[2][clip]["frechet"] <= vals[1][clip]["frechet"]


class TestVerify:
    def test_invariants_suite_passes(self, runner):
        result = runner.invoke(main, ["verify", "--suite", "invariants"])
        assert result.exit_code == 0, result.output
        assert "FAIL" not in result.output

    def test_oracle_suite_passes(self, runner):
        result = runner.invoke(main, ["verify", "--suite", "oracle"])
        assert result.exit_code == 0, result.output
        assert "analytic" in result.output.lower()

    def test_unknown_suite_rejected(self, runner):
        result = runner.invoke(main, ["verify", "--suite", "bogus"])
        assert result.exit_code != 0


class TestSeedEnv:
    def test_env_seed_overrides_config(self, workspace, runner, monkeypatch):
        monkeypatch.setenv("HMPDM_SEED", "123")
        cfg = MICRO_CONFIG.replace(seed=123)
        result = runner.invoke(main, [
            "train", "--config", str(workspace / "config.txt"),
            "--data", str(workspace / "data"),
            "--out", str(workspace / "envrun"), "--steps", "1"])
        assert result.exit_code == 0, result.output
        assert f"{cfg.config_hash():#018x}" in result.output
