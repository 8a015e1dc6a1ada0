import json

import numpy as np
import pytest

from star.cli import main
from star.config import RunConfig, load_config, parse_config_text, save_config
from star.errors import ConfigError


TINY_CFG = """
window_len=12
n_channels=10
n_classes=3
n_agents=2
episode_len=4
mc_copies=2
enc_glimpse_width=8
enc_loc_width=8
enc_out_width=8
conv_filters=4
core_width=8
learning_rate=0.05
batch_size=8
epochs=2
seed=0
"""


@pytest.fixture
def synth_csv(tmp_path):
    path = tmp_path / "data.csv"
    rc = main(["synth", "--out", str(path), "--classes", "3", "--channels", "10",
               "--subjects", "3", "--recordings-per-class", "3",
               "--window-len", "12", "--recording-len", "12", "--seed", "1"])
    assert rc == 0
    return path


class TestConfigFile:
    def test_parse_and_types(self):
        cfg = parse_config_text(TINY_CFG)
        assert cfg.window_len == 12
        assert cfg.learning_rate == 0.05
        assert cfg.mc_copies == 2

    def test_unknown_key_rejected_with_line(self):
        with pytest.raises(ConfigError, match="line 2.*definitely_wrong"):
            parse_config_text("seed=1\ndefinitely_wrong=3\n")

    def test_comments_and_blank_lines(self):
        cfg = parse_config_text("# comment\n\nseed=4  # trailing\n")
        assert cfg.seed == 4

    def test_bool_parsing(self):
        cfg = parse_config_text("use_time_attention=false\nuse_baseline=TRUE\n")
        assert cfg.use_time_attention is False
        assert cfg.use_baseline is True

    def test_bad_bool_rejected(self):
        with pytest.raises(ConfigError, match="boolean"):
            parse_config_text("use_baseline=maybe\n")

    def test_save_load_roundtrip(self, tmp_path):
        cfg = RunConfig(n_channels=24, n_classes=4, learning_rate=0.125, seed=17)
        path = tmp_path / "cfg.txt"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError, match="n_agents"):
            parse_config_text("n_agents=0\n")


class TestSynthCommand:
    def test_writes_loadable_csv(self, synth_csv):
        from star.data import load_csv
        ds = load_csv(synth_csv)
        assert ds.n_channels == 10
        assert len(ds.recordings) == 3 * 3 * 3


class TestTrainEvalFlow:
    def run_train(self, tmp_path, synth_csv, outname="run", extra=()):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY_CFG)
        outdir = tmp_path / outname
        rc = main(["train", "--data", str(synth_csv), "--out", str(outdir),
                   "--config", str(cfg_path), "--holdout", "subj0", *extra])
        assert rc == 0
        return outdir

    def test_train_produces_artifacts(self, tmp_path, synth_csv):
        outdir = self.run_train(tmp_path, synth_csv)
        assert (outdir / "checkpoint.star").exists()
        assert (outdir / "training_log.csv").exists()
        assert (outdir / "metrics.txt").exists()
        assert (outdir / "training_curves.png").exists()
        assert (outdir / "confusion.png").exists()
        log = (outdir / "training_log.csv").read_text().strip().splitlines()
        assert log[0] == "epoch,loss,mean_reward"
        assert len(log) == 3

    def test_eval_prints_accuracy_in_unit_interval(self, tmp_path, synth_csv, capsys):
        outdir = self.run_train(tmp_path, synth_csv)
        rc = main(["eval", "--checkpoint", str(outdir / "checkpoint.star"),
                   "--data", str(synth_csv), "--holdout", "subj0",
                   "--out", str(tmp_path / "evalout")])
        assert rc == 0
        out = capsys.readouterr().out
        acc_line = [l for l in out.splitlines() if l.startswith("accuracy")][0]
        acc = float(acc_line.split(":")[1])
        assert 0.0 <= acc <= 1.0
        metrics = (tmp_path / "evalout" / "metrics.txt").read_text()
        assert "macro_f1=" in metrics

    def test_train_determinism_bitwise(self, tmp_path, synth_csv):
        out1 = self.run_train(tmp_path, synth_csv, "run1", extra=("--no-figures",))
        out2 = self.run_train(tmp_path, synth_csv, "run2", extra=("--no-figures",))
        assert (out1 / "checkpoint.star").read_bytes() == (out2 / "checkpoint.star").read_bytes()
        assert (out1 / "metrics.txt").read_bytes() == (out2 / "metrics.txt").read_bytes()
        assert (out1 / "training_log.csv").read_bytes() == (out2 / "training_log.csv").read_bytes()

    def test_train_determinism_with_workers(self, tmp_path, synth_csv):
        # the worker count is an execution knob: learned numbers never change
        from star.network import load_checkpoint
        out1 = self.run_train(tmp_path, synth_csv, "w1", extra=("--no-figures", "--workers", "1"))
        out2 = self.run_train(tmp_path, synth_csv, "w2", extra=("--no-figures", "--workers", "2"))
        m1, _, e1 = load_checkpoint(out1 / "checkpoint.star")
        m2, _, e2 = load_checkpoint(out2 / "checkpoint.star")
        for name, g in m1.groups.items():
            np.testing.assert_array_equal(g.weight, m2.groups[name].weight)
            np.testing.assert_array_equal(g.bias, m2.groups[name].bias)
        np.testing.assert_array_equal(e1["channel_mean"], e2["channel_mean"])
        assert (out1 / "metrics.txt").read_bytes() == (out2 / "metrics.txt").read_bytes()
        assert (out1 / "training_log.csv").read_bytes() == (out2 / "training_log.csv").read_bytes()

    def test_variant_s1_rejected_for_train(self, tmp_path, synth_csv):
        # argparse exits nonzero: S1 is not among train's variant choices
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", str(synth_csv), "--out", str(tmp_path / "x"),
                  "--variant", "S1"])
        assert exc.value.code == 2

    def test_missing_data_file_errors(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_channel_mismatch_errors(self, tmp_path, synth_csv, capsys):
        outdir = self.run_train(tmp_path, synth_csv)
        other = tmp_path / "other.csv"
        main(["synth", "--out", str(other), "--classes", "3", "--channels", "7",
              "--subjects", "2", "--recordings-per-class", "2",
              "--window-len", "12", "--recording-len", "12"])
        rc = main(["eval", "--checkpoint", str(outdir / "checkpoint.star"),
                   "--data", str(other)])
        assert rc == 1
        assert "channels" in capsys.readouterr().err


class TestHeatmapCommand:
    def test_heatmap_outputs_and_recount(self, tmp_path, synth_csv):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY_CFG)
        outdir = tmp_path / "run"
        main(["train", "--data", str(synth_csv), "--out", str(outdir),
              "--config", str(cfg_path), "--no-figures"])
        hm_dir = tmp_path / "hm"
        dump = tmp_path / "trajs.jsonl"
        rc = main(["heatmap", "--checkpoint", str(outdir / "checkpoint.star"),
                   "--data", str(synth_csv), "--out", str(hm_dir),
                   "--episodes", "2", "--dump-trajectories", str(dump)])
        assert rc == 0
        counts = np.loadtxt(hm_dir / "heatmap_counts_agent0_aggregate.csv", delimiter=",")
        assert counts.shape == (12, 10)  # window_len x n_channels
        assert (hm_dir / "heatmap_aggregate.png").exists()
        # every class present in the data got its own matrix
        for label in range(3):
            assert (hm_dir / f"heatmap_freq_agent1_class{label}.csv").exists()
        # dumped trajectories recount to the same totals
        n_lines = sum(1 for _ in open(dump))
        episodes_expected = 27 * 2  # windows x episodes
        assert n_lines == episodes_expected
        first = json.loads(next(iter(open(dump))))
        assert len(first["steps"]) == 4


class TestGradcheckCommand:
    def test_passes_threshold(self, capsys):
        rc = main(["gradcheck"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "max relative error" in out
        assert "PASS" in out


class TestAblateCommand:
    def test_summary_rows(self, tmp_path, synth_csv):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY_CFG + "epochs=1\n")
        outdir = tmp_path / "abl"
        rc = main(["ablate", "--data", str(synth_csv), "--out", str(outdir),
                   "--config", str(cfg_path), "--holdout", "subj0",
                   "--seeds", "2", "--no-figures"])
        assert rc == 0
        rows = (outdir / "ablation_runs.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 6 * 2
        summary = (outdir / "ablation_summary.txt").read_text()
        for variant in ("S1", "S2", "S3", "S4", "S5", "S6"):
            assert variant in summary

    def test_single_variant_filter_accepts_s1(self, tmp_path, synth_csv):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY_CFG + "epochs=1\n")
        outdir = tmp_path / "abl1"
        rc = main(["ablate", "--data", str(synth_csv), "--out", str(outdir),
                   "--config", str(cfg_path), "--holdout", "subj0",
                   "--seeds", "1", "--variant", "S1", "--no-figures"])
        assert rc == 0
        rows = (outdir / "ablation_runs.csv").read_text().strip().splitlines()
        assert len(rows) == 2
        assert rows[1].startswith("S1,")
