"""CLI tests: subcommands, artifacts, exit-code contract."""

import numpy as np

from starbrinet import cli
from starbrinet import data as D
from starbrinet import gradcheck as G


def gen_tiny(tmp_path, seed=0, count=24):
    out = tmp_path / "data"
    code = cli.main(["gen-data", "--out", str(out), "--profile", "desk",
                     "--seed", str(seed), "--count", str(count),
                     "--length", "4", "--context", "2"])
    assert code == 0
    return out


TINY_TRAIN = ["--layers", "1", "--hidden", "8", "--channels-per-group", "4",
              "--context", "2", "--horizon", "2", "--eval-interval", "0"]


def train_tiny(tmp_path, data_dir, name="model.sbck", iterations=6, extra=()):
    ckpt = tmp_path / name
    code = cli.main(["train", "--data", str(data_dir), "--out", str(ckpt),
                     "--iterations", str(iterations), "--batch-size", "2",
                     *TINY_TRAIN, *extra])
    assert code == 0
    return ckpt


class TestGenData:
    def test_count_zero_empty_manifest(self, tmp_path):
        out = tmp_path / "empty"
        code = cli.main(["gen-data", "--out", str(out), "--count", "0"])
        assert code == 0
        manifest = D.read_manifest(out / "manifest.tsv")
        assert manifest.entries == []

    def test_same_flags_identical_manifests(self, tmp_path):
        a = gen_tiny(tmp_path / "a", seed=5)
        b = gen_tiny(tmp_path / "b", seed=5)
        assert (a / "manifest.tsv").read_text() == (b / "manifest.tsv").read_text()
        assert (a / "train_00000.rseq").read_bytes() == \
               (b / "train_00000.rseq").read_bytes()

    def test_files_parse_and_embed_config(self, tmp_path):
        out = gen_tiny(tmp_path)
        manifest = D.read_manifest(out / "manifest.tsv")
        assert manifest.entries
        assert manifest.header["profile"] == "desk"
        for e in manifest.entries[:3]:
            seq = D.rseq_read(out / e.path)
            assert seq.frames.shape == (4, 32, 32)

    def test_prints_class_proportions(self, tmp_path, capsys):
        gen_tiny(tmp_path)
        out = capsys.readouterr().out
        assert "light" in out and "moderate" in out and "heavy" in out


class TestTrain:
    def test_smoke_produces_checkpoint_and_log(self, tmp_path):
        data = gen_tiny(tmp_path)
        ckpt = train_tiny(tmp_path, data)
        assert ckpt.exists()
        log = tmp_path / "model.sbck.metrics.csv"
        assert log.exists()
        text = log.read_text()
        assert text.startswith("# [network]")
        from starbrinet import training as T
        params, optim, cfg, tcfg, run = T.checkpoint_load(ckpt)
        assert optim.step == 6
        assert cfg.input_hw == (32, 32)

    def test_ablation_flags(self, tmp_path):
        data = gen_tiny(tmp_path)
        ckpt = train_tiny(tmp_path, data, "ablate.sbck", 2,
                          extra=["--single-column", "--loss", "mse", "--no-bridge"])
        from starbrinet import training as T
        params, optim, cfg, tcfg, run = T.checkpoint_load(ckpt)
        assert cfg.columns == 1
        assert not cfg.use_bridge
        assert tcfg.loss_mode == "mse"
        assert len(params.encoders) == 1

    def test_invalid_schedule_is_usage_error(self, tmp_path, capsys):
        data = gen_tiny(tmp_path)
        code = cli.main(["train", "--data", str(data), "--out", "x.sbck",
                         "--scale-schedule", "oops"])
        assert code == 1
        assert "schedule" in capsys.readouterr().err

    def test_missing_data_dir_is_io_error(self, tmp_path):
        code = cli.main(["train", "--data", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "x.sbck"), *TINY_TRAIN])
        assert code == 2

    def test_config_file_overlay(self, tmp_path):
        data = gen_tiny(tmp_path)
        cfg_file = tmp_path / "run.ini"
        cfg_file.write_text("[training]\niterations = 3\nseed = 9\n")
        ckpt = tmp_path / "cfg.sbck"
        code = cli.main(["train", "--data", str(data), "--out", str(ckpt),
                         "--batch-size", "2", "--config", str(cfg_file),
                         *TINY_TRAIN])
        assert code == 0
        from starbrinet import training as T
        _, optim, _, tcfg, _ = T.checkpoint_load(ckpt)
        assert tcfg.iterations == 3
        assert tcfg.seed == 9

    def test_resume_continues(self, tmp_path):
        data = gen_tiny(tmp_path)
        ckpt = train_tiny(tmp_path, data, "first.sbck", 3)
        second = tmp_path / "second.sbck"
        code = cli.main(["train", "--data", str(data), "--out", str(second),
                         "--resume", str(ckpt), "--iterations", "5",
                         "--batch-size", "2", *TINY_TRAIN])
        assert code == 0
        from starbrinet import training as T
        _, optim, _, _, _ = T.checkpoint_load(second)
        assert optim.step == 5


class TestPredictEval:
    def test_predict_round_trip(self, tmp_path, capsys):
        data = gen_tiny(tmp_path)
        ckpt = train_tiny(tmp_path, data, iterations=2)
        out_rseq = tmp_path / "pred.rseq"
        code = cli.main(["predict", "--ckpt", str(ckpt),
                         "--input", str(data / "train_00000.rseq"),
                         "--out", str(out_rseq)])
        assert code == 0
        assert "first 2 of 4 frames" in capsys.readouterr().out
        pred = D.rseq_read(out_rseq)
        assert pred.frames.shape == (2, 32, 32)
        assert np.all(pred.frames > 0) and np.all(pred.frames < 1)

    def test_preview_pgm_export(self, tmp_path):
        data = gen_tiny(tmp_path)
        ckpt = train_tiny(tmp_path, data, iterations=2)
        preview = tmp_path / "previews"
        code = cli.main(["predict", "--ckpt", str(ckpt),
                         "--input", str(data / "test_00000.rseq"),
                         "--out", str(tmp_path / "p.rseq"),
                         "--preview-dir", str(preview)])
        assert code == 0
        pgms = sorted(preview.glob("*.pgm"))
        assert len(pgms) == 4  # 2 context + 2 predicted
        blob = pgms[0].read_bytes()
        assert blob.startswith(b"P5\n")
        assert b"32 32\n255\n" in blob
        header_end = blob.index(b"255\n") + 4
        assert len(blob) - header_end == 32 * 32

    def test_predict_too_short_input(self, tmp_path):
        data = gen_tiny(tmp_path)
        ckpt = train_tiny(tmp_path, data, iterations=2,
                          extra=["--context", "2", "--horizon", "2"])
        short = tmp_path / "short.rseq"
        D.rseq_write(D.RadarSequence(np.zeros((1, 32, 32), np.float32)), short)
        code = cli.main(["predict", "--ckpt", str(ckpt), "--input", str(short),
                         "--out", str(tmp_path / "o.rseq")])
        assert code == 1

    def test_eval_writes_report_with_baseline(self, tmp_path):
        data = gen_tiny(tmp_path)
        ckpt = train_tiny(tmp_path, data, iterations=2)
        report = tmp_path / "report.csv"
        code = cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data),
                         "--report", str(report)])
        assert code == 0
        text = report.read_text()
        assert "persistence_mse" in text
        assert "undefined_frames" in text
        assert text.startswith("# [network]")

    def test_eval_missing_ckpt_io_error(self, tmp_path):
        data = gen_tiny(tmp_path)
        code = cli.main(["eval", "--ckpt", str(tmp_path / "none.sbck"),
                         "--data", str(data), "--report", str(tmp_path / "r.csv")])
        assert code == 2

    def test_corrupt_rseq_io_error(self, tmp_path):
        data = gen_tiny(tmp_path)
        ckpt = train_tiny(tmp_path, data, iterations=2)
        bad = tmp_path / "bad.rseq"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code = cli.main(["predict", "--ckpt", str(ckpt), "--input", str(bad),
                         "--out", str(tmp_path / "o.rseq")])
        assert code == 2


class TestGradcheckCmd:
    def test_passes_and_prints(self, capsys):
        code = cli.main(["gradcheck", "--level", "op", "--instances", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "PASS conv2d" in out

    def test_failure_exit_code(self, monkeypatch, capsys):
        bad = G.CheckReport("forced", [G.SlotReport("x", 1.0, 1e-4)])
        monkeypatch.setattr(G, "run_suite", lambda *a, **k: [bad])
        code = cli.main(["gradcheck", "--level", "op"])
        assert code == 3
        assert "FAIL" in capsys.readouterr().out


class TestSweepScale:
    def test_emits_finite_rows(self, tmp_path):
        data = gen_tiny(tmp_path)
        report = tmp_path / "sweep.csv"
        code = cli.main(["sweep-scale", "--data", str(data), "--values", "1,15",
                         "--iterations", "3", "--batch-size", "2",
                         "--layers", "1", "--hidden", "8", "--channels-per-group", "4",
                         "--context", "2", "--horizon", "2",
                         "--out", str(report)])
        assert code == 0
        lines = [l for l in report.read_text().splitlines()
                 if l and not l.startswith("#")]
        assert len(lines) == 3  # header + two scale rows
        for line in lines[1:]:
            fields = dict(zip(lines[0].split(","), line.split(",")))
            assert np.isfinite(float(fields["loss"]))
            assert np.isfinite(float(fields["mse"]))

    def test_bad_values_usage_error(self, tmp_path):
        code = cli.main(["sweep-scale", "--data", str(tmp_path), "--values", "a,b",
                         "--out", str(tmp_path / "r.csv")])
        assert code == 1


class TestExitContract:
    def test_unknown_command(self):
        assert cli.main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert cli.main(["train"]) == 1

    def test_help_exits_zero(self):
        assert cli.main(["--help"]) == 0


class TestThreads:
    def test_threads_flag_sets_env(self, monkeypatch):
        import os
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        code = cli.main(["--threads", "1", "gradcheck", "--level", "op",
                         "--instances", "1"])
        assert code == 0
        assert os.environ["OMP_NUM_THREADS"] == "1"

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("STARBRI_THREADS", "2")
        monkeypatch.delenv("OPENBLAS_NUM_THREADS", raising=False)
        import os
        code = cli.main(["gradcheck", "--level", "op", "--instances", "1"])
        assert code == 0
        assert os.environ["OPENBLAS_NUM_THREADS"] == "2"
