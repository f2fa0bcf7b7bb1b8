import json

import numpy as np
import pytest

from sparseft.cli import main


def tiny_cfg_file(tmp_path, **kw):
    base = dict(
        d_model=32, n_heads=2, d_ff=64, seq_len=32, n_layers=2, vocab=16,
        steps=2, batch_size=2, n_sequences=4, n_trace_sequences=3,
        pred_epochs=20, pred_rank=4,
    )
    base.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(base))
    return path


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestGenCorpus:
    def test_success_json_on_stdout(self, tmp_path, capsys):
        cfg = tiny_cfg_file(tmp_path)
        code, out, err = run_cli(capsys, "gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert code == 0
        result = json.loads(out)
        assert result["n_sequences"] == 4 and result["seq_len"] == 32
        corpus = np.load(result["path"])
        assert corpus.shape == (4, 32)

    def test_seed_override(self, tmp_path, capsys):
        cfg = tiny_cfg_file(tmp_path)
        paths = []
        for i, seed in enumerate(("1", "1", "2")):
            out_dir = tmp_path / f"o{i}"
            code, out, _ = run_cli(capsys, "gen-corpus", "--config", str(cfg), "--seed", seed, "--out", str(out_dir))
            assert code == 0
            paths.append(json.loads(out)["path"])
        a, b, c = (np.load(p) for p in paths)
        np.testing.assert_array_equal(a, b)
        assert np.any(a != c)


class TestErrors:
    def test_bad_config_key_fails_with_json_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"no_such_key": 1}))
        code, out, err = run_cli(capsys, "gen-corpus", "--config", str(bad), "--out", str(tmp_path / "o"))
        assert code == 1
        payload = json.loads(err)
        assert payload["error"] == "ConfigError"
        assert "no_such_key" in payload["message"]

    def test_train_predictors_without_traces_fails(self, tmp_path, capsys):
        cfg = tiny_cfg_file(tmp_path)
        code, out, err = run_cli(capsys, "train-predictors", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert code == 1
        assert json.loads(err)["error"] == "FileNotFoundError"

    def test_finetune_predicted_without_predictors_fails(self, tmp_path, capsys):
        cfg = tiny_cfg_file(tmp_path, mode="predicted")
        code, out, err = run_cli(capsys, "finetune", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert code == 1
        assert json.loads(err)["error"] == "FileNotFoundError"


class TestPipeline:
    def test_full_pipeline(self, tmp_path, capsys):
        cfg = tiny_cfg_file(tmp_path)
        out_dir = str(tmp_path / "run")
        code, _, _ = run_cli(capsys, "collect-traces", "--config", str(cfg), "--out", out_dir)
        assert code == 0
        code, out, _ = run_cli(capsys, "train-predictors", "--config", str(cfg), "--out", out_dir)
        assert code == 0
        metrics = json.loads(out)
        assert "attn_pattern_agreement" in metrics and "mlp_recall" in metrics
        code, out, _ = run_cli(capsys, "finetune", "--config", str(cfg), "--out", out_dir, "--mode", "predicted")
        assert code == 0
        report = json.loads(out)
        assert report["mode"] == "predicted" and report["steps"] == 2
        code, out, _ = run_cli(capsys, "report", "--config", str(cfg), "--out", out_dir)
        assert code == 0
        assert json.loads(out)["breakdown"] is True
        for name in ("traces.tnsc", "predictors.tnsc", "loss_curve.csv", "timing.json",
                     "checkpoint.tnsc", "sparsity.csv", "bench.csv", "breakdown.csv"):
            assert (tmp_path / "run" / name).exists(), name

    def test_bench_subcommand(self, tmp_path, capsys):
        cfg = tiny_cfg_file(tmp_path)
        code, out, _ = run_cli(
            capsys, "bench", "--config", str(cfg), "--out", str(tmp_path / "o"),
            "--op", "neuron_mlp", "--sizes", "64", "--sparsity", "0.0", "0.5",
        )
        assert code == 0
        result = json.loads(out)
        assert result["rows"] == 2
        lines = (tmp_path / "o" / "bench_neuron_mlp.csv").read_text().strip().split("\n")
        assert lines[0].startswith("op,size,sparsity")

    def test_mode_and_theta_overrides(self, tmp_path, capsys):
        cfg = tiny_cfg_file(tmp_path)
        code, out, _ = run_cli(
            capsys, "finetune", "--config", str(cfg), "--out", str(tmp_path / "o"),
            "--mode", "exposer-oracle", "--theta", "0.2", "--peft", "bitfit",
        )
        assert code == 0
        report = json.loads(out)
        assert report["mode"] == "exposer-oracle" and report["peft"] == "bitfit"
