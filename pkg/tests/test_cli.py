import json

import numpy as np
import pytest
from click.testing import CliRunner

from culvertd.cli import EXIT_CONFIG, EXIT_GATE, EXIT_OK, main
from culvertd.quant import load_quantized
from culvertd.simulator import generate_scenario


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def fast_config(tmp_path):
    cfg = {
        "detector": {"delay_s": 0.0},
        "summarizer": {"kind": "template", "delay_s": 0.0},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def small_scenario(tmp_path):
    sc = generate_scenario(8, 6.0, 5.0)
    assert sc.planted
    path = tmp_path / "scenario.json"
    path.write_text(sc.to_json())
    return str(path)


class TestSimulate:
    def test_full_run_writes_report_and_telemetry(self, runner, tmp_path, fast_config, small_scenario):
        out = tmp_path / "report.json"
        result = runner.invoke(
            main,
            ["simulate", "--scenario", small_scenario, "--out", str(out), "--config", fast_config],
        )
        assert result.exit_code == EXIT_OK, result.output
        doc = json.loads(out.read_text())
        assert doc["entries"]
        assert "precision 1.000" in result.output
        telemetry = (tmp_path / "report.telemetry.ndjson").read_text().splitlines()
        assert telemetry
        json.loads(telemetry[0])

    def test_requires_scenario_or_preset(self, runner, tmp_path):
        result = runner.invoke(main, ["simulate", "--out", str(tmp_path / "r.json")])
        assert result.exit_code == EXIT_CONFIG

    def test_bad_scenario_file(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        result = runner.invoke(main, ["simulate", "--scenario", str(bad), "--out", str(tmp_path / "r.json")])
        assert result.exit_code == EXIT_CONFIG

    def test_env_var_config(self, runner, tmp_path, small_scenario, monkeypatch):
        cfg = tmp_path / "env-config.json"
        cfg.write_text(json.dumps({"detector": {"delay_s": 0.0}}))
        monkeypatch.setenv("CULVERTD_CONFIG", str(cfg))
        out = tmp_path / "report.json"
        result = runner.invoke(main, ["simulate", "--scenario", small_scenario, "--out", str(out)])
        assert result.exit_code == EXIT_OK, result.output

    def test_bad_env_config_is_config_error(self, runner, tmp_path, small_scenario, monkeypatch):
        monkeypatch.setenv("CULVERTD_CONFIG", str(tmp_path / "missing.json"))
        result = runner.invoke(
            main, ["simulate", "--scenario", small_scenario, "--out", str(tmp_path / "r.json")]
        )
        assert result.exit_code == EXIT_CONFIG


class TestQuantCommands:
    def test_quantize_dequantize_round_trip(self, runner, tmp_path):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(4, 16))
        src = tmp_path / "w.npy"
        np.save(src, w)
        art = tmp_path / "w.cqtz"
        result = runner.invoke(main, ["quantize", "--in", str(src), "--out", str(art)])
        assert result.exit_code == EXIT_OK, result.output
        q = load_quantized(art)
        assert q.spec.scheme == "symmetric_per_channel"
        back = tmp_path / "back.npy"
        result = runner.invoke(main, ["dequantize", "--in", str(art), "--out", str(back)])
        assert result.exit_code == EXIT_OK
        recon = np.load(back)
        scales = np.asarray(q.spec.scale)
        assert (np.abs(recon - w) <= scales[:, None] / 2 + 1e-12).all()

    def test_nf4_scheme(self, runner, tmp_path):
        src = tmp_path / "v.npy"
        np.save(src, np.random.default_rng(1).normal(size=100))
        art = tmp_path / "v.cqtz"
        result = runner.invoke(
            main, ["quantize", "--in", str(src), "--out", str(art), "--scheme", "nf4", "--block-size", "32"]
        )
        assert result.exit_code == EXIT_OK
        assert load_quantized(art).spec.scheme == "nf4_block"

    def test_affine_requires_scale(self, runner, tmp_path):
        src = tmp_path / "v.npy"
        np.save(src, np.zeros(4))
        result = runner.invoke(
            main, ["quantize", "--in", str(src), "--out", str(tmp_path / "x"), "--scheme", "affine"]
        )
        assert result.exit_code == EXIT_CONFIG

    def test_merge_adapter(self, runner, tmp_path):
        rng = np.random.default_rng(2)
        w0 = rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 2))
        a = rng.normal(size=(2, 8))
        for name, arr in (("w0", w0), ("b", b), ("a", a)):
            np.save(tmp_path / f"{name}.npy", arr)
        out = tmp_path / "merged.npy"
        result = runner.invoke(
            main,
            [
                "merge-adapter",
                "--base", str(tmp_path / "w0.npy"),
                "--lora-b", str(tmp_path / "b.npy"),
                "--lora-a", str(tmp_path / "a.npy"),
                "--alpha", "4.0",
                "--out", str(out),
            ],
        )
        assert result.exit_code == EXIT_OK, result.output
        assert np.allclose(np.load(out), w0 + 2.0 * (b @ a))


class TestSelectConfig:
    def _write(self, tmp_path, candidates):
        cand = tmp_path / "candidates.json"
        cand.write_text(json.dumps(candidates))
        budget = tmp_path / "budget.json"
        budget.write_text(
            json.dumps({"t_max_s": 5.0, "m_max_gb": 8.0, "p_max": 100e6, "latency_target_s": 3.0, "thermal_limit_c": 75.0})
        )
        return str(cand), str(budget)

    def test_selects_feasible_candidate(self, runner, tmp_path):
        cand, budget = self._write(
            tmp_path,
            [
                {"name": "full-precision", "param_count": 67e6, "latency_s": 8.7, "memory_gb": 12.4},
                {"name": "int8", "param_count": 67e6, "latency_s": 2.3, "memory_gb": 4.2},
            ],
        )
        result = runner.invoke(
            main, ["select-config", "--candidates", cand, "--budget-file", budget, "--lambda-latency", "0.1"]
        )
        assert result.exit_code == EXIT_OK
        assert json.loads(result.output)["name"] == "int8"

    def test_no_feasible_exits_3(self, runner, tmp_path):
        cand, budget = self._write(
            tmp_path,
            [{"name": "full-precision", "param_count": 67e6, "latency_s": 8.7, "memory_gb": 12.4}],
        )
        result = runner.invoke(main, ["select-config", "--candidates", cand, "--budget-file", budget])
        assert result.exit_code == EXIT_GATE


class TestEvaluate:
    def test_line_files(self, runner, tmp_path):
        (tmp_path / "hyp.txt").write_text("a crack in the wall\nroot intrusion found\n")
        (tmp_path / "ref.txt").write_text("a crack in the wall\nroots have intruded\n")
        result = runner.invoke(
            main, ["evaluate", "--hyp", str(tmp_path / "hyp.txt"), "--ref", str(tmp_path / "ref.txt")]
        )
        assert result.exit_code == EXIT_OK, result.output
        doc = json.loads(result.output)
        assert 0.0 < doc["rougeL"]["f1"] <= 1.0

    def test_line_count_mismatch(self, runner, tmp_path):
        (tmp_path / "hyp.txt").write_text("one\n")
        (tmp_path / "ref.txt").write_text("one\ntwo\n")
        result = runner.invoke(
            main, ["evaluate", "--hyp", str(tmp_path / "hyp.txt"), "--ref", str(tmp_path / "ref.txt")]
        )
        assert result.exit_code == EXIT_CONFIG

    def test_corpus_json(self, runner, tmp_path):
        corpus = [
            {"hyp": "a crack", "refs": ["a crack", "cracking seen"]},
            {"hyp": "a hole", "refs": ["a hole"]},
        ]
        path = tmp_path / "corpus.json"
        path.write_text(json.dumps(corpus))
        result = runner.invoke(main, ["evaluate", "--corpus-json", str(path)])
        assert result.exit_code == EXIT_OK
        json.loads(result.output)

    def test_requires_input(self, runner):
        result = runner.invoke(main, ["evaluate"])
        assert result.exit_code == EXIT_CONFIG


class TestReportCommand:
    def test_renders_text(self, runner, tmp_path, fast_config, small_scenario):
        out = tmp_path / "report.json"
        assert (
            runner.invoke(
                main,
                ["simulate", "--scenario", small_scenario, "--out", str(out), "--config", fast_config],
            ).exit_code
            == EXIT_OK
        )
        result = runner.invoke(main, ["report", "--in", str(out)])
        assert result.exit_code == EXIT_OK
        assert "Inspection report" in result.output
        assert "Condition:" in result.output

    def test_bad_report_file(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        result = runner.invoke(main, ["report", "--in", str(bad)])
        assert result.exit_code == EXIT_CONFIG


class TestServe:
    def test_bad_report_file_is_config_error(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("nonsense")
        result = runner.invoke(main, ["serve", "--report", str(bad)])
        assert result.exit_code == EXIT_CONFIG
