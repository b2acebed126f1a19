"""CLI tests: end-to-end tiny run, config drift protection, exit codes."""

import json

import pytest

from specdec import cli


TINY_CONFIG = {
    "model": {"vocab_size": 280, "hidden_size": 16, "intermediate_size": 24,
              "n_layers": 1, "n_heads": 2, "max_seq_len": 128},
    "training": {"learning_rate": 2e-3, "steps": 12, "draft_steps": 10,
                 "batch_size": 4, "seq_len": 32, "corpus_docs": 150},
    "drafting": {"depth": 2, "expand_k": 2, "select_m": 2, "budget": 4},
    "bench": {"tasks": ["continuation"], "temperatures": [0.0],
              "prompts_per_task": 3, "max_new": 8, "warmup_prompts": 1},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    out = str(root / "artifacts")
    rc = cli.main(["train-target", "--config", str(cfg_path), "--out", out, "--seed", "0"])
    assert rc == 0
    for variant in ("fspad", "no_fs", "no_pad", "neither"):
        rc = cli.main(["train-draft", "--config", str(cfg_path), "--out", out,
                       "--variant", variant, "--seed", "0"])
        assert rc == 0
    return str(cfg_path), out


class TestEndToEnd:
    def test_artifacts_exist(self, tiny_run):
        import os
        _, out = tiny_run
        for name in ("tokenizer.json", "target.fspd", "draft_fspad.fspd",
                     "pretrain_log.jsonl", "draft_fspad_log.jsonl"):
            assert os.path.exists(os.path.join(out, name)), name

    def test_generate(self, tiny_run, capsys):
        cfg, out = tiny_run
        rc = cli.main(["generate", "--config", cfg, "--out", out,
                       "--prompt", "the fox watches", "--max-new", "6"])
        assert rc == 0
        assert capsys.readouterr().out.strip() != ""

    def test_bench_writes_reports(self, tiny_run):
        import os
        cfg, out = tiny_run
        report = os.path.join(out, "bench.json")
        rc = cli.main(["bench", "--config", cfg, "--out", out, "--seed", "0",
                       "--report", report])
        assert rc == 0
        rows = json.loads(open(report).read())
        assert len(rows) == 1
        assert rows[0]["tau"] >= 1.0
        assert os.path.exists(os.path.join(out, "bench.csv"))
        assert os.path.exists(os.path.join(out, "bench_plot.csv"))

    def test_ablate(self, tiny_run):
        import os
        cfg, out = tiny_run
        rc = cli.main(["ablate", "--config", cfg, "--out", out, "--seed", "0"])
        assert rc == 0
        rows = json.loads(open(os.path.join(out, "ablation_report.json")).read())
        assert sorted({r["variant"] for r in rows}) == ["fspad", "neither", "no_fs", "no_pad"]
        summary = json.loads(open(os.path.join(out, "ablation_report_summary.json")).read())
        assert "ordering_regressions" in summary

    def test_selftest(self):
        assert cli.main(["selftest"]) == 0


class TestExitCodes:
    def test_unknown_config_key_is_config_error(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"model": {"bogus_knob": 1}}))
        assert cli.main(["train-target", "--config", str(cfg),
                         "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_unknown_section_is_config_error(self, tmp_path):
        cfg = tmp_path / "bad2.json"
        cfg.write_text(json.dumps({"modle": {}}))
        assert cli.main(["train-target", "--config", str(cfg),
                         "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_malformed_json_is_config_error(self, tmp_path):
        cfg = tmp_path / "bad3.json"
        cfg.write_text("{not json")
        assert cli.main(["train-target", "--config", str(cfg),
                         "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        assert cli.main(["bench", "--out", str(tmp_path / "empty")]) == cli.EXIT_IO

    def test_missing_draft_variant_is_io_error(self, tiny_run, tmp_path):
        import os
        import shutil
        cfg, out = tiny_run
        clone = tmp_path / "partial"
        shutil.copytree(out, clone)
        os.remove(clone / "draft_no_pad.fspd")
        assert cli.main(["ablate", "--config", cfg, "--out", str(clone)]) == cli.EXIT_IO

    def test_corrupt_checkpoint_is_io_error(self, tiny_run, tmp_path):
        import shutil
        cfg, out = tiny_run
        clone = tmp_path / "corrupt"
        shutil.copytree(out, clone)
        raw = (clone / "target.fspd").read_bytes()
        (clone / "target.fspd").write_bytes(raw[:40])
        assert cli.main(["generate", "--out", str(clone), "--prompt", "x"]) == cli.EXIT_IO


class TestFlagOverrides:
    def test_drafting_flags_override_config(self, tiny_run):
        cfg, out = tiny_run
        rc = cli.main(["generate", "--config", cfg, "--out", out, "--prompt",
                       "list of colors", "--max-new", "4",
                       "--budget", "2", "--topk", "1", "--depth", "1"])
        assert rc == 0
