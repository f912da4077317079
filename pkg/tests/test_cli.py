"""
Tests for the command-line harness: exit codes, error lines, run manifests
and a small end-to-end run through every stage.
"""
import json
import os

import pytest

from clinical_lm.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, run
from clinical_lm.utils import read_jsonl, sha256_file

SIZES = ["--phi-documents", "4", "--pretrain-documents", "20", "--ner", "6", "--re", "6",
         "--sts", "6", "--nli", "6", "--qa", "4"]
SMALL_MODEL = ["--set", "max_seq_len=48", "--set", "val_fraction=0.5"]


def _manifest(out, command):
    with open(os.path.join(out, f"{command}.manifest.json"), encoding="utf-8") as f:
        return json.load(f)


@pytest.mark.unit
class TestExitCodes:
    def test_usage_errors(self):
        assert run([]) == EXIT_USAGE
        assert run(["preprocess", "--bogus"]) == EXIT_USAGE
        assert run(["finetune", "parsing", "--train", "x", "--vocab", "y"]) == EXIT_USAGE

    def test_missing_input_reports_error_key(self, tmp_path, capsys):
        code = run(["preprocess", "--input", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)])
        assert code == EXIT_FAILURE
        err = capsys.readouterr().err.strip().splitlines()
        assert err[-1].startswith("error=not_found ")

    def test_invalid_config_value(self, tmp_path, capsys):
        code = run(["--set", "mask_rate=lots", "gen-fixtures", "--out", str(tmp_path)])
        assert code == EXIT_FAILURE
        assert "error=config " in capsys.readouterr().err

    def test_unknown_config_file_key(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("colour = blue\n", encoding="utf-8")
        assert run(["--config", str(cfg), "gen-fixtures", "--out", str(tmp_path)]) == EXIT_FAILURE
        assert "unknown config key" in capsys.readouterr().err


@pytest.mark.integration
class TestPipeline:
    def test_gen_fixtures_manifest(self, tmp_path):
        out = str(tmp_path / "fixtures")
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 4\nbatch_size = 8\n", encoding="utf-8")
        assert run(["--config", str(cfg), "gen-fixtures", "--seed", "9", "--out", out] + SIZES) == EXIT_OK
        manifest = _manifest(out, "gen-fixtures")
        assert manifest["seed"] == 9
        assert manifest["config"]["batch_size"] == 8
        assert manifest["inputs"] == {str(cfg): sha256_file(str(cfg))}
        assert sorted(manifest["outputs"]) == sorted(
            ["phi_corpus", "phi_spans", "pretrain_corpus", "ner", "re", "sts", "nli", "qa"]
        )

    def test_end_to_end(self, tmp_path, capsys):
        fixtures, work = str(tmp_path / "fixtures"), str(tmp_path / "work")
        assert run(["gen-fixtures", "--out", fixtures] + SIZES) == EXIT_OK
        raw = os.path.join(fixtures, "pretrain_corpus.jsonl")
        assert run(["preprocess", "--input", raw, "--workers", "1", "--out", work]) == EXIT_OK
        corpus = os.path.join(work, "corpus.jsonl")
        assert os.path.isfile(os.path.join(work, "deid_report.json"))
        assert _manifest(work, "preprocess")["inputs"] == {raw: sha256_file(raw)}

        assert run(["train-tokenizer", "--corpus", corpus, "--vocab-size", "300", "--out", work]) == EXIT_OK
        vocab = os.path.join(work, "vocab.txt")

        code = run(["pretrain", "--corpus", corpus, "--vocab", vocab, "--preset", "gradcheck",
                    "--max-steps", "2", "--batch-size", "2", "--eval-every", "1", "--out", work]
                   + SMALL_MODEL)
        assert code == EXIT_OK
        checkpoint = os.path.join(work, "checkpoint.bin")
        with open(os.path.join(work, "pretrain_summary.json"), encoding="utf-8") as f:
            assert json.load(f)["steps"] == 2

        nli = os.path.join(fixtures, "nli.jsonl")
        code = run(["finetune", "nli", "--train", nli, "--vocab", vocab, "--checkpoint", checkpoint,
                    "--finetune-steps", "2", "--out", work])
        assert code == EXIT_OK
        model = os.path.join(work, "nli.ckpt")
        assert run(["evaluate", "nli", "--data", nli, "--vocab", vocab, "--model", model, "--out", work]) == EXIT_OK
        with open(os.path.join(work, "nli_metrics.json"), encoding="utf-8") as f:
            report = json.load(f)
        assert report["task"] == "nli"
        assert 0.0 <= report["metrics"]["accuracy"] <= 1.0
        rows = list(read_jsonl(os.path.join(work, "nli_predictions.jsonl")))
        assert len(rows) == 6
        assert all(abs(sum(r["scores"].values()) - 1.0) < 1e-4 for r in rows)

        capsys.readouterr()
        assert run(["inspect-checkpoint", checkpoint, "--out", work]) == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert info["preset"] == "gradcheck"
        assert info["model"]["max_seq_len"] == 48
        assert info["encoder_params"] > 0
