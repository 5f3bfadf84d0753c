import hashlib
import json
from pathlib import Path

from click.testing import CliRunner

from labprompt.cli import main
from labprompt.corpus import load_records


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


class TestGenData:
    def test_deterministic_outputs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            result = run("gen-data", "--seed", 3, "--n-patients", 10, "--out", out)
            assert result.exit_code == 0, result.output
        assert digest(a / "train.jsonl") == digest(b / "train.jsonl")
        assert digest(a / "test.jsonl") == digest(b / "test.jsonl")

    def test_seed_changes_outputs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("gen-data", "--seed", 3, "--n-patients", 10, "--out", a).exit_code == 0
        assert run("gen-data", "--seed", 4, "--n-patients", 10, "--out", b).exit_code == 0
        assert digest(a / "train.jsonl") != digest(b / "train.jsonl")

    def test_manifest_written(self, tmp_path):
        out = tmp_path / "d"
        assert run("gen-data", "--seed", 1, "--n-patients", 5, "--out", out).exit_code == 0
        manifest = json.loads((out / "gen-data.manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["seed"] == 1
        assert "outputs" in manifest

    def test_split_sizes(self, tmp_path):
        out = tmp_path / "d"
        assert run("gen-data", "--seed", 1, "--n-patients", 10, "--out", out).exit_code == 0
        assert len(load_records(out / "train.jsonl")) == 8
        assert len(load_records(out / "test.jsonl")) == 2


class TestCaption:
    def test_caption_then_reuse_ranges(self, tmp_path):
        out = tmp_path / "d"
        assert run("gen-data", "--seed", 2, "--n-patients", 8, "--out", out).exit_code == 0
        ranges = tmp_path / "ranges.tsv"
        caps = tmp_path / "caps.jsonl"
        result = run("caption", "--in", out / "train.jsonl", "--ranges", ranges, "--out", caps)
        assert result.exit_code == 0, result.output
        assert ranges.exists()
        rows = [json.loads(line) for line in caps.read_text().splitlines() if line.strip()]
        assert len(rows) == len(load_records(out / "train.jsonl"))
        assert all("caption" in row and "patient_id" in row for row in rows)
        # second run must load the saved ranges and reproduce the captions
        caps2 = tmp_path / "caps2.jsonl"
        assert run("caption", "--in", out / "train.jsonl", "--ranges", ranges,
                   "--out", caps2).exit_code == 0
        assert digest(caps) == digest(caps2)


class TestEval:
    def test_perfect_predictions_score_one(self, tmp_path):
        out = tmp_path / "d"
        assert run("gen-data", "--seed", 5, "--n-patients", 10, "--out", out).exit_code == 0
        records = load_records(out / "train.jsonl")
        pred_path = tmp_path / "pred.jsonl"
        with open(pred_path, "w") as fh:
            for r in records:
                fh.write(json.dumps({"patient_id": r.patient_id,
                                     "labels": sorted(r.labels.labels)}) + "\n")
        report_path = tmp_path / "report.json"
        result = run("eval", "--pred", pred_path, "--gold", out / "train.jsonl",
                     "--out", report_path)
        assert result.exit_code == 0, result.output
        report = json.loads(report_path.read_text())
        assert report["micro"]["f1"] == 1.0
        assert report["macro"]["f1"] == 1.0

    def test_missing_patients_count_as_empty(self, tmp_path):
        out = tmp_path / "d"
        assert run("gen-data", "--seed", 5, "--n-patients", 10, "--out", out).exit_code == 0
        pred_path = tmp_path / "pred.jsonl"
        pred_path.write_text("")
        report_path = tmp_path / "report.json"
        assert run("eval", "--pred", pred_path, "--gold", out / "train.jsonl",
                   "--out", report_path).exit_code == 0
        report = json.loads(report_path.read_text())
        assert report["micro"]["recall"] == 0.0


class TestExitCodes:
    def test_usage_error_is_two(self):
        assert run("gen-data").exit_code == 2  # missing required --out

    def test_unknown_command_is_two(self):
        assert run("no-such-command").exit_code == 2

    def test_pipeline_failure_is_one(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        result = run("caption", "--in", bad, "--out", tmp_path / "caps.jsonl")
        assert result.exit_code == 1
        assert result.output.strip()  # carries a diagnostic message

    def test_bad_config_key_is_one(self, tmp_path):
        cfg = tmp_path / "cohort.cfg"
        cfg.write_text("definitely_not_a_key = 5\n")
        result = run("gen-data", "--config", cfg, "--out", tmp_path / "d")
        assert result.exit_code == 1
