"""Command-line surface: extraction, train/eval round trip, fixture replay
through the stream pipeline, metrics summaries and verification, with
data-only stdout and correct exit codes."""

import json

import pytest
from click.testing import CliRunner

from tstem.cli import main

from .conftest import make_separable_corpus


@pytest.fixture
def runner():
    return CliRunner()


def _write_corpus(tmp_path, corpus, name="corpus.ndjson"):
    path = tmp_path / name
    path.write_text("\n".join(json.dumps({"text": t, "relevant": r})
                              for t, r in corpus) + "\n")
    return str(path)


class TestExtract:
    def test_defanged_url_from_stdin(self, runner):
        result = runner.invoke(main, ["extract"],
                               input="callback at hxxp://193[.]38[.]55[.]43/ today")
        assert result.exit_code == 0
        records = [json.loads(line) for line in result.output.splitlines()]
        assert {(r["kind"], r["value"]) for r in records} == \
            {("url", "http://193.38.55.43/")}

    def test_hashes_and_domain(self, runner):
        text = ("d282e137db2d55ae8fd3a299136f277e "
                "a95dad9c3d1b4b2b4ad6fd05961a1a3957500b2d "
                "expiredaccessreviewnow[.]com")
        result = runner.invoke(main, ["extract"], input=text)
        records = [json.loads(line) for line in result.output.splitlines()]
        assert {(r["kind"], r["value"]) for r in records} == {
            ("md5", "d282e137db2d55ae8fd3a299136f277e"),
            ("sha1", "a95dad9c3d1b4b2b4ad6fd05961a1a3957500b2d"),
            ("domain", "expiredaccessreviewnow.com"),
        }

    def test_ndjson_input(self, runner, tmp_path):
        path = tmp_path / "docs.ndjson"
        path.write_text(json.dumps({"text": "ip 198.51.100.7 seen"}) + "\n")
        result = runner.invoke(main, ["extract", "--in", str(path),
                                      "--format", "ndjson"])
        assert result.exit_code == 0
        assert json.loads(result.output)["value"] == "198.51.100.7"

    def test_stdout_is_data_only(self, runner):
        result = runner.invoke(main, ["extract"], input="1.2.3.4")
        for line in result.output.splitlines():
            json.loads(line)  # every stdout line parses as JSON

    def test_missing_input_file(self, runner):
        result = runner.invoke(main, ["extract", "--in", "/nope/missing.txt"])
        assert result.exit_code == 1


class TestTrainEval:
    def test_round_trip_perfect_accuracy(self, runner, tmp_path):
        corpus_path = _write_corpus(tmp_path, make_separable_corpus(120, seed=1))
        model_path = str(tmp_path / "model.bin")
        train_result = runner.invoke(main, [
            "train", "--corpus", corpus_path, "--out", model_path, "--seed", "2"])
        assert train_result.exit_code == 0, train_result.output
        report = json.loads(train_result.output)
        assert report["report"]["accuracy"] == 1.0

        eval_result = runner.invoke(main, [
            "eval", "--model", model_path, "--corpus", corpus_path])
        assert eval_result.exit_code == 0, eval_result.output
        assert json.loads(eval_result.output)["accuracy"] == 1.0

    def test_corpus_field_errors_name_the_line(self, runner, tmp_path):
        path = tmp_path / "bad.ndjson"
        path.write_text(json.dumps({"text": "ok", "relevant": True}) + "\n"
                        + json.dumps({"text": "no label"}) + "\n")
        result = runner.invoke(main, ["train", "--corpus", str(path),
                                      "--out", str(tmp_path / "m.bin")])
        assert result.exit_code == 1
        assert ":2:" in result.output

    def test_json_error_mode(self, runner, tmp_path):
        result = runner.invoke(main, ["--json", "train",
                                      "--corpus", str(tmp_path / "missing.ndjson"),
                                      "--out", str(tmp_path / "m.bin")])
        assert result.exit_code == 1
        assert "error" in json.loads(result.output)


class TestStream:
    def test_fixture_replay_through_pipeline(self, runner, tmp_path):
        corpus = make_separable_corpus(60, seed=4)
        model_path = str(tmp_path / "model.bin")
        assert runner.invoke(main, [
            "train", "--corpus", _write_corpus(tmp_path, corpus),
            "--out", model_path]).exit_code == 0

        fixture = tmp_path / "posts.ndjson"
        fixture.write_text("\n".join(json.dumps(
            {"id": f"p{i}", "text": text, "created_at": "2023-01-01"})
            for i, (text, _) in enumerate(corpus[:10])) + "\n")
        config = tmp_path / "config.yaml"
        config.write_text(
            f"sink:\n  archive_path: {tmp_path / 'archive.ndjson'}\n"
            f"classifier:\n  model_path: {model_path}\n"
            f"bus:\n  root_dir: {tmp_path / 'bus'}\n")

        result = runner.invoke(main, ["stream", "--config", str(config),
                                      "--fixture", str(fixture),
                                      "--rate", "10000"])
        assert result.exit_code == 0, result.output
        snapshot = json.loads(result.output)
        assert snapshot["replay"]["published"] == 10
        assert snapshot["relevancy"]["twitter"]["true_count"] == 5

        summary = runner.invoke(main, [
            "metrics", "--from-archive", str(tmp_path / "archive.ndjson")])
        assert summary.exit_code == 0
        assert json.loads(summary.output)["documents"] == 10

    def test_missing_fixture(self, runner, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text(f"sink:\n  archive_path: {tmp_path / 'a.ndjson'}\n"
                          "classifier:\n  endpoint: http://unused\n")
        result = runner.invoke(main, ["stream", "--config", str(config),
                                      "--fixture", str(tmp_path / "nope.ndjson")])
        assert result.exit_code == 1


class TestVerify:
    def test_fixture_verification(self, runner, tmp_path):
        from tstem.core import Indicator, IndicatorType
        ioc = Indicator(value="198.51.100.7", kind=IndicatorType.IPV4)
        fixture = tmp_path / "rep.json"
        fixture.write_text(json.dumps({ioc.key: {"virustotal": True}}))
        in_path = tmp_path / "iocs.txt"
        in_path.write_text("ipv4:198.51.100.7\n")
        result = runner.invoke(main, ["verify", "--in", str(in_path),
                                      "--fixture", str(fixture)])
        assert result.exit_code == 0, result.output
        record = json.loads(result.output)
        by_provider = {v["provider"]: v["found"] for v in record["verification"]}
        assert by_provider == {"virustotal": True, "alienvault": False}

    def test_requires_exactly_one_mode(self, runner, tmp_path):
        in_path = tmp_path / "iocs.txt"
        in_path.write_text("ipv4:1.2.3.4\n")
        result = runner.invoke(main, ["verify", "--in", str(in_path)])
        assert result.exit_code == 2


class TestUsage:
    def test_unknown_flag_exits_2(self, runner):
        assert runner.invoke(main, ["extract", "--bogus"]).exit_code == 2

    def test_unknown_command_exits_2(self, runner):
        assert runner.invoke(main, ["frobnicate"]).exit_code == 2

    def test_metrics_needs_exactly_one_source(self, runner):
        assert runner.invoke(main, ["metrics"]).exit_code == 2

    def test_crawl_unknown_spider(self, runner, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text(f"sink:\n  archive_path: {tmp_path / 'a.ndjson'}\n")
        result = runner.invoke(main, ["crawl", "--config", str(config),
                                      "--spider", "nonesuch"])
        assert result.exit_code == 1
        assert "nonesuch" in result.output
