import json
import logging
import os
import zipfile

import pytest

from main import run


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    logger = logging.getLogger("speechtext")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


def last_error(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def write_lines(path, lines):
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return str(path)


class TestTextCommands:
    def test_normalize(self, tmp_path, capsys):
        src = write_lines(tmp_path / "in.txt", ["كَتَبَ   الولدُ!", "٣ كتب"])
        assert run(["normalize", "--input", src]) == 0
        assert capsys.readouterr().out == "كتب الولد\n3 كتب\n"

    def test_normalize_to_file(self, tmp_path):
        src = write_lines(tmp_path / "in.txt", ["درسٌ"])
        out = tmp_path / "out.txt"
        assert run(["normalize", "--input", src, "--out", str(out)]) == 0
        assert out.read_text(encoding="utf-8") == "درس\n"

    def test_translit_both_ways(self, tmp_path, capsys):
        src = write_lines(tmp_path / "ar.txt", ["كتب الولد"])
        assert run(["translit", "--to-bw", "--input", src]) == 0
        assert capsys.readouterr().out == "ktb Alwld\n"
        bw = write_lines(tmp_path / "bw.txt", ["ktb Alwld"])
        assert run(["translit", "--from-bw", "--input", bw]) == 0
        assert capsys.readouterr().out == "كتب الولد\n"

    def test_unmapped_symbol_is_a_data_error(self, tmp_path, capsys):
        bw = write_lines(tmp_path / "bw.txt", ["ktb#"])
        assert run(["translit", "--from-bw", "--input", bw]) == 3
        error = last_error(capsys)
        assert error["error"] == "UnmappedSymbol" and error["kind"] == "data"
        assert run(["translit", "--from-bw", "--lenient", "--input", bw]) == 0

    def test_build_vocab_to_stdout(self, tmp_path, capsys):
        src = write_lines(tmp_path / "in.txt", ["كتب", "درس"])
        assert run(["build-vocab", "--input", src]) == 0
        symbols = json.loads(capsys.readouterr().out)["symbols"]
        assert set("كتبدرس") <= set(symbols)

    @pytest.mark.parametrize("base", ["{not json", '{"specials": {}, "symbols": ["a"]}', "[]"])
    def test_corrupt_base_vocabulary_is_a_data_error(self, tmp_path, capsys, base):
        src = write_lines(tmp_path / "in.txt", ["كتب"])
        (tmp_path / "base.json").write_text(base, encoding="utf-8")
        assert run(["build-vocab", "--input", src, "--base", str(tmp_path / "base.json")]) == 3
        err = capsys.readouterr().err
        assert "Traceback" not in err
        assert json.loads(err.strip().splitlines()[-1])["kind"] == "data"

    def test_corrupt_checkpoint_is_a_data_error(self, tmp_path, capsys):
        ckpt = tmp_path / "asr.zip"
        with zipfile.ZipFile(ckpt, "w") as zf:
            zf.writestr("header.json", "{broken")
        manifest = write_lines(tmp_path / "m.jsonl", [])
        assert run(["transcribe", "--ckpt", str(ckpt), "--manifest", manifest]) == 3
        assert last_error(capsys)["error"] == "CheckpointError"


class TestUsage:
    def test_version(self, capsys):
        assert run(["--version"]) == 0
        assert "arabic-speech-text" in capsys.readouterr().out

    def test_help(self, capsys):
        assert run(["transcribe", "--help"]) == 0
        assert "--lambda" in capsys.readouterr().out

    def test_missing_subcommand(self, capsys):
        assert run([]) == 2
        assert last_error(capsys)["kind"] == "usage"

    def test_unknown_config_key(self, capsys):
        assert run(["describe", "--set", "bogus=1"]) == 2
        error = last_error(capsys)
        assert error["error"] == "UsageError" and error["key"] == "bogus"

    def test_unreadable_config_file(self, tmp_path, capsys):
        bad = tmp_path / "cfg.json"
        bad.write_text("[1, 2]", encoding="utf-8")
        assert run(["describe", "--config", str(bad)]) == 2

    def test_run_dir_required(self, capsys):
        assert run(["make-toy", "--n", "2"]) == 2

    def test_missing_manifest(self, tmp_path, capsys):
        assert run(["corpus-stats", "--manifest", str(tmp_path / "nope.jsonl")]) == 3


class TestCorpusCommands:
    @pytest.fixture
    def toy_dir(self, tmp_path):
        out = tmp_path / "toy"
        assert run(["make-toy", "--n", "4", "--dialects", "2", "--seed", "5", "--out", str(out)]) == 0
        return out

    def test_make_toy_writes_a_run_directory(self, toy_dir):
        assert len((toy_dir / "manifest.jsonl").read_text(encoding="utf-8").splitlines()) == 4
        config = json.loads((toy_dir / "run_config.json").read_text(encoding="utf-8"))
        assert config["command"] == "make-toy" and config["seed"] == 5
        assert (toy_dir / "run.log").exists()

    def test_corpus_stats(self, toy_dir, capsys):
        assert run(["corpus-stats", "--manifest", str(toy_dir / "manifest.jsonl")]) == 0
        out = capsys.readouterr().out
        assert "D0" in out and "D1" in out and "all" in out

    def test_units_and_labels(self, toy_dir, tmp_path, capsys):
        manifest = str(toy_dir / "manifest.jsonl")
        units_dir = tmp_path / "units"
        assert run(["fit-units", "--manifest", manifest, "--k", "3", "--out", str(units_dir)]) == 0
        assert run(["label", str(units_dir / "units.kmu"), manifest]) == 0
        records = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert len(records) == 4
        assert all(set(r["labels"]) <= {0, 1, 2} for r in records)

    def test_filter_manifest(self, toy_dir, tmp_path):
        out = tmp_path / "filtered"
        assert run(["filter-manifest", "--manifest", str(toy_dir / "manifest.jsonl"),
                    "--max-dur", "0.01", "--out", str(out)]) == 0
        assert (out / "manifest.jsonl").read_text(encoding="utf-8") == ""


class TestEvaluate:
    def test_word_error_rate(self, tmp_path, capsys):
        refs = write_lines(tmp_path / "refs.jsonl", [json.dumps({"id": "a", "text": "كتب الولد الدرس"}, ensure_ascii=False)])
        hyps = write_lines(tmp_path / "hyps.jsonl", [json.dumps({"id": "a", "hyp": "كتب الولد"}, ensure_ascii=False)])
        assert run(["evaluate", "--refs", refs, "--hyps", hyps]) == 0
        report = json.loads(capsys.readouterr().out.splitlines()[0])
        assert report["wer"] == pytest.approx(1 / 3)

    def test_label_accuracy(self, tmp_path, capsys):
        refs = write_lines(tmp_path / "refs.jsonl", [json.dumps({"id": i, "dialect": d}) for i, d in
                                                     (("a", "EGY"), ("b", "LEV"))])
        hyps = write_lines(tmp_path / "hyps.jsonl", [json.dumps({"id": i, "label": d}) for i, d in
                                                     (("a", "EGY"), ("b", "GLF"))])
        assert run(["evaluate", "--refs", refs, "--hyps", hyps, "--level", "label"]) == 0
        assert json.loads(capsys.readouterr().out.splitlines()[0])["accuracy"] == pytest.approx(0.5)

    def test_missing_hypothesis(self, tmp_path, capsys):
        refs = write_lines(tmp_path / "refs.jsonl", [json.dumps({"id": "a", "text": "x"}), json.dumps({"id": "b", "text": "y"})])
        hyps = write_lines(tmp_path / "hyps.jsonl", [json.dumps({"id": "a", "hyp": "x"})])
        assert run(["evaluate", "--refs", refs, "--hyps", hyps]) == 3
        assert last_error(capsys)["kind"] == "data"


def test_describe_reports_sizes(capsys):
    assert run(["describe"]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["total"] > 0


def test_env_seed_is_the_default(tmp_path, monkeypatch):
    from config import settings
    monkeypatch.setattr(settings, "DEFAULT_SEED", 99)
    out = tmp_path / "toy"
    assert run(["make-toy", "--n", "1", "--out", str(out)]) == 0
    assert json.loads((out / "run_config.json").read_text(encoding="utf-8"))["seed"] == 99
