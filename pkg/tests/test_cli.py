"""End-to-end CLI tests over a miniature corpus."""

import json

import numpy as np
import pytest

from groundsent.cli import build_parser, main

SMALL_DIMS = ["--d-cell", "6", "--d-a", "4", "--n-a", "2", "--d-e", "6"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.jsonl"
    run = root / "run"
    assert main(["gen-synth", "--n", "20", "--vocab", "16", "--d-img", "8",
                 "--seed", "3", "--out", str(corpus)]) == 0
    assert main(["train", "--corpus", str(corpus), "--out", str(run),
                 "--objective", "cap2all", "--epochs", "2", "--batch", "4",
                 "--seed", "3", *SMALL_DIMS]) == 0
    return {"corpus": corpus, "checkpoint": run / "checkpoint.bin", "run": run}


@pytest.mark.parametrize("command",
                         ["gen-synth", "train", "eval", "salience", "embed", "gradcheck"])
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([command, "--help"])
    assert exc.value.code == 0


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["frobnicate"])
    assert exc.value.code != 0


def test_train_log_shows_composite_sum(workspace, capsys):
    main(["train", "--corpus", str(workspace["corpus"]),
          "--out", str(workspace["run"].parent / "run2"), "--objective", "cap2all",
          "--epochs", "1", "--batch", "4", "--seed", "3", *SMALL_DIMS])
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()
             if l.startswith("{")]
    assert lines
    for rec in lines:
        assert rec["loss"] == pytest.approx(rec["loss_c"] + rec["loss_vg"], abs=1e-9)


def test_metrics_file_schema(workspace):
    lines = (workspace["run"] / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines):
        rec = json.loads(line)
        assert rec["epoch"] == i
        assert set(rec) == {"epoch", "objective", "loss", "loss_c", "loss_vg", "wall_ms"}


def test_eval_reports_both_directions(workspace, capsys):
    assert main(["eval", "--checkpoint", str(workspace["checkpoint"]),
                 "--corpus", str(workspace["corpus"]), "--limit", "10"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sentence_to_image"]["n"] == 10
    assert report["image_to_sentence"]["direction"] == "image_to_sentence"


def test_salience_json_schema(workspace, capsys):
    assert main(["salience", "--checkpoint", str(workspace["checkpoint"]),
                 "--sentence", "obj01 vis00 obj02"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert set(rec) == {"tokens", "attention", "pooled"}
    assert rec["tokens"] == ["obj01", "vis00", "obj02"]
    for row in rec["attention"]:
        assert sum(row) == pytest.approx(1.0, abs=1e-9)


def test_salience_oov_sentence_fails_cleanly(workspace, capsys):
    assert main(["salience", "--checkpoint", str(workspace["checkpoint"]),
                 "--sentence", "zzz qqq"]) == 1
    assert "error:" in capsys.readouterr().err


def test_embed_roundtrip(workspace, tmp_path, capsys):
    sentences = tmp_path / "sents.txt"
    out = tmp_path / "vecs.txt"
    sentences.write_text("obj01 vis00\nobj02 obj03 obj04\nobj01 vis00\n")
    assert main(["embed", "--checkpoint", str(workspace["checkpoint"]),
                 "--input", str(sentences), "--output", str(out)]) == 0
    rows = [np.array([float(v) for v in line.split()]) for line in out.read_text().splitlines()]
    assert len(rows) == 3
    assert rows[0].size == 12  # 2 * d_cell
    np.testing.assert_array_equal(rows[0], rows[2])


def test_embed_empty_input(workspace, tmp_path):
    empty = tmp_path / "empty.txt"
    out = tmp_path / "out.txt"
    empty.write_text("")
    assert main(["embed", "--checkpoint", str(workspace["checkpoint"]),
                 "--input", str(empty), "--output", str(out)]) == 0
    assert out.read_text() == ""


def test_train_rejects_mismatched_d_img(workspace, capsys):
    code = main(["train", "--corpus", str(workspace["corpus"]),
                 "--out", str(workspace["run"].parent / "bad"), "--epochs", "1",
                 "--batch", "4", "--d-img", "99", *SMALL_DIMS])
    assert code == 1
    assert "d_img" in capsys.readouterr().err


def test_missing_corpus_fails_cleanly(capsys):
    code = main(["eval", "--checkpoint", "nope.bin", "--corpus", "nope.jsonl"])
    assert code == 1
    assert "error:" in capsys.readouterr().err
