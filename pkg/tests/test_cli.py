import csv
import json

import pytest

from oah import cli

SMALL_MODEL = ["--d-model", "16", "--heads", "2", "--enc-blocks", "1", "--dec-blocks", "1",
               "--ffn-hidden", "16", "--conv-channels", "8", "--tau", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-corpus", "--out-dir", str(root / "data"), "--train-size", "16", "--dev-size", "3",
                     "--test-size", "4", "--feat-dim", "8", "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(workdir):
    run = workdir / "run"
    rc = cli.main(["train", "--corpus", str(workdir / "data"), "--out-dir", str(run), "--epochs", "2",
                   "--batch-size", "8", "--warmup", "4", "--avg-last-k", "2", "--epsilon", "1", *SMALL_MODEL])
    assert rc == 0
    return run


def test_train_outputs(trained):
    assert (trained / "model.ckpt").exists()
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert len(rows) == 2 and "dev_cer_oah" in rows[0]
    echo = (trained / "config.txt").read_text()
    assert "alpha=0.1" in echo and "epsilon=1" in echo


def test_decode_writes_jsonl_and_summary(workdir, trained):
    out = workdir / "dec"
    rc = cli.main(["decode", "--corpus", str(workdir / "data"), "--checkpoint", str(trained / "model.ckpt"),
                   "--mode", "oah", "--beam", "3", "--out-dir", str(out)])
    assert rc == 0
    lines = [json.loads(l) for l in open(out / "nbest.jsonl")]
    assert len(lines) == 4
    assert {"id", "mode", "candidates", "selected", "selected_text", "status", "timing_ms"} <= set(lines[0])
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert summary[0]["mode"] == "oah" and float(summary[0]["rtf"]) > 0


def _selected(path):
    return [json.loads(l)["selected"] for l in open(path / "nbest.jsonl")]


def test_beam_one_ops_equals_oah(workdir, trained):
    outs = []
    for mode in ("ops", "oah"):
        out = workdir / f"b1_{mode}"
        assert cli.main(["decode", "--corpus", str(workdir / "data"), "--checkpoint",
                         str(trained / "model.ckpt"), "--mode", mode, "--beam", "1", "--out-dir", str(out)]) == 0
        outs.append(_selected(out))
    assert outs[0] == outs[1]


def test_streaming_flag_gives_identical_selection(workdir, trained):
    outs = []
    for extra in ([], ["--streaming"]):
        out = workdir / f"s{len(extra)}"
        assert cli.main(["decode", "--corpus", str(workdir / "data"), "--checkpoint",
                         str(trained / "model.ckpt"), "--beam", "4", "--out-dir", str(out), *extra]) == 0
        outs.append(_selected(out))
    assert outs[0] == outs[1]


def test_config_echo_reproduces_run(workdir, trained):
    first = workdir / "dec_a"
    assert cli.main(["decode", "--corpus", str(workdir / "data"), "--checkpoint", str(trained / "model.ckpt"),
                     "--mode", "ops", "--beam", "2", "--out-dir", str(first)]) == 0
    cfg = workdir / "replay.txt"
    cfg.write_text((first / "config.txt").read_text().replace(str(first), str(workdir / "dec_b")))
    assert cli.main(["decode", "--config", str(cfg), "--corpus", str(workdir / "data"),
                     "--checkpoint", str(trained / "model.ckpt")]) == 0
    assert _selected(first) == _selected(workdir / "dec_b")


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("alpha = 0.3\n# comment\nepochs=7\n")
    parser, subs = cli.build_parser()
    args = cli._apply_config(parser, subs["train"], ["train", "--config", str(cfg), "--corpus", "x",
                                                     "--epochs", "2"])
    assert args.alpha == 0.3 and args.epochs == 2


def test_alpha_rejected_before_work(tmp_path, capsys):
    assert cli.main(["train", "--corpus", str(tmp_path / "missing"), "--alpha", "1.5"]) == cli.EXIT_USAGE
    cfg = tmp_path / "c.txt"
    cfg.write_text("alpha=-0.2\n")
    assert cli.main(["train", "--config", str(cfg), "--corpus", "x"]) == cli.EXIT_USAGE
    assert "alpha" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("nonsense=1\n")
    assert cli.main(["train", "--config", str(cfg), "--corpus", "x"]) == cli.EXIT_USAGE
    assert "nonsense" in capsys.readouterr().err


def test_data_errors(tmp_path, workdir, trained, capsys):
    assert cli.main(["decode", "--corpus", str(tmp_path), "--checkpoint", "nope.ckpt"]) == cli.EXIT_DATA
    other = tmp_path / "other"
    assert cli.main(["gen-corpus", "--out-dir", str(other), "--train-size", "2", "--dev-size", "1",
                     "--test-size", "1", "--feat-dim", "5"]) == 0
    assert cli.main(["decode", "--corpus", str(other), "--checkpoint", str(trained / "model.ckpt"),
                     "--out-dir", str(tmp_path / "d")]) == cli.EXIT_DATA
    assert "feat_dim=8" in capsys.readouterr().err


def test_ablate_lists_missing_checkpoints(workdir, tmp_path, capsys):
    rc = cli.main(["ablate", "--corpus", str(workdir / "data"), "--axis", "epsilon", "--values", "0,1",
                   "--runs-dir", str(tmp_path / "runs"), "--out-dir", str(tmp_path / "abl")])
    assert rc == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "epsilon_0" in err and "epsilon_1" in err


def test_ablate_beam_table(workdir, trained):
    out = workdir / "abl"
    rc = cli.main(["ablate", "--corpus", str(workdir / "data"), "--axis", "beam", "--values", "1,3",
                   "--checkpoint", str(trained / "model.ckpt"), "--out-dir", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "table_beam.csv")))
    assert [r["beam"] for r in rows] == ["1", "3"]
    assert rows[0]["test_cer_ops"] == rows[0]["test_cer_oah"]
    assert {"rtf_ops", "rtf_oah", "dev_cer_ops"} <= set(rows[0])


def test_ablate_epsilon_trains_missing(workdir, tmp_path):
    rc = cli.main(["ablate", "--corpus", str(workdir / "data"), "--axis", "epsilon", "--values", "0",
                   "--runs-dir", str(tmp_path / "runs"), "--train-missing", "--epochs", "1", "--batch-size", "8",
                   "--avg-last-k", "1", "--beam", "2", "--out-dir", str(tmp_path / "abl"), *SMALL_MODEL])
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "abl" / "table_epsilon.csv")))
    assert rows[0]["epsilon"] == "0" and rows[0]["latency_ms"] == "40"


def test_streaming_requires_oah(workdir, trained):
    assert cli.main(["decode", "--corpus", str(workdir / "data"), "--checkpoint", str(trained / "model.ckpt"),
                     "--mode", "ops", "--streaming"]) == cli.EXIT_USAGE


def test_help_exits_cleanly():
    assert cli.main(["--help"]) == 0
