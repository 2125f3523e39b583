import csv
import hashlib
import json
import subprocess
import sys

import pytest

from fss.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

QUICK = ["--epochs", "1", "--batch", "4", "--batches-per-epoch", "2", "--val-tasks", "10"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["-q", "generate", "--per-class", "100", "--sigma", "0.05", "--seed", "1", "--out", str(d / "d.csv")]) == 0
    return d / "d.csv"


@pytest.fixture(scope="module")
def trained(data):
    out = data.parent / "m.ckpt"
    assert main(["-q", "train", "--data", str(data), "--proportion", "0.1", *QUICK, "--out", str(out)]) == 0
    return out


def test_generate_outputs(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["-q", "generate", "--per-class", "100", "--sigma", "0.05", "--out", str(out)]) == EXIT_OK
    meta = json.loads(out.with_suffix(".json").read_text())
    assert meta["sigma_n"] == 0.05 and meta["rows"] == 300 and meta["window_len"] == 66
    with open(out) as fh:
        assert sum(1 for _ in fh) == 301
    run = json.loads((tmp_path / "g.csv.manifest.json").read_text())
    assert run["command"] == "generate" and run["seed"] == 0 and run["tool_version"]


def test_generate_byte_identical(tmp_path):
    for name in ("a.csv", "b.csv"):
        main(["-q", "generate", "--bank", "difficult", "--per-class", "10", "--seed", "3", "--out", str(tmp_path / name)])
    assert digest(tmp_path / "a.csv") == digest(tmp_path / "b.csv")
    meta_a = json.loads((tmp_path / "a.json").read_text())
    meta_b = json.loads((tmp_path / "b.json").read_text())
    assert meta_a == meta_b


def test_train_logs_adaptive_config(data, tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    assert main(["-q", "train", "--data", str(data), "--proportion", "0.1", *QUICK, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "f=8 " in text and "dropout=0.50" in text
    for suffix in ("", ".bin", ".history.csv", ".history.png", ".manifest.json"):
        assert (tmp_path / f"m.ckpt{suffix}").exists(), suffix


def test_train_rerun_is_identical(data, tmp_path):
    for name in ("a", "b"):
        main(["-q", "train", "--data", str(data), "--proportion", "0.1", *QUICK, "--no-plots", "--out", str(tmp_path / f"{name}.ckpt")])
    assert digest(tmp_path / "a.ckpt.history.csv") == digest(tmp_path / "b.ckpt.history.csv")
    assert digest(tmp_path / "a.ckpt.bin") == digest(tmp_path / "b.ckpt.bin")
    assert not (tmp_path / "a.ckpt.history.png").exists()


def test_train_does_not_touch_input(data, tmp_path):
    before = digest(data), digest(data.with_suffix(".json"))
    main(["-q", "train", "--data", str(data), "--proportion", "0.1", *QUICK, "--no-plots", "--out", str(tmp_path / "m.ckpt")])
    assert (digest(data), digest(data.with_suffix(".json"))) == before


def test_eval_report(trained, data, tmp_path):
    rep_path = tmp_path / "r.json"
    assert main(["-q", "eval", "--model", str(trained), "--data", str(data), "--tasks", "30", "--report", str(rep_path)]) == 0
    rep = json.loads(rep_path.read_text())
    assert set(rep) >= {"proportion", "f", "dropout", "params", "precision", "recall", "accuracy", "confusion", "seed", "wall_time_s"}
    assert rep["f"] == 8 and rep["proportion"] == 0.1 and rep["wall_time_s"] is None
    assert sum(map(sum, rep["confusion"])) == 30
    again = tmp_path / "r2.json"
    main(["-q", "eval", "--model", str(trained), "--data", str(data), "--tasks", "30", "--report", str(again)])
    assert digest(rep_path) == digest(again)


def test_eval_record_time(trained, data, tmp_path):
    rep_path = tmp_path / "r.json"
    main(["-q", "eval", "--model", str(trained), "--data", str(data), "--tasks", "5", "--record-time", "--report", str(rep_path)])
    assert json.loads(rep_path.read_text())["wall_time_s"] > 0


def test_eval_zero_tasks_is_usage_error(trained, data, tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["eval", "--model", str(trained), "--data", str(data), "--tasks", "0", "--report", str(tmp_path / "r.json")])
    assert err.value.code == EXIT_USAGE


def test_sweep_table(tmp_path):
    big = tmp_path / "big.csv"
    main(["-q", "generate", "--per-class", "300", "--out", str(big)])
    out = tmp_path / "sweep"
    args = ["-q", "sweep", "--data", str(big), "--epochs", "1", "--batch", "2", "--batches-per-epoch", "1",
            "--val-tasks", "4", "--tasks", "10", "--out", str(out)]
    assert main(args) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert [int(r["f"]) for r in rows] == [8, 16, 16, 32, 32, 32, 32, 64, 64, 64]
    assert [float(r["dropout"]) for r in rows] == [0.5, 0.45, 0.41, 0.36, 0.32, 0.27, 0.23, 0.18, 0.14, 0.1]
    assert "slope" in json.loads((out / "fit.json").read_text())
    assert (out / "sweep.png").exists() and (out / "manifest.json").exists()


def test_attention_export(trained, data, tmp_path):
    out = tmp_path / "att"
    assert main(["-q", "attention", "--model", str(trained), "--data", str(data), "--out", str(out)]) == 0
    for i in range(5):
        rows = (out / f"embedding_spike{i}.csv").read_text().splitlines()
        assert len(rows) == 66 and all(len(r.split(",")) == 66 for r in rows)
        assert (out / f"embedding_spike{i}.png").exists()
    for i in range(1, 5):
        assert len((out / f"ra{i}.csv").read_text().splitlines()) == 5
    assert (out / "manifest.json").exists()


def test_embed_export(trained, data, tmp_path):
    out = tmp_path / "emb.csv"
    assert main(["-q", "embed", "--model", str(trained), "--data", str(data), "--n", "20", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][-1] == "label" and len(rows[0]) == 129
    assert len(rows) == 21
    assert (tmp_path / "emb.png").exists()


def test_baseline_pcak(data, tmp_path):
    rep_path = tmp_path / "p.json"
    assert main(["-q", "baseline-pcak", "--data", str(data), "--report", str(rep_path)]) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["accuracy"] >= 0.95
    assert (tmp_path / "p.json.manifest.json").exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("PASS") and "max relative error" in line


def test_gradcheck_failure_exit_code(capsys):
    assert main(["gradcheck", "--seeds", "1", "--tolerance", "0"]) == EXIT_NUMERIC


def test_missing_data_file(tmp_path):
    assert main(["-q", "train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "m.ckpt")]) == EXIT_DATA


def test_malformed_data_file(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("label,s0\n0,zzz\n")
    assert main(["-q", "baseline-pcak", "--data", str(bad), "--report", str(tmp_path / "r.json")]) == EXIT_DATA


def test_divergence_is_numeric_failure(data, tmp_path, capsys):
    code = main(["-q", "train", "--data", str(data), "--proportion", "0.1", *QUICK, "--lr", "1e300",
                 "--clip-norm", "0", "--out", str(tmp_path / "m.ckpt")])
    assert code == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "numeric failure" in err and "epoch 1" in err


@pytest.mark.parametrize("argv", [[], ["train"], ["train", "--data", "x", "--lr", "-1"], ["sweep", "--data", "x", "--proportions", "0,1"]])
def test_usage_errors(argv):
    try:
        code = main(argv)
    except SystemExit as e:
        code = e.code
    assert code == EXIT_USAGE


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "fss", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("fss ")
