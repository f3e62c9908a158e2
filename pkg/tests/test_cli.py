import csv
import json

import pytest

from dapc.cli import EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_OK, main

SMALL = ["--set", "data.counts=[20,5,5]", "--set", "data.segment_len=100",
         "--set", "model.hidden_size=8", "--set", "train.mask.w_T=20"]


def _json_blocks(text):
    """Top-level JSON objects printed one after another."""
    dec, out, i = json.JSONDecoder(), [], 0
    while i < len(text):
        if text[i] == "{":
            obj, i = dec.raw_decode(text, i)
            out.append(obj)
        else:
            i += 1
    return out


def test_gen_is_deterministic(tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        assert main(["gen", "--snr", "1.0", "--seed", "3", "--out", str(tmp_path / name)] + SMALL) == EXIT_OK
        hashes.append(_json_blocks(capsys.readouterr().out)[-1]["hash"])
    assert hashes[0] == hashes[1]
    main(["gen", "--snr", "1.0", "--seed", "4", "--out", str(tmp_path / "c")] + SMALL)
    assert _json_blocks(capsys.readouterr().out)[-1]["hash"] != hashes[0]


def test_gen_ar1_csv(tmp_path, capsys):
    out = tmp_path / "ar"
    code = main(["gen", "--system", "ar1", "--rho", "0.5", "--format", "csv", "--out", str(out),
                 "--set", "data.counts=[4,2,2]", "--set", "data.segment_len=50"])
    assert code == EXIT_OK
    summary = _json_blocks(capsys.readouterr().out)[-1]
    assert summary["system"] == "ar1"
    assert summary["shapes"]["train"] == [4, 50, 1]
    assert (out / "metadata.json").exists()


def test_train_pi_only_logs_zero_beta(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--variant", "pi_only", "--epochs", "1", "--out", str(out)] + SMALL)
    assert code == EXIT_OK
    with open(out / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["beta"]) == 0.0 for r in rows)
    result = json.loads((out / "result.json").read_text())
    assert result["status"] == "ok" and result["method"] == "pi_only"


def test_train_echoes_flags(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--variant", "dapc", "--T", "4", "--beta", "0.1", "--gamma", "0.1",
                 "--epochs", "1", "--out", str(out)] + SMALL)
    assert code == EXIT_OK
    echo = _json_blocks(capsys.readouterr().out)[0]
    assert echo["objective"]["variant"] == "dapc"
    assert echo["objective"]["T"] == 4
    assert echo["objective"]["beta"] == 0.1 and echo["objective"]["gamma"] == 0.1
    assert (out / "config.yaml").exists() and (out / "model.json").exists()


def test_train_resume_matches_straight_run(tmp_path, capsys):
    straight, resumed = tmp_path / "s", tmp_path / "r"
    args = ["train", "--variant", "pi_only", "--seed", "1"] + SMALL
    main(args + ["--epochs", "2", "--out", str(straight)])
    main(args + ["--epochs", "1", "--out", str(resumed)])
    main(args + ["--epochs", "2", "--out", str(resumed), "--resume"])
    a = json.loads((straight / "result.json").read_text())
    b = json.loads((resumed / "result.json").read_text())
    assert a["test_r2"] == b["test_r2"]


def test_eval_roundtrip_and_missing_checkpoint(tmp_path, capsys):
    bundle, run = tmp_path / "b", tmp_path / "run"
    assert main(["gen", "--out", str(bundle)] + SMALL) == EXIT_OK
    assert main(["train", "--variant", "pca", "--data", str(bundle), "--out", str(run)] + SMALL) == EXIT_OK
    rep = tmp_path / "rep"
    assert main(["eval", "--checkpoint", str(run / "model.json"), "--bundle", str(bundle),
                 "--out", str(rep)]) == EXIT_OK
    report = json.loads((rep / "report.json").read_text())
    assert 0.0 < report["aggregate"] <= 1.0
    assert (rep / "trajectory_test0.csv").exists()
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.json"), "--bundle", str(bundle),
                 "--out", str(rep)]) == EXIT_IO


def test_eval_forecast_then_plot(tmp_path, capsys):
    bundle, run, rep = tmp_path / "b", tmp_path / "run", tmp_path / "rep"
    main(["gen", "--system", "ar1", "--rho", "0.9", "--out", str(bundle),
          "--set", "data.counts=[10,5,5]", "--set", "data.segment_len=200"])
    main(["train", "--preset", "ar1-oracle", "--data", str(bundle), "--out", str(run)])
    assert main(["eval", "--checkpoint", str(run / "model.json"), "--bundle", str(bundle),
                 "--task", "forecast", "--lags", "5", "--out", str(rep)]) == EXIT_OK
    assert (rep / "forecast.csv").exists()
    figs = tmp_path / "figs"
    assert main(["plot", "--report", str(rep / "forecast.csv"), "--out", str(figs)]) == EXIT_OK
    assert (figs / "forecast_bars.svg").exists()


def test_sweep_counts_runs(tmp_path, capsys):
    out = tmp_path / "sw"
    code = main(["sweep", "--axis", "objective.variant=pca,sfa", "--seeds", "0", "1",
                 "--out", str(out)] + SMALL)
    assert code == EXIT_OK
    err = capsys.readouterr().err
    assert "2 cells x 2 seeds = 4 runs" in err
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["cells"]) == 2
    assert "pca" in (out / "table.md").read_text()


@pytest.mark.parametrize("argv, code", [
    (["train", "--out", "x", "--set", "objective.nope=1"], EXIT_CONFIG),
    (["train", "--out", "x", "--set", "novalue"], EXIT_CONFIG),
    (["train", "--out", "x", "--preset", "lorenz-snr03", "--config", "c.yaml"], EXIT_CONFIG),
    (["train", "--out", "x", "--preset", "missing"], EXIT_CONFIG),
    (["sweep", "--axis", "broken"], EXIT_CONFIG),
    (["eval", "--checkpoint", "none.json", "--bundle", "b", "--out", "o"], EXIT_IO),
])
def test_exit_codes(tmp_path, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_bad_bundle_is_data_error(tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", "--variant", "pca", "--out", str(run)] + SMALL)
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--checkpoint", str(run / "model.json"), "--bundle", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_plot_malformed_csv_is_data_error(tmp_path, capsys):
    p = tmp_path / "t.csv"
    p.write_text("a,b,c\n1,2,3\n1,zz,3\n")
    assert main(["plot", "--trajectory", str(p), "--out", str(tmp_path / "f")]) == EXIT_DATA
    assert "row 3" in capsys.readouterr().err
