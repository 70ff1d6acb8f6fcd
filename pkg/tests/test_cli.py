import json
from pathlib import Path

import pandas as pd
import pytest

from conftest import compass_csv, make_record, write_tiny_pipeline
from prudex.cli import main
from prudex.config import load_config, parse_config
from prudex.errors import MissingInputError, ValidationError
from prudex.pipeline import config_text, pipeline_marks


@pytest.fixture
def tiny(tmp_path):
    return write_tiny_pipeline(tmp_path)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_config_parsing_and_overrides(tiny):
    cfg = load_config(tiny)
    assert cfg.markets["SYN"] == tiny.parent / "syn.csv"
    assert cfg.out == tiny.parent / "out" and cfg.seeds == (0, 1) and cfg.phases == 2
    assert cfg.agent.n_experts == 2 and cfg.agent.hidden_sizes == (8, 8)
    assert cfg.extreme == {"SYN": ("2015-12-01", "2016-01-15")}
    cfg = load_config(tiny, ["agent.epochs=3", "pipeline.seeds=4"])
    assert cfg.agent.epochs == 3 and cfg.seeds == (4,)


@pytest.mark.parametrize("anchor, extra, err", [
    ("[extreme]\n", "[bogus]\nx = 1\n", ValidationError),
    ("[split]\n", "nope = 1\n", ValidationError),
    ("[pipeline]\n", "methods = alphamix, ppo\n", ValidationError),
    ("[markets]\n", "GONE = missing.csv\n", MissingInputError),
])
def test_config_errors(tiny, anchor, extra, err):
    text = tiny.read_text()
    text = text.replace(anchor, (extra + anchor) if anchor == "[extreme]\n" else (anchor + extra), 1)
    with pytest.raises(err):
        parse_config(text, tiny.parent)


def test_config_bad_override(tiny):
    with pytest.raises(ValidationError):
        load_config(tiny, ["epochs=3"])
    with pytest.raises(MissingInputError):
        load_config(tiny.parent / "none.ini")


def test_config_snapshot_is_location_free(tiny, tmp_path):
    a = config_text(load_config(tiny, ["pipeline.out=/x/one"]))
    b = config_text(load_config(tiny, ["pipeline.out=/y/two"]))
    assert a == b and "/x/" not in a


def test_pipeline_marks(tiny):
    cfg = load_config(tiny)
    marks = pipeline_marks(cfg, True)
    assert len(marks) == 17 and marks[1] is False and marks[5] is True
    assert marks[6] is False  # one market only
    assert pipeline_marks(cfg, False)[5] is False


def test_help_lists_exit_codes(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "exit codes" in capsys.readouterr().out


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["score"])
    assert exc.value.code == 2


def test_missing_input_exit_3(tmp_path, capsys):
    code, _, err = run(["ingest", "--input", tmp_path / "nope.csv", "--out", tmp_path], capsys)
    assert code == 3
    report = json.loads(err)
    assert report["exit_code"] == 3 and report["command"] == "ingest"


def test_validation_exit_4(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("date,ticker,open\n2020-01-01,A,1\n")
    code, _, err = run(["ingest", "--input", bad, "--out", tmp_path / "o"], capsys)
    assert code == 4 and json.loads(err)["exit_code"] == 4


def test_dry_run_writes_nothing(tiny, capsys):
    out = tiny.parent / "out"
    code, text, _ = run(["pipeline", "--config", tiny, "--dry-run"], capsys)
    assert code == 0 and not out.exists()
    plan = json.loads(text)
    assert plan["dry_run"] and sum("train" in s for s in plan["steps"]) == 2 * 4 * 2
    code, text, _ = run(["train", "--config", tiny, "--method", "sac", "--dry-run"], capsys)
    assert code == 0 and len(json.loads(text)["steps"]) == 4 and not out.exists()


def test_synth_ingest_features_split(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    assert run(["synth", "--out", csv, "--steps", 300, "--seed", 2], capsys)[0] == 0
    assert run(["ingest", "--input", csv, "--out", tmp_path / "ing"], capsys)[0] == 0
    summary = json.loads((tmp_path / "ing" / "ingest.json").read_text())
    assert summary["tickers"] == ["SYN0", "SYN1", "SYN2"] and summary["length"] == 300
    assert run(["features", "--input", csv, "--out", tmp_path / "f", "--normalize-phase", 1, "--phases", 1,
                "--span", "60D"], capsys)[0] == 0
    assert (tmp_path / "f" / "features_normalized.csv").is_file()
    assert run(["split", "--input", csv, "--out", tmp_path / "s.json", "--phases", 2, "--span", "60D"], capsys)[0] == 0
    assert len(json.loads((tmp_path / "s.json").read_text())["phases"]) == 2


def test_evaluate_three_records(tmp_path, capsys):
    paths = []
    for i, m in enumerate(("a", "b", "market_average")):
        p = tmp_path / "runs" / f"{m}.json"
        p.parent.mkdir(exist_ok=True)
        p.write_text(make_record(m, seed=0).to_json())
        paths.append(p)
    code, _, err = run(["evaluate", "--runs", *paths, "--out", tmp_path / "metrics.csv"], capsys)
    assert code == 0, err
    table = pd.read_csv(tmp_path / "metrics.csv")
    assert len(table) == 3 and list(table.columns[:4]) == ["method", "market", "phase", "seed"]


def test_score_rank_profile_compass_commands(tmp_path, capsys):
    from conftest import metrics_table
    metrics = tmp_path / "metrics.csv"
    metrics_table(("alphamix", "market_average", "sac")).to_csv(metrics, index=False)
    assert run(["score", "--metrics", metrics, "--out", tmp_path / "sc", "--n-boot", 100], capsys)[0] == 0
    axes = pd.read_csv(tmp_path / "sc" / "axis_scores.csv")
    assert len(axes) == 3 and (axes["explainability"] == 50).all()
    assert run(["rank", "--metrics", metrics, "--out", tmp_path / "r.csv", "--metric", "tr"], capsys)[0] == 0
    assert len(pd.read_csv(tmp_path / "r.csv")) == 9
    assert run(["profile", "--metrics", metrics, "--out", tmp_path / "p.csv", "--n-boot", 50], capsys)[0] == 0
    assert len(pd.read_csv(tmp_path / "p.csv")) == 3 * 101
    assert run(["compass", "--scores", tmp_path / "sc" / "axis_scores.csv", "--out", tmp_path / "c"], capsys)[0] == 0
    assert (tmp_path / "c" / "compass.tex").is_file()
    res = tmp_path / "res.csv"
    res.write_text(compass_csv(8))
    assert run(["compass", "--results", res, "--out", tmp_path / "c8"], capsys)[0] == 0
    bad_template = tmp_path / "t.tex"
    bad_template.write_text("{{nobody.profitability}}")
    code, _, err = run(["compass", "--results", res, "--template", bad_template, "--out", tmp_path / "c9"], capsys)
    assert code == 4 and "nobody.profitability" in json.loads(err)["message"]


def test_train_backtest_heatmap(tiny, capsys):
    out = tiny.parent / "o"
    base = ["--config", tiny, "--out", out, "--phase", 1, "--seed", 0]
    assert run(["train", *base, "--jobs", 1], capsys)[0] == 0
    rec = out / "runs" / "SYN" / "alphamix" / "phase1_seed0.json"
    assert rec.is_file() and (out / "checkpoints" / "SYN" / "alphamix" / "phase1_seed0").is_dir()
    assert run(["backtest", *base, "--method", "alphamix"], capsys)[0] == 0
    assert (out / "backtest" / "test" / "SYN" / "alphamix" / "phase1_seed0.json").read_text() == rec.read_text()
    code, _, err = run(["backtest", "--config", tiny, "--out", out, "--phase", 2, "--seed", 0, "--method", "sac"],
                       capsys)
    assert code == 3, err
    assert run(["heatmap", "--runs", out / "runs", "--out", out / "h.csv", "--config", tiny], capsys)[0] == 0
    assert (out / "h.csv").read_text().splitlines()[0] == "method,cash,SYN0,SYN1,SYN2"
