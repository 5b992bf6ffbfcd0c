from __future__ import annotations

import json
import math

import numpy as np
import pytest

from meanfield import cli
from meanfield import experiments as ex
from meanfield.cli import (EXIT_ERROR, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_PASS, ConfigError,
                           canonical_json, dispatch, main, parse_config, parse_config_text)

LAM_UNIT = (2 * math.pi) ** (-1 / 6)

SMALL_EXPERIMENT = {"grid": [8], "n_steps": 3, "replications": 8, "ref_nodes": 128}


def write_config(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj), encoding="utf-8")
    return p


def test_defaults():
    cfg = parse_config_text("{}")
    assert cfg.params.alpha == 0.3 and cfg.params.delta == 0.05
    assert np.array_equal(cfg.params.A, 0.5 * np.eye(1))
    assert cfg.experiment.grid == (64, 128, 256, 512, 1024)
    assert cfg.experiment.replications == 32 and cfg.seed == 0 and cfg.output_dir == "results"
    assert cfg.params.P.family.value == "gaussian" and cfg.params.P.bandwidth == 1.0


def test_alpha_out_of_range():
    with pytest.raises(ConfigError) as err:
        parse_config_text('{"model": {"alpha": 1.5}}')
    assert any("alpha ∈ (0,1)" in e for e in err.value.errors)


def test_all_errors_reported():
    text = json.dumps({"model": {"alpha": 0.0, "delta": -1, "P": {"bandwidth": 0}},
                       "experiment": {"replications": 2, "grid": [4, 2]}, "bogus": 1})
    with pytest.raises(ConfigError) as err:
        parse_config_text(text)
    assert any("bogus" in e for e in err.value.errors)
    # unknown keys stop validation; without them every range violation is listed
    obj = json.loads(text)
    obj.pop("bogus")
    with pytest.raises(ConfigError) as err:
        parse_config_text(json.dumps(obj))
    msgs = "\n".join(err.value.errors)
    for frag in ("alpha", "delta > 0", "λ > 0", "replications >= 8", "strictly increasing"):
        assert frag in msgs
    assert len(err.value.errors) == 5


def test_syntax_error_has_line_context():
    with pytest.raises(ConfigError) as err:
        parse_config_text('{\n  "seed": 1,\n  "model": {"alpha": }\n}', "cfg.json")
    msg = err.value.errors[0]
    assert msg.startswith("cfg.json:3:")
    assert '"model": {"alpha": }' in msg


def test_canonical_round_trip(tmp_path):
    cfg = parse_config(write_config(tmp_path, {"model": {"A": [[0.2, 0.1], [0.0, 0.3]], "dim": 2},
                                               "seed": 17, "experiment": {"grid": [4, 9]}}))
    text = canonical_json(cfg)
    again = parse_config_text(text)
    assert again == cfg
    assert canonical_json(again) == text
    assert np.array_equal(again.params.A, cfg.params.A)


def test_rates_needs_three_grid_points(tmp_path):
    cfg = parse_config_text(json.dumps({"experiment": {"grid": [64]}, "output": {"dir": str(tmp_path)}}))
    with pytest.raises(ConfigError):
        dispatch("rates", cfg)
    assert main(["rates", "--config", str(write_config(tmp_path, {"experiment": {"grid": [64]}})),
                 "--out", str(tmp_path / "o")]) == EXIT_ERROR
    assert not (tmp_path / "o").exists()


def test_stability_hand_instance(tmp_path, capsys):
    conf = {"model": {"A": 0.2, "delta": 0.05, "alpha": 0.1,
                      "P": {"bandwidth": LAM_UNIT}, "P_dep": {"bandwidth": LAM_UNIT}}}
    out = tmp_path / "out"
    assert main(["stability", "--config", str(write_config(tmp_path, conf)), "--out", str(out)]) == EXIT_PASS
    rows = dict(line.split(",", 1) for line in (out / "stability.csv").read_text().splitlines()[1:])
    assert float(rows["C1"]) == pytest.approx(0.075, abs=1e-12)
    assert float(rows["chi1"]) == pytest.approx(0.12, abs=1e-12)
    man = json.loads((out / "stability.json").read_text())
    assert man["report"]["chi1"] == pytest.approx(0.12, abs=1e-12)
    assert "chi1" in capsys.readouterr().out


def test_simulate_byte_identical(tmp_path):
    conf = write_config(tmp_path, {"experiment": SMALL_EXPERIMENT})
    for d in ("a", "b"):
        assert main(["simulate", "--config", str(conf), "--seed", "42", "--threads", "2",
                     "--out", str(tmp_path / d)]) == EXIT_PASS
    for f in ("simulate.csv", "simulate.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    main(["simulate", "--config", str(conf), "--seed", "43", "--out", str(tmp_path / "c")])
    assert (tmp_path / "c" / "simulate.csv").read_bytes() != (tmp_path / "a" / "simulate.csv").read_bytes()


def test_exit_codes_follow_verdicts(tmp_path, monkeypatch):
    cfg = parse_config_text(json.dumps({"experiment": SMALL_EXPERIMENT, "output": {"dir": str(tmp_path)}}))
    for verdict, code in ((ex.PASS, EXIT_PASS), (ex.INCONCLUSIVE, EXIT_INCONCLUSIVE), (ex.FAIL, EXIT_FAIL)):
        res = ex.ExperimentResult("contract", ["n"], [{"n": 0}], verdicts={"rate": verdict})
        monkeypatch.setitem(cli._RUNNERS, "contract", lambda c, res=res: res)
        assert dispatch("contract", cfg) == code
    assert main(["contract", "--config", str(tmp_path / "missing.json")]) == EXIT_ERROR


def test_runtime_error_exit_and_no_partial_output(tmp_path, monkeypatch):
    def boom(cfg):
        raise FloatingPointError("diverged")

    monkeypatch.setitem(cli._RUNNERS, "moments", boom)
    out = tmp_path / "out"
    assert main(["moments", "--out", str(out)]) == EXIT_ERROR
    assert not out.exists() or not any(out.iterdir())


def test_atomic_write_leaves_nothing_on_failure(tmp_path, monkeypatch):
    real = cli.os.fdopen
    calls = {"n": 0}

    def flaky(fd, *a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            cli.os.close(fd)
            raise OSError("disk full")
        return real(fd, *a, **k)

    monkeypatch.setattr(cli.os, "fdopen", flaky)
    files = {tmp_path / "x.csv": "a\n", tmp_path / "x.json": "{}\n"}
    with pytest.raises(OSError):
        cli._atomic_write_all(files)
    assert list(tmp_path.iterdir()) == []


def test_thread_resolution(monkeypatch):
    monkeypatch.setenv("MEANFIELD_THREADS", "3")
    assert cli._threads(None) == 3
    assert cli._threads(5) == 5
    monkeypatch.setenv("MEANFIELD_THREADS", "zero")
    with pytest.raises(ConfigError):
        cli._threads(None)


def test_config_subcommand_prints_canonical(capsys):
    assert main(["config", "--seed", "9"]) == EXIT_PASS
    text = capsys.readouterr().out
    assert json.loads(text)["seed"] == 9
    assert parse_config_text(text).seed == 9


def test_bad_flags_exit_one():
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--seed", "-1"])
    assert err.value.code == EXIT_ERROR
    with pytest.raises(SystemExit) as err:
        main(["nonsense"])
    assert err.value.code == EXIT_ERROR
