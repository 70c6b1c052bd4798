"""CLI tests: exit codes, artifacts, verify table."""

import pytest

from fedmask.cli import main

SMALL_TOML = """
[federation]
clients = 6
selection_fraction = 0.5
rounds = 3

[model]
dim = 4
samples_per_client = 20

[run]
seed = 11
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML)
    return str(path)


def test_run_completes(small_config, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", small_config, "--out", str(out)])
    assert code == 0
    captured = capsys.readouterr()
    assert "3/3 rounds completed" in captured.out
    for name in ("transcript.log", "ledger.csv", "trajectory.csv"):
        assert (out / name).exists()


def test_run_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[federation]\nclients = 10\nselection_fraction = 0.1\n")
    code = main(["run", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "below the minimum" in capsys.readouterr().err


def test_run_missing_config(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "nope.toml"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("fault", ["tamper-sig", "reuse-t", "withhold"])
def test_run_injection_exits_nonzero(small_config, tmp_path, capsys, fault):
    out = tmp_path / f"out-{fault}"
    code = main(["run", "--config", small_config, "--out", str(out),
                 "--inject", fault])
    assert code == 3
    captured = capsys.readouterr()
    assert "ABORTED" in captured.out
    assert "first abort" in captured.err


def test_run_seed_override(small_config, tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    out_c = tmp_path / "c"
    assert main(["run", "--config", small_config, "--out", str(out_a)]) == 0
    assert main(["run", "--config", small_config, "--out", str(out_b),
                 "--seed", "99"]) == 0
    assert main(["run", "--config", small_config, "--out", str(out_c)]) == 0
    ledger_a = (out_a / "ledger.csv").read_bytes()
    assert ledger_a != (out_b / "ledger.csv").read_bytes()
    assert ledger_a == (out_c / "ledger.csv").read_bytes()


def test_sweep_c(small_config, tmp_path, capsys):
    out = tmp_path / "sw"
    code = main(["sweep", "c", "--config", small_config, "--out", str(out),
                 "--check"])
    assert code == 0
    assert (out / "sweep_c.csv").exists()
    captured = capsys.readouterr()
    assert "FAIL" not in captured.out
    assert "fraction_sweep_crossover_exists" in captured.out


def test_sweep_rounds(small_config, tmp_path, capsys):
    out = tmp_path / "sw"
    code = main(["sweep", "rounds", "--config", small_config,
                 "--out", str(out), "--check"])
    assert code == 0
    assert (out / "sweep_rounds.csv").exists()
    assert "rounds_sweep_nocache_linear" in capsys.readouterr().out


def test_sweep_def(small_config, tmp_path, capsys):
    out = tmp_path / "sw"
    code = main(["sweep", "def", "--config", small_config,
                 "--out", str(out), "--check"])
    assert code == 0
    assert (out / "sweep_def.csv").exists()
    assert "model_sweep_def_decreasing_in_d" in capsys.readouterr().out


def test_verify_clean(small_config, capsys):
    code = main(["verify", "--config", small_config])
    assert code == 0
    captured = capsys.readouterr()
    assert "6/6 suites passed" in captured.out
    assert "FAIL" not in captured.out


def test_verify_clean_without_cohort_overlap(capsys):
    # with the default config, seed 5 gives rounds 0 and 1 disjoint
    # cohorts; replay detection must not depend on who gets re-selected
    code = main(["verify", "--seed", "5"])
    assert code == 0
    captured = capsys.readouterr()
    assert "6/6 suites passed" in captured.out


def test_verify_tamper_injection_bites(small_config, capsys):
    code = main(["verify", "--config", small_config,
                 "--inject", "tamper-sig"])
    assert code == 3
    captured = capsys.readouterr()
    assert "FAIL  tamper" in captured.out


def test_verify_replay_injection_bites(small_config, capsys):
    code = main(["verify", "--config", small_config, "--inject", "reuse-t"])
    assert code == 3
    captured = capsys.readouterr()
    assert "FAIL  replay" in captured.out
    assert "PASS  cancellation" in captured.out
