import numpy as np
import pytest

from sector_dmrg.bench import (
    BenchRecord, fit_power_law, read_csv, run_checks, write_csv,
)
from sector_dmrg.cli import (
    ConfigError, RunConfig, build_config, cli_run, load_config_file,
    make_parser,
)
from oracles import heisenberg_dense


# --------------------------------------------------------------- fit_power_law

def test_fit_exact_cubic():
    fit = fit_power_law([(1, 1), (2, 8), (4, 64)])
    assert abs(fit.exponent - 3.0) < 1e-9
    assert abs(fit.prefactor - 1.0) < 1e-9
    assert abs(fit.r_squared - 1.0) < 1e-12


def test_fit_constant_zero_variance_convention():
    fit = fit_power_law([(1, 5.0), (2, 5.0), (4, 5.0)])
    assert abs(fit.exponent) < 1e-12
    assert fit.r_squared == 1.0


def test_fit_noisy_cpu_regime_exponent():
    rng = np.random.default_rng(59)
    xs = np.array([64, 128, 256, 512, 1024, 2048], dtype=float)
    ts = 3.0 * xs ** 2.24 * np.exp(rng.normal(0.0, 0.01, size=xs.size))
    fit = fit_power_law(list(zip(xs, ts)))
    assert abs(fit.exponent - 2.24) <= 0.05


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_power_law([(1, 1), (2, 4)])
    with pytest.raises(ValueError):
        fit_power_law([(1, 1), (2, 4), (0, 9)])
    with pytest.raises(ValueError):
        fit_power_law([(1, 1), (2, 4), (3, -9)])


def test_fit_synthetic_exact_recovery_sweep():
    for exponent in (0.5, 1.0, 2.0, 2.43, 2.53):
        xs = [2.0 ** k for k in range(8)]
        pts = [(x, 0.7 * x ** exponent) for x in xs]
        fit = fit_power_law(pts)
        assert abs(fit.exponent - exponent) < 1e-9


# ------------------------------------------------------------------------- csv

def test_csv_empty_records(tmp_path):
    path = str(tmp_path / "empty.csv")
    write_csv([], path)
    assert open(path).read() == "label,size,seconds,flops,gflops\n"


def test_csv_single_record_two_lines(tmp_path):
    path = str(tmp_path / "one.csv")
    write_csv([BenchRecord("x", 4, 0.5, 1000)], path)
    lines = open(path).read().splitlines()
    assert len(lines) == 2


def test_csv_round_trip_lossless(tmp_path):
    rng = np.random.default_rng(61)
    records = [BenchRecord(f"l{i}", float(rng.uniform(1, 1e6)),
                           float(rng.uniform(1e-9, 1e3)),
                           int(rng.integers(1, 10 ** 12)))
               for i in range(20)]
    path = str(tmp_path / "rt.csv")
    write_csv(records, path)
    back = read_csv(path)
    for a, b in zip(records, back):
        assert (a.label, a.size, a.seconds, a.flops) == \
            (b.label, b.size, b.seconds, b.flops)


# ------------------------------------------------------------------------- cli

def test_cli_solve_matches_ed(tmp_path, capsys):
    out = str(tmp_path / "sweeps.csv")
    code = cli_run(["solve", "--model", "heisenberg", "--n", "8",
                    "--d", "16", "--sweeps", "3", "--out", out])
    captured = capsys.readouterr()
    assert code == 0
    energy = float(captured.out.split()[-1])
    e_ref = np.linalg.eigvalsh(heisenberg_dense(8))[0]
    assert abs(energy - e_ref) / abs(e_ref) <= 1e-8
    lines = open(out).read().splitlines()
    assert lines[0].startswith("sweep,position,direction,energy")
    assert len(lines) > 10


def test_cli_checkpoint_and_resume(tmp_path, capsys):
    ck = str(tmp_path / "run.ckpt")
    code = cli_run(["solve", "--model", "heisenberg", "--n", "6", "--d", "8",
                    "--sweeps", "1", "--checkpoint", ck, "--seed", "5"])
    assert code == 0
    first = float(capsys.readouterr().out.split()[-1])
    code = cli_run(["solve", "--model", "heisenberg", "--n", "6", "--d", "8",
                    "--sweeps", "3", "--checkpoint", ck, "--resume",
                    "--seed", "5"])
    assert code == 0
    final = float(capsys.readouterr().out.split()[-1])
    e_ref = np.linalg.eigvalsh(heisenberg_dense(6))[0]
    assert final <= first + 1e-9
    assert abs(final - e_ref) / abs(e_ref) <= 1e-9


def test_cli_unknown_subcommand_exits_2(capsys):
    assert cli_run(["frobnicate"]) == 2


def test_cli_config_error_exits_2(capsys):
    assert cli_run(["solve", "--model", "file"]) == 2


def test_cli_fit_subcommand(tmp_path, capsys):
    path = str(tmp_path / "cubic.csv")
    write_csv([BenchRecord("t", x, 2.0 * x ** 2, 1) for x in (1, 2, 4, 8)],
              path)
    assert cli_run(["fit", path]) == 0
    out = capsys.readouterr().out
    assert "exponent 2.000000" in out


def test_cli_check_subcommand(capsys):
    assert cli_run(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_config_file_and_flag_override(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# run settings\nmodel = heisenberg\nn = 10\nd = 24\n"
                    "sweeps = 4\nseed = 9\n")
    parser = make_parser()
    args = parser.parse_args(["solve", "--config", str(path), "--n", "6"])
    config = build_config(args)
    assert config.n == 6                 # flag wins
    assert config.d == "24"
    assert config.sweeps == 4
    assert config.seed == 9


def test_config_file_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("banana = 3\n")
    with pytest.raises(ConfigError):
        load_config_file(str(path))


def test_workers_env_fallback(monkeypatch):
    config = RunConfig()
    monkeypatch.delenv("SECTOR_DMRG_WORKERS", raising=False)
    assert config.resolved_workers() == 1
    monkeypatch.setenv("SECTOR_DMRG_WORKERS", "3")
    assert config.resolved_workers() == 3
    config_flag = RunConfig(workers=2)
    assert config_flag.resolved_workers() == 2
    monkeypatch.setenv("SECTOR_DMRG_WORKERS", "zebra")
    with pytest.raises(ConfigError):
        config.resolved_workers()


def test_target_and_d_parsing():
    config = RunConfig(d="32,64", target="4,0")
    assert config.d_list() == [32, 64]
    assert config.target_qn() == (4, 0)
    with pytest.raises(ConfigError):
        RunConfig(d="x").d_list()
    with pytest.raises(ConfigError):
        RunConfig(target="a,b").target_qn()


def test_run_checks_all_pass():
    results = run_checks(seed=1)
    assert all(ok for _name, ok, _detail in results)
