import numpy as np
import pytest

from slbp import cli
from slbp.config import ConfigError, parse_config
from slbp.experiments import THEOREM_TAGS, ExperimentResult, Table, run_experiment, write_result
from slbp.ratefit import fit_rate

EPS = [1 / 8, 1 / 16, 1 / 32, 1 / 64]


def test_fit_rate_exact_power():
    f = fit_rate(EPS, [e ** 2 for e in EPS])
    assert abs(f.slope - 2.0) < 1e-10 and f.residual < 1e-12


def test_fit_rate_constant():
    assert abs(fit_rate(EPS, [0.3] * 4).slope) < 1e-12


def test_fit_rate_noisy_power(rng):
    eps = np.geomspace(1 / 8, 1 / 128, 5)
    f = fit_rate(eps, eps ** 1.5 * (1 + 0.05 * rng.standard_normal(5)))
    assert 1.3 <= f.slope <= 1.7
    assert f.lower() < f.slope


def test_fit_rate_bootstrap(rng):
    eps = np.array(EPS[:3])
    reps = [e * (1 + 0.1 * rng.standard_normal(500)) for e in eps]
    f = fit_rate(eps, replica_values=reps, n_boot=400, seed=3)
    assert abs(f.slope - 1.0) < 0.05 and 0 < f.halfwidth < 0.1
    assert fit_rate(eps, replica_values=reps, n_boot=400, seed=3).halfwidth == f.halfwidth


def test_fit_rate_errors():
    with pytest.raises(ValueError):
        fit_rate(EPS, [1.0, 0.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        fit_rate(EPS, [1.0, -1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        fit_rate(EPS[:2], [1.0, 2.0])
    with pytest.raises(ValueError):
        fit_rate(EPS)


def test_config_parsing():
    cfg = parse_config("experiment = simulate  # comment\nseed = 4\nepsilon = 1/16, 1/32\n\nreplicas = 10 20\n")
    assert cfg.epsilon == [1 / 16, 1 / 32] and cfg.replicas == [10, 20] and cfg.seed == 4
    assert cfg.source["epsilon"] == 3
    assert ("epsilon", "0.0625, 0.03125") in cfg.echo()


@pytest.mark.parametrize("text, line, key", [
    ("experiment = simulate\nseed = 1\nfoo = 2\n", 3, "foo"),
    ("experiment = simulate\nseed = 1\nseed = 2\n", 3, "seed"),
    ("experiment = simulate\nseed = x\n", 2, "seed"),
    ("experiment = simulate\nseed = 1\nepsilon = 2\n", 3, "epsilon"),
    ("experiment = simulate\nseed = 1\nkappa =\n", 3, "kappa"),
    ("experiment = simulate\nseed = 1\njust words\n", 3, None),
    ("experiment = simulate\n", None, "seed"),
    ("experiment = teleport\nseed = 1\n", 1, "experiment"),
    ("experiment = simulate\nseed = 1\nepsilon = 1/8, 1/16\nreplicas = 1, 2, 3\n", 4, "replicas"),
    ("experiment = vfunc-scan\nseed = 1\nt = 0.5\nwindow = 0.6\n", 4, "window"),
])
def test_config_errors_carry_location(text, line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line and info.value.key == key


def test_subcommand_must_match():
    with pytest.raises(ConfigError):
        parse_config("experiment = fkpp\nseed = 1\n", "simulate")
    assert parse_config("seed = 1\n", "fkpp").experiment == "fkpp"


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_cli_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, "seed = 1\nepsilon = 1/8\n", "g.cfg")
    assert cli.main(["green-check", "--config", good, "--out", str(tmp_path / "g"), "--quiet"]) == 0
    assert (tmp_path / "g" / "manifest.txt").exists()
    bad = _write(tmp_path, "seed = 1\nepsilon = 0\n", "b.cfg")
    assert cli.main(["green-check", "--config", bad, "--out", str(tmp_path / "b")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert not (tmp_path / "b").exists()
    assert cli.main(["green-check", "--config", str(tmp_path / "missing.cfg")]) == 2
    # the coefficient check reports the 3 eps^kappa clause as a failed check
    coeff = _write(tmp_path, "seed = 2\nepsilon = 1/16\nkappa = 0.25\nresidual_replicas = 200\n", "c.cfg")
    out = tmp_path / "c"
    assert cli.main(["coeff-check", "--config", coeff, "--out", str(out), "--quiet"]) == 0
    assert cli.main(["coeff-check", "--config", coeff, "--out", str(out), "--quiet", "--strict"]) == 3
    assert cli.main(["coeff-check", "--config", coeff, "--out", str(out), "--quiet", "--seed", "-1"]) == 2


def test_manifest_contents(tmp_path):
    cfg = _write(tmp_path, "experiment = green-check\nseed = 9\nepsilon = 1/8\n")
    out = tmp_path / "o"
    assert cli.main(["green-check", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    text = (out / "manifest.txt").read_text()
    for needle in ("experiment: green-check", "theorem_tags: LLN", "seed: 9", "wall_time_s:", "numpy=",
                   "[config]", "epsilon = 0.125", "[checks]", "green_report.csv"):
        assert needle in text
    assert sorted(p.name for p in out.iterdir()) == sorted(
        ["checks.csv", "green_estimate.csv", "green_estimate.gp", "green_report.csv", "manifest.txt"])


def test_every_experiment_has_tags():
    from slbp.config import EXPERIMENTS
    assert set(THEOREM_TAGS) == set(EXPERIMENTS)
    tags = {t for v in THEOREM_TAGS.values() for t in v}
    assert tags == {"LLN", "QLLN-n1", "QLLN-n2", "QLLN-n3", "CLT", "BGP"}


def test_write_result_is_all_or_nothing(tmp_path, monkeypatch):
    cfg = parse_config("experiment = simulate\nseed = 1\n")
    res = ExperimentResult("simulate", ["LLN"], [Table("a", ["x"], [(1.0,)]), Table("b", ["y"], [(2,)])])
    from slbp import experiments
    real = experiments.table_csv
    calls = []

    def flaky(t):
        calls.append(t.name)
        if t.name == "b":
            raise OSError("disk full")
        return real(t)

    monkeypatch.setattr(experiments, "table_csv", flaky)
    with pytest.raises(OSError):
        write_result(cfg, res, tmp_path / "w", 1, 0.0)
    assert list((tmp_path / "w").iterdir()) == []


def test_rerun_is_byte_identical(tmp_path):
    text = "seed = 5\nepsilon = 1/16\nkappa = 0.25\nreplicas = 40\ntimes = 0.1, 0.2\nrho0 = cos:1:0.5:1\n"
    cfg = _write(tmp_path, text)
    dirs = []
    for jobs in (1, 8, 1):
        d = tmp_path / f"o{len(dirs)}"
        assert cli.main(["simulate", "--config", cfg, "--out", str(d), "--jobs", str(jobs), "--quiet"]) == 0
        dirs.append(d)
    for name in ("trajectories.csv", "mean_field.csv", "checks.csv"):
        blobs = {(d / name).read_bytes() for d in dirs}
        assert len(blobs) == 1, name


def test_run_experiment_dispatch():
    res = run_experiment(parse_config("experiment = green-check\nseed = 1\nepsilon = 1/8\n"))
    assert res.passed and res.table("green_report").rows
