import io

import numpy as np
import pytest

from cemtd import cli
from cemtd import harness as h
from cemtd.environments import ENV_NAMES


def _run_text(cfg):
    traces = h.run_experiment(cfg, write=False)
    return {a: h.format_csv(trs, cfg, a) for a, trs in traces.items()}


def _data_lines(text):
    return [ln for ln in text.splitlines() if not ln.startswith("#")]


# --- configuration ------------------------------------------------------------------

def test_env_tables_are_selected_automatically():
    cfg = h.make_config("baird")
    assert (cfg.c, cfg.epsilon1, cfg.alpha, cfg.beta) == (0.01, 0.8, "0.001", "0.05")
    cfg = h.make_config("vanroy")
    assert (cfg.alpha, cfg.beta, cfg.r_shape, cfg.epsilon1) == ("1/t", "0.9", 1e-6, 0.95)
    assert h.make_config("random-fourier").c == h.make_config("ring10").c == 0.075


def test_precedence_file_explicit_override():
    cfg = h.make_config("ring10", {"c": "0.2", "iters": "50", "trials": "3"},
                        {"c": "0.3"}, iters=70)
    assert cfg.c == 0.3 and cfg.iters == 70 and cfg.trials == 3
    assert cfg.overrides == ("c=0.3",)
    text = h.format_csv([], cfg, "sce-mspbem")
    assert "# c=0.3\n" in text and "# overrides=c=0.3\n" in text


def test_parse_config_text():
    got = h.parse_config_text("# comment\nc = 0.2  # trailing\n\nlambda-mix=0.5\n")
    assert got == {"c": "0.2", "lambda_mix": "0.5"}
    with pytest.raises(h.ConfigError):
        h.parse_config_text("no equals sign")


@pytest.mark.parametrize("kw", [dict(env="nowhere"), dict(algos=("magic",)), dict(trials=0),
                                dict(rho=1.5), dict(ls_epsilon=0.0), dict(alpha="fast"),
                                dict(sigma0=float("nan")), dict(mu0="nan"), dict(z0="1,x")])
def test_config_errors(kw):
    env = kw.pop("env", "ring10")
    with pytest.raises(h.ConfigError):
        h.make_config(env, **kw)


def test_unknown_override_rejected():
    with pytest.raises(h.ConfigError):
        h.make_config("ring10", overrides={"colour": "red"})


# --- runs and CSV -------------------------------------------------------------------

def test_zero_iterations_give_header_only():
    cfg = h.make_config("ring10", iters=0, trials=1)
    text = _run_text(cfg)["sce-mspbem"]
    assert _data_lines(text) == [",".join(h.CSV_COLUMNS)]


def test_same_seed_is_byte_identical(tmp_path):
    paths = []
    for i in range(2):
        out = str(tmp_path / f"run{i}.csv")
        cfg = h.make_config("ring10", algos=("sce-mspbem", "gtd2", "rg"), iters=3000,
                            trials=2, record_every=500, seed=4, out=out)
        h.run_experiment(cfg)
        paths.append(out)
    for algo in ("sce-mspbem", "gtd2", "rg"):
        a = open(h.output_path(paths[0], algo, 3)).read().replace("run0", "run1")
        b = open(h.output_path(paths[1], algo, 3)).read()
        assert a == b
    cfg = h.make_config("ring10", iters=3000, trials=2, record_every=500, seed=5)
    other = _run_text(cfg)["sce-mspbem"]
    assert _data_lines(other) != _data_lines(open(h.output_path(paths[0], "sce-mspbem",
                                                                   3)).read())


def test_trace_shape_and_round_trip():
    cfg = h.make_config("baird-imperfect", algos=("sce-mspbem", "lstd"), iters=2000,
                        trials=2, record_every=250)
    traces = h.run_experiment(cfg, write=False)
    for algo, trs in traces.items():
        rows = h.read_csv(h.format_csv(trs, cfg, algo))
        assert len(rows) == 2 * 9
        assert [int(r["trial"]) for r in rows] == [0] * 9 + [1] * 9
        t = np.array([int(r["t"]) for r in rows[:9]])
        assert np.all(np.diff(t) == 250) and t[0] == 0
        mse = np.array([float(r["sqrt_mse"]) for r in rows[:9]])
        assert np.array_equal(mse, trs[0].sqrt_mse)


def test_trials_use_independent_streams():
    a = h.trial_rng(0, 0, "td0").random(4)
    assert not np.array_equal(a, h.trial_rng(0, 1, "td0").random(4))
    assert not np.array_equal(a, h.trial_rng(1, 0, "td0").random(4))
    assert not np.array_equal(a, h.trial_rng(0, 0, "gtd2").random(4))
    assert np.array_equal(a, h.trial_rng(0, 0, "td0").random(4))


def test_output_path():
    assert h.output_path("x.csv", "td0", 1) == "x.csv"
    assert h.output_path("x.csv", "td0", 2) == "x.td0.csv"
    assert h.output_path("x", "td0", 2) == "x.td0"


def test_unsupported_combinations_are_config_errors():
    for env, algo in (("vanroy", "sce-mspbem"), ("baird-nl", "lstd"), ("cartpole", "rg")):
        cfg = h.make_config(env, algos=(algo,), iters=10, trials=1)
        with pytest.raises(h.ConfigError):
            h.run_experiment(cfg, write=False)


# --- averaging ----------------------------------------------------------------------

def _trace(trial, values, diverged=None):
    t = np.arange(len(values)) * 10
    v = np.asarray(values, dtype=float)
    return h.TrialTrace(trial, t, v, v, v, v, v,
                        np.zeros(len(v), bool) if diverged is None else diverged)


def test_average_examples():
    a = _trace(0, [1.0, 2.0])
    avg = h.average_trials([a, a])
    assert np.array_equal(avg.mean["sqrt_mse"], [1.0, 2.0])
    assert np.array_equal(avg.var["sqrt_mse"], [0.0, 0.0])
    avg = h.average_trials([_trace(0, [1.0]), _trace(1, [3.0], np.array([True]))])
    assert avg.mean["sqrt_mse"][0] == 2.0 and avg.n_diverged[0] == 1


def test_average_rejects_mismatched_cadence():
    with pytest.raises(ValueError):
        h.average_trials([_trace(0, [1.0, 2.0]), _trace(1, [1.0])])
    with pytest.raises(ValueError):
        h.average_trials([])


def test_baird_variance_matches_independent_pass():
    cfg = h.make_config("baird", algos=("gtd2",), iters=20_000, trials=10, record_every=2000)
    trs = h.run_experiment(cfg, write=False)["gtd2"]
    avg = h.average_trials(trs)
    stack = np.array([tr.sqrt_mse for tr in trs])
    n = len(trs)
    mean = [sum(col) / n for col in stack.T]
    var = [sum((x - m) ** 2 for x in col) / n for col, m in zip(stack.T, mean)]
    assert np.all(np.isfinite(avg.var["sqrt_mse"]))
    assert np.allclose(avg.var["sqrt_mse"], var, rtol=1e-12, atol=1e-15)


def test_baird_ordering_at_reduced_budget():
    """Averaged curves at 2e5 steps: lstd <= sce-mspbem < gtd2 and TD(0) flagged."""
    cfg = h.make_config("baird", algos=("sce-mspbem", "td0", "gtd2", "lstd"),
                        iters=200_000, trials=2, record_every=10_000, td_alpha="0.1")
    avg = {a: h.average_trials(t) for a, t in h.run_experiment(cfg, write=False).items()}
    final = {a: v.mean["sqrt_mse"][-1] for a, v in avg.items()}
    assert final["lstd"] <= final["sce-mspbem"] < final["gtd2"]
    assert avg["td0"].n_diverged[-1] == 2


# --- command line -------------------------------------------------------------------

def test_cli_list():
    out = io.StringIO()
    assert cli.main(["list"], out) == 0
    text = out.getvalue()
    assert sum(f"  {n}\n" in text for n in ENV_NAMES) == len(ENV_NAMES) == 10
    assert "  sce-msbrm\n" in text


def test_cli_oracle_baird():
    out = io.StringIO()
    assert cli.main(["oracle", "--env", "baird"], out) == 0
    line = [ln for ln in out.getvalue().splitlines() if ln.startswith("V=")][0]
    assert np.array_equal([float(x) for x in line[3:-1].split(",")], np.zeros(7))
    out = io.StringIO()
    assert cli.main(["oracle", "--env", "cartpole"], out) == 0
    assert "value_weights=" in out.getvalue()


def test_cli_run_stdout_and_files(tmp_path):
    out = io.StringIO()
    argv = ["run", "--env", "ring10", "--algo", "td0,lstd", "--iters", "1000", "--trials",
            "2", "--param", "record_every=250"]
    assert cli.main(argv, out) == 0
    text = out.getvalue()
    assert text.count(",".join(h.CSV_COLUMNS)) == 2
    assert "# overrides=record_every=250" in text
    csv_path, avg_path = tmp_path / "a.csv", tmp_path / "avg.csv"
    argv = ["run", "--env", "ring10", "--iters", "1000", "--trials", "2", "--out",
            str(csv_path), "--average", str(avg_path)]
    assert cli.main(argv, io.StringIO()) == 0
    assert len(h.read_csv(csv_path.read_text())) == 2 * 3
    assert avg_path.read_text().startswith("t,mean_sqrt_mse")


def test_cli_config_file_and_seed_fallback(tmp_path, monkeypatch):
    conf = tmp_path / "run.conf"
    conf.write_text("iters=500\ntrials=1\nrecord_every=100\n")
    base = ["run", "--env", "ring10", "--config", str(conf)]
    monkeypatch.setenv("CEMTD_SEED", "7")
    a = io.StringIO()
    assert cli.main(base, a) == 0
    assert "# seed=7\n" in a.getvalue() and "# iters=500\n" in a.getvalue()
    b = io.StringIO()
    assert cli.main(base + ["--seed", "7"], b) == 0
    assert a.getvalue() == b.getvalue()
    monkeypatch.setenv("CEMTD_SEED", "seven")
    assert cli.main(base, io.StringIO()) == 2


@pytest.mark.parametrize("argv", [["run", "--env", "nowhere"],
                                  ["run", "--env", "ring10", "--param", "rho=2"],
                                  ["run", "--env", "ring10", "--param", "novalue"],
                                  ["run", "--env", "ring10", "--config", "/missing/file"],
                                  ["oracle", "--env", "nowhere"], ["frobnicate"]])
def test_cli_config_errors_exit_2(argv):
    assert cli.main(argv, io.StringIO()) == 2


def test_cli_numerical_abort_exit_3():
    argv = ["run", "--env", "ring10", "--iters", "100", "--trials", "1", "--param",
            "mu0=1e300"]
    assert cli.main(argv, io.StringIO()) == 3


@pytest.mark.xfail(strict=True, reason="SCE on the spiral family stalls near 72 at the "
                                        "tabled constants; see the decision ledger")
def test_cli_vanroy_reaches_small_error():
    out = io.StringIO()
    assert cli.main(["run", "--env", "vanroy", "--algo", "sce-msbrm", "--trials", "1"],
                    out) == 0
    assert float(h.read_csv(out.getvalue())[-1]["sqrt_mse"]) < 0.5
