import json
import math

import numpy as np
import pytest

from ucosdot import cli, pipeline
from ucosdot.config import ConfigError, config_digest, default_config, load_config
from ucosdot.ensemble import (SampleEnsemble, ensemble_stats, read_ensemble, write_ensemble)
from ucosdot.gaussian import analytic_posterior
from ucosdot.operator import DimensionError

TINY = """
[problem]
grid = 8
data_grid = 0
truth = phantom:3
[diffusion]
n_steps = 20
[network]
width = 4
depth = 1
n_modes = 2
[training]
n_phantoms = 12
epochs = 1
batch_size = 4
[sampling]
samples = 3
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# digest ")
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


def test_help_and_bad_flags():
    assert run("--help") == cli.EXIT_OK
    assert run("no-such-command") == cli.EXIT_USAGE
    assert run("sample", "--method", "bogus") == cli.EXIT_USAGE


def test_config_errors_name_the_field(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    for text, field in [("[sampling]\nalpha = 2\n", "sampling.alpha"),
                        ("[problem]\ngrid = abc\n", "problem.grid"),
                        ("[network]\nfoo = 1\n", "network.foo"),
                        ("[nope]\nx = 1\n", "nope")]:
        bad.write_text(text)
        assert run("gen-data", "--config", bad, "--out", tmp_path) == cli.EXIT_USAGE
        assert field in capsys.readouterr().err
    assert run("gen-data", "--config", tmp_path / "missing.ini") == cli.EXIT_USAGE
    assert run("sample", "--config", bad, "--alpha", "1.5") == cli.EXIT_USAGE


def test_config_defaults_and_digest():
    cfg = load_config(text="")
    assert cfg == default_config()
    assert cfg["diffusion"]["t_min"] == 0.005
    assert cfg["diffusion"]["n_steps"] == 500
    assert cfg["sampling"]["samples"] == 100
    assert config_digest(cfg) == config_digest(load_config(text=""))
    assert config_digest(cfg) != config_digest(load_config(text="[sampling]\nseed = 1\n"))
    with pytest.raises(ConfigError, match="diffusion.t_min"):
        load_config(text="[diffusion]\nt_min = 2\n")


def test_numerical_failure_exit_code(monkeypatch, tiny):
    import ucosdot.verify as verify

    monkeypatch.setattr(verify, "run_all", lambda: [("fake", False, "forced failure")])
    assert run("verify", "--config", tiny) == cli.EXIT_NUMERICAL


def test_sample_without_checkpoint_is_usage_error(tiny, tmp_path):
    assert run("sample", "--config", tiny, "--out", tmp_path, "--method", "ucos") == cli.EXIT_USAGE


def test_gaussian_sampling_matches_analytic_posterior(tiny, tmp_path):
    n = 4000
    assert run("sample", "--config", tiny, "--out", tmp_path, "--method", "gaussian",
               "--samples", n) == cli.EXIT_OK
    ens = read_ensemble(tmp_path / "ensemble-gaussian.spens")
    cfg = load_config(tiny)
    cfg["sampling"].update(method="gaussian", samples=n)
    setup = pipeline.build_setup(cfg)
    post = analytic_posterior(setup.problem.A, setup.problem.gamma_obs, setup.prior[0],
                              setup.prior[1], setup.problem.y)
    std = np.sqrt(np.diag(post.covariance.to_dense())).reshape(post.mean.shape)
    z = (ens.samples.mean(0) - post.mean) / (std / math.sqrt(n))
    # 128 pixels; 4.5 standard errors leaves the family-wise false alarm rate below 1e-3
    assert np.abs(z).max() < 4.5
    assert abs(ens.samples.std(0).mean() / std.mean() - 1) < 0.03
    assert ens.config_digest == config_digest(cfg)
    np.testing.assert_array_equal(ens.truth, setup.truth)


def handcrafted(tmp_path, name, samples, digest="d1", truth=None):
    path = tmp_path / name
    write_ensemble(path, SampleEnsemble(np.asarray(samples, dtype=float), "gaussian", 0, digest,
                                        truth=truth))
    return path


def test_stats_two_point_ensemble(tmp_path):
    shape = (2, 3, 3)
    path = handcrafted(tmp_path, "pair.spens", [np.zeros(shape), np.full(shape, 2.0)],
                       truth=np.full(shape, 0.5))
    assert run("stats", path, "--out", tmp_path) == cli.EXIT_OK
    for ch in range(2):
        np.testing.assert_array_equal(read_csv(tmp_path / f"pair-mean-ch{ch}.csv"), 1.0)
        np.testing.assert_array_equal(read_csv(tmp_path / f"pair-std-ch{ch}.csv"), 1.0)
        np.testing.assert_array_equal(read_csv(tmp_path / f"pair-bias-ch{ch}.csv"), 0.5)
        pgm = (tmp_path / f"pair-mean-ch{ch}.pgm").read_bytes()
        assert pgm.startswith(b"P5\n# digest d1\n")
        assert len(pgm.split(b"65535\n", 1)[1]) == 2 * 9


def test_stats_physical_units(tmp_path):
    shape = (2, 2, 2)
    path = handcrafted(tmp_path, "p.spens", [np.zeros(shape), np.ones(shape)])
    assert run("stats", path, "--physical", "--out", tmp_path) == cli.EXIT_OK
    np.testing.assert_allclose(read_csv(tmp_path / "p-mean-ch0.csv"), 0.0, atol=1e-15)
    np.testing.assert_allclose(read_csv(tmp_path / "p-std-ch0.csv"), 0.01)
    np.testing.assert_allclose(read_csv(tmp_path / "p-std-ch1.csv"), 1.0)
    assert not (tmp_path / "p-bias-ch0.csv").exists()


def test_stats_refuses_mixed_digests(tmp_path, capsys):
    a = handcrafted(tmp_path, "a.spens", np.zeros((2, 2, 2, 2)), "d1")
    b = handcrafted(tmp_path, "b.spens", np.zeros((2, 2, 2, 2)), "d2")
    assert run("stats", a, b, "--out", tmp_path) == cli.EXIT_USAGE
    assert "digest" in capsys.readouterr().err
    assert run("stats", "--out", tmp_path) == cli.EXIT_USAGE


def test_ensemble_stats_examples():
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 2))
    same = SampleEnsemble(np.repeat(x, 4, axis=0), "ucos", 0)
    truth = np.zeros((2, 2, 2))
    st = ensemble_stats(same, truth)
    np.testing.assert_array_equal(st.std, 0.0)
    np.testing.assert_array_equal(st.bias, x[0])
    assert ensemble_stats(same).bias is None
    with pytest.raises(DimensionError):
        ensemble_stats(same, np.zeros((2, 3, 3)))
    draws = SampleEnsemble(np.random.default_rng(1).standard_normal((10_000, 1, 1, 1)), "dps", 0)
    assert 0.98 <= ensemble_stats(draws).std.item() <= 1.02


def test_ensemble_ignores_diverged_chains():
    s = np.stack([np.zeros((2, 1, 1)), np.full((2, 1, 1), np.nan), np.full((2, 1, 1), 2.0)])
    ens = SampleEnsemble(s, "ucos", 0, failed_step=[-1, 7, -1])
    st = ensemble_stats(ens)
    assert st.n_used == 2
    np.testing.assert_array_equal(st.mean, 1.0)
    with pytest.raises(ValueError):
        ensemble_stats(SampleEnsemble(s[1:2], "ucos", 0, failed_step=[3]))


def test_ensemble_validation():
    with pytest.raises(ValueError):
        SampleEnsemble(np.zeros((0, 2, 2, 2)), "ucos", 0)
    with pytest.raises(ValueError):
        SampleEnsemble(np.zeros((1, 2, 2, 2)), "mcmc", 0)


def test_ensemble_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    ens = SampleEnsemble(rng.standard_normal((3, 2, 4, 4)), "ucos-reg", 17, "abc",
                         failed_step=[-1, 5, -1], truth=rng.random((2, 4, 4)))
    path = tmp_path / "e.spens"
    write_ensemble(path, ens)
    back = read_ensemble(path)
    assert (back.method, back.master_seed, back.config_digest) == ("ucos-reg", 17, "abc")
    np.testing.assert_array_equal(back.samples, ens.samples)
    np.testing.assert_array_equal(back.truth, ens.truth)
    np.testing.assert_array_equal(back.failed_step, [-1, 5, -1])
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_ensemble(path)


def test_full_pipeline_is_deterministic(tiny, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for argv in (["gen-data"], ["build-operator"], ["train"],
                     ["sample", "--method", "ucos"], ["sample", "--method", "gaussian"]):
            assert run(*argv, "--config", tiny, "--out", out) == cli.EXIT_OK, argv
        assert run("stats", out / "ensemble-ucos.spens", "--out", out) == cli.EXIT_OK
    names = sorted(p.name for p in outs[0].iterdir())
    assert "ucos.spnet" in names and "dataset.dotdat" in names and "ensemble-ucos-std-ch0.pgm" in names
    assert names == sorted(p.name for p in outs[1].iterdir())
    for name in names:
        if name.endswith(".meta.json"):
            continue
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    meta = json.loads((outs[0] / "ucos.spnet.meta.json").read_text())
    assert meta["config_digest"] == config_digest(load_config(tiny))
    assert len(meta["loss_trace"]) == 1


def test_seed_flag_changes_samples(tiny, tmp_path):
    for seed, out in ((1, tmp_path / "s1"), (2, tmp_path / "s2")):
        assert run("sample", "--config", tiny, "--out", out, "--method", "gaussian",
                   "--seed", seed) == cli.EXIT_OK
    a = read_ensemble(tmp_path / "s1" / "ensemble-gaussian.spens")
    b = read_ensemble(tmp_path / "s2" / "ensemble-gaussian.spens")
    assert a.master_seed == 1 and b.master_seed == 2
    assert not np.array_equal(a.samples, b.samples)


def test_verify_command_passes(capsys):
    assert run("verify") == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
