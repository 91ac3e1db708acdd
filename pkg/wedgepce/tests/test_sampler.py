import numpy as np
import pytest

from astropy.utils.data import get_pkg_data_filename

from .utils_for_test import make_params, small_trial
from ..exceptions import ArtifactError, ParameterError, SamplerQualityError, SamplerWarning, TrialDataError
from ..sampler import (DualAveraging, PosteriorDraws, SamplerConfig, check_divergences, diagnostics, ess_bulk,
                       fit, rhat_rank, run_hmc)
from ..trial_data import TrialDataset, load_csv


def standard_normal(x):
    return -0.5 * np.dot(x, x), -x


def test_sampler_config():

    cfg = SamplerConfig(seed=3, threads="auto")
    assert cfg.threads == "auto"
    assert cfg.to_dict()["chains"] == 4
    assert "threads" not in cfg.to_dict()

    for kwargs in ({"chains": 0}, {"samples": 0}, {"warmup": -1}, {"max_leapfrog": 0}):
        with pytest.raises(ParameterError):
            SamplerConfig(**kwargs)
    with pytest.raises(ParameterError, match="target_accept"):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ParameterError, match="max_divergence_rate"):
        SamplerConfig(max_divergence_rate=1.5)


def test_dual_averaging():

    adapter = DualAveraging(0.5, 0.8)
    assert adapter.step_size == pytest.approx(0.5)

    # Persistent rejection shrinks the step
    for _ in range(50):
        adapter.update(0.0)
    assert adapter.step_size < 0.5
    assert adapter.final_step_size < 0.5

    adapter = DualAveraging(0.5, 0.8)
    for _ in range(50):
        adapter.update(1.0)
    assert adapter.step_size > 0.5


def test_run_hmc_standard_normal():

    cfg = SamplerConfig(chains=2, warmup=300, samples=500, max_leapfrog=16, seed=11)
    draws = run_hmc(standard_normal, 2, cfg)

    assert draws.names == ["x0", "x1"]
    assert draws.values.shape == (1000, 2)
    assert draws.n_chains == 2
    assert list(np.bincount(draws.chain)) == [500, 500]
    assert len(draws.step_size) == 2
    assert np.all((draws.accept_stat >= 0) & (draws.accept_stat <= 1))
    assert draws.divergences == 0
    assert draws.metadata["seed"] == 11

    assert np.all(np.abs(draws.values.mean(axis=0)) < 0.2)
    assert np.all(np.abs(draws.values.var(axis=0) - 1) < 0.3)


def test_run_hmc_reproducible():

    cfg = SamplerConfig(chains=2, warmup=50, samples=50, max_leapfrog=8, seed=5)
    first = run_hmc(standard_normal, 3, cfg, names=["a", "b", "c"])
    second = run_hmc(standard_normal, 3, cfg, names=["a", "b", "c"])
    assert np.array_equal(first.values, second.values)

    # Each chain has its own stream, so threading does not change the draws
    threaded = run_hmc(standard_normal, 3, SamplerConfig(chains=2, warmup=50, samples=50, max_leapfrog=8, seed=5,
                                                         threads=2), names=["a", "b", "c"])
    assert np.array_equal(first.values, threaded.values)

    other = run_hmc(standard_normal, 3, SamplerConfig(chains=2, warmup=50, samples=50, max_leapfrog=8, seed=6))
    assert not np.array_equal(first.values, other.values)


def test_run_hmc_errors():

    with pytest.raises(ParameterError, match="seed"):
        run_hmc(standard_normal, 2, SamplerConfig())

    with pytest.raises(ParameterError, match="names"):
        run_hmc(standard_normal, 2, SamplerConfig(seed=1), names=["a"])


def test_posterior_draws(tmpdir):

    params = [make_params(), make_params(gamma1=2.0, sigma_eps=0.5)]
    draws = PosteriorDraws.from_params(params, metadata={"mediator_lag": 0})

    assert len(draws) == 2
    assert draws.n_chains == 1
    assert draws.names == draws.layout.param_names
    assert draws.params(1).gamma1 == pytest.approx(2.0)
    assert draws.params(1).sigma_eps == pytest.approx(0.5)
    assert np.allclose(draws.column("log_sigma_eps"), [0.0, np.log(0.5)])
    assert draws.by_chain("gamma1").shape == (1, 2)
    assert len(list(draws.iter_params())) == 2

    with pytest.raises(KeyError, match="nope"):
        draws.column("nope")

    sub = draws.subset([1])
    assert len(sub) == 1
    assert sub.params(0).gamma1 == pytest.approx(2.0)

    with pytest.raises(ParameterError):
        PosteriorDraws.from_params([])
    with pytest.raises(ParameterError, match="shape"):
        PosteriorDraws(np.zeros((2, 3)), ["a", "b"], [0, 0])
    with pytest.raises(ParameterError, match="layout"):
        PosteriorDraws(np.zeros((2, 2)), ["a", "b"], [0, 0]).params(0)

    # Written at full precision, so the round trip is exact
    path = str(tmpdir.join("draws.csv"))
    csv_path, manifest_path = draws.write(path)
    assert manifest_path.endswith("draws.json")
    back = PosteriorDraws.read(csv_path)
    assert np.array_equal(back.values, draws.values)
    assert back.names == draws.names
    assert back.layout.to_dict() == draws.layout.to_dict()
    assert back.metadata["mediator_lag"] == 0
    assert back.params(1).to_dict() == draws.params(1).to_dict()

    with pytest.raises(ArtifactError, match="Missing draws file"):
        PosteriorDraws.read(str(tmpdir.join("missing.csv")))


def test_rhat_and_ess():

    rng = np.random.default_rng(2)
    iid = rng.standard_normal((4, 500))
    assert 0.99 <= rhat_rank(iid) < 1.02
    assert ess_bulk(iid) > 1000
    assert ess_bulk(iid) <= iid.size

    # Chains stuck in different places
    shifted = iid + np.arange(4)[:, None] * 3
    assert rhat_rank(shifted) > 1.5

    # An autocorrelated chain has far fewer effective draws
    walk = np.cumsum(rng.standard_normal((4, 500)), axis=1)
    assert ess_bulk(walk) < 200

    assert np.isnan(ess_bulk(np.ones((4, 100))))


def test_diagnostics():

    rng = np.random.default_rng(4)
    values = np.column_stack([rng.standard_normal(2000), np.ones(2000)])
    draws = PosteriorDraws(values, ["x", "flat"], np.repeat(np.arange(4), 500))

    diag = diagnostics(draws)
    assert diag.n_chains == 4
    assert diag.degenerate == ["flat"]
    assert np.isnan(diag.ess_bulk[1])
    assert diag.max_rhat < 1.02
    assert diag.min_ess == pytest.approx(diag.ess_bulk[0])

    table = diag.to_table()
    assert table.colnames == ["name", "rhat", "ess_bulk"]
    assert list(table["name"]) == ["x", "flat"]
    assert diag.to_dict()["degenerate"] == ["flat"]

    single = PosteriorDraws(values[:500], ["x", "flat"], np.zeros(500, dtype=int))
    diag = diagnostics(single, names=["x"])
    assert diag.rhat is None
    assert diag.max_rhat is None
    assert np.all(np.isnan(diag.to_table()["rhat"]))


def test_divergence_checks():

    divergent = np.zeros(200, dtype=bool)
    divergent[:60] = True
    draws = PosteriorDraws(np.zeros((200, 1)) + np.arange(200)[:, None], ["x"], np.zeros(200, dtype=int),
                           divergent=divergent)
    assert draws.divergence_rate == pytest.approx(0.3)

    with pytest.raises(SamplerQualityError, match="Divergence rate"):
        check_divergences(draws, 0.2)
    check_divergences(draws, 0.5)

    with pytest.warns(SamplerWarning, match="divergence rate"):
        diag = diagnostics(draws, max_divergence_rate=0.2)
    assert diag.divergences == 60


def test_fit_errors():

    data = load_csv(get_pkg_data_filename("data/tiny_trial.csv"))
    one_cluster = TrialDataset.from_records([r for r in data.records if r.cluster_id == "c1"], n_periods=3)
    with pytest.raises(TrialDataError, match="two clusters"):
        fit(one_cluster, cfg=SamplerConfig(seed=1))


@pytest.mark.slow
def test_fit(tmpdir):

    data, _ = small_trial(seed=3, n_clusters=4, cohort_size=5, n_periods=3)
    cfg = SamplerConfig(chains=2, warmup=150, samples=100, max_leapfrog=16, seed=1)
    path = str(tmpdir.join("draws.csv"))

    draws = fit(data, cfg=cfg, path=path, metadata={"data_sha256": "x"})
    assert len(draws) == 200
    assert draws.names == draws.layout.param_names
    assert draws.layout.n_clusters == 4
    assert draws.metadata["mediator_lag"] == 0
    assert draws.metadata["data_sha256"] == "x"
    assert np.all(np.isfinite(draws.values))
    assert draws.params(0).n_periods == 3

    back = PosteriorDraws.read(path)
    assert np.array_equal(back.values, draws.values)

    with_latents = fit(data, cfg=SamplerConfig(chains=1, warmup=20, samples=10, max_leapfrog=8, seed=1,
                                               keep_latents=True))
    assert len(with_latents.names) == with_latents.layout.size


@pytest.mark.slow
def test_fit_interval_coverage():

    truth = make_params(n_periods=5)
    targets = {"gamma1": truth.gamma1, "beta1": truth.beta[0], "beta2": truth.beta[1], "beta3": truth.beta[2],
               "log_sigma_eps": np.log(truth.sigma_eps)}
    covered = dict.fromkeys(targets, 0)

    for replicate in range(20):
        data, _ = small_trial(seed=300 + replicate, n_clusters=12, cohort_size=30, n_periods=5, params=truth)
        draws = fit(data, cfg=SamplerConfig(seed=replicate, threads=4))

        diag = diagnostics(draws)
        assert diag.max_rhat < 1.05, replicate
        assert diag.min_ess > 200, replicate

        for name, value in targets.items():
            lower, upper = np.quantile(draws.column(name), [0.05, 0.95])
            covered[name] += lower <= value <= upper

    for name, count in covered.items():
        assert count >= 15, name
