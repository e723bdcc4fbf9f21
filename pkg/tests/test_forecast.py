import math

import numpy as np
import pytest
from scipy import special

from areal_gp.errors import NumericalError, ValidationError
from areal_gp.forecast import (
    ForecastSet,
    forecast_rows,
    gp_conditional,
    load_predictive,
    predictive_draws,
    read_forecast_csv,
    save_forecast,
    summarize,
)
from areal_gp.model import DesignSpec, build_design, correlation_matrix
from areal_gp.sampler import ChainStore
from conftest import dense_condition


def make_chain(n=50, I=2, T=8, J=1, seed=0, kappa=1.5, log_sigma2=None, log_nu2=None, meta=None):
    rng = np.random.default_rng(seed)
    design = DesignSpec(J, 12)
    q = design.n_columns
    ls = np.full((n, I), -0.3) + 0.1 * rng.standard_normal((n, I)) if log_sigma2 is None else np.full((n, I), log_sigma2)
    ln = np.full((n, I), -1.0) if log_nu2 is None else np.full((n, I), log_nu2)
    return ChainStore(
        region_ids=[f"r{i}" for i in range(I)], times=np.arange(1, T + 1), design=design, kappa=kappa,
        log_sigma2=ls, log_phi=np.full((n, I), 1.0) + 0.1 * rng.standard_normal((n, I)), log_nu2=ln,
        beta=rng.normal(size=(n, I, q)), z=rng.normal(size=(n, I, T)),
        car_mean=np.zeros(n), car_omega2=np.ones(n), car_rho=np.full(n, 0.9), meta=dict(meta or {}),
    )


# -- GP conditioning ------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kappa", [0.5, 1.5, 2.5])
def test_conditional_matches_dense_joint_conditioning(seed, kappa):
    rng = np.random.default_rng(seed)
    T, H = 6, 2
    sigma2, phi = float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.5, 4.0))
    t_all = np.arange(1, T + H + 1)
    S = sigma2 * correlation_matrix(t_all, kappa, phi)
    z = rng.normal(size=T)
    m, C = dense_condition(S, np.zeros(T + H), np.arange(T), z, 0.0)
    mean, cov = gp_conditional(t_all[:T], t_all[T:], z, sigma2, kappa, phi)
    np.testing.assert_allclose(mean, m[T:], atol=1e-10)
    np.testing.assert_allclose(cov, C[T:, T:], atol=1e-10)


def test_exponential_kernel_is_markov():
    rng = np.random.default_rng(1)
    sigma2, phi = 1.3, 2.5
    z = rng.normal(size=10)
    h = np.arange(1, 5)
    mean, cov = gp_conditional(np.arange(1, 11), 10 + h, z, sigma2, 0.5, phi)
    np.testing.assert_allclose(mean, z[-1] * np.exp(-h / phi), atol=1e-12)
    np.testing.assert_allclose(np.diag(cov), sigma2 * (1 - np.exp(-2 * h / phi)), atol=1e-12)
    z2 = z.copy()
    z2[:-1] = rng.normal(size=9)
    mean2, _ = gp_conditional(np.arange(1, 11), 10 + h, z2, sigma2, 0.5, phi)
    np.testing.assert_allclose(mean2, mean, atol=1e-12)


@pytest.mark.parametrize("kappa", [0.5, 1.5, 2.5])
def test_conditional_variance_grows_with_lead_time(kappa):
    z = np.random.default_rng(2).normal(size=12)
    _, cov = gp_conditional(np.arange(1, 13), np.arange(13, 25), z, 0.9, kappa, 3.0)
    v = np.diag(cov)
    assert np.all(np.diff(v) >= -1e-12)
    assert np.all(v <= 0.9 + 1e-12)


# -- predictive draws -------------------------------------------------------------


def test_in_sample_linear_predictor_is_mean_plus_path():
    ch = make_chain()
    fs = predictive_draws(ch, 3, seed=1)
    X = build_design(ch.design, ch.times)
    for d in (0, 17, 49):
        for i in range(2):
            np.testing.assert_allclose(fs.linpred[d, i, :8], X @ ch.beta[d, i] + ch.z[d, i], atol=1e-12)
    np.testing.assert_array_equal(fs.horizon_times, [9, 10, 11])
    assert fs.linpred.shape == fs.obs.shape == (50, 2, 11)


def test_draws_are_reproducible():
    ch = make_chain()
    a = predictive_draws(ch, 4, seed=5)
    b = predictive_draws(ch, 4, seed=5)
    np.testing.assert_array_equal(a.obs, b.obs)
    c = predictive_draws(ch, 4, seed=6)
    assert not np.array_equal(a.obs, c.obs)


def test_vanishing_variance_collapses_to_mean():
    ch = make_chain(log_sigma2=math.log(1e-14), log_nu2=0.0)
    ch.z[:] = 0.0
    fs = predictive_draws(ch, 3)
    Xf = build_design(ch.design, fs.horizon_times)
    for d in range(0, 50, 7):
        np.testing.assert_allclose(fs.obs[d, 0, 8:], Xf @ ch.beta[d, 0], atol=1e-5)


def test_horizon_draws_match_conditional_moments():
    n = 40_000
    ch = make_chain(n=1, I=1, T=6)
    rep = {k: np.repeat(getattr(ch, k), n, axis=0)
           for k in ("log_sigma2", "log_phi", "log_nu2", "beta", "z", "car_mean", "car_omega2", "car_rho")}
    for k, v in rep.items():
        setattr(ch, k, v)
    fs = predictive_draws(ch, 2, seed=3)
    sigma2 = math.exp(ch.log_sigma2[0, 0])
    tau2 = math.exp(ch.log_nu2[0, 0]) * sigma2
    mean, cov = gp_conditional(ch.times, fs.horizon_times, ch.z[0, 0], sigma2, 1.5, math.exp(ch.log_phi[0, 0]))
    target_mean = build_design(ch.design, fs.horizon_times) @ ch.beta[0, 0] + mean
    target_cov = cov + tau2 * np.eye(2)
    y = fs.obs[:, 0, 6:]
    se = np.sqrt(np.diag(target_cov) / n)
    assert np.all(np.abs(y.mean(axis=0) - target_mean) < 3.5 * se)
    se_cov = np.sqrt((np.outer(np.diag(target_cov), np.diag(target_cov)) + target_cov**2) / n)
    assert np.all(np.abs(np.cov(y.T) - target_cov) < 3.5 * se_cov)


def test_zero_horizon_and_bad_horizon():
    ch = make_chain()
    assert predictive_draws(ch, 0).horizon == 0
    with pytest.raises(ValidationError):
        predictive_draws(ch, -1)


def test_rare_failures_are_skipped(monkeypatch):
    import areal_gp.forecast as fc

    real = fc.gp_conditional
    calls = {"n": 0}

    def sometimes(*a, **k):
        calls["n"] += 1
        if calls["n"] == 7:
            raise NumericalError("forced")
        return real(*a, **k)

    monkeypatch.setattr(fc, "gp_conditional", sometimes)
    fs = predictive_draws(make_chain(n=60), 2)
    assert fs.n_skipped == 1
    assert np.isnan(fs.obs).any(axis=2).sum() == 1
    summ = summarize(fs.obs)
    assert np.all(np.isfinite(summ["mean"]))


def test_frequent_failures_abort(monkeypatch):
    import areal_gp.forecast as fc

    def always(*a, **k):
        raise NumericalError("forced")

    monkeypatch.setattr(fc, "gp_conditional", always)
    with pytest.raises(NumericalError):
        predictive_draws(make_chain(), 2)


# -- summaries and files ------------------------------------------------------------


def test_summary_of_one_to_hundred():
    s = summarize(np.arange(1, 101, dtype=float))
    assert s["q50"] == 50.5
    assert s["mean"] == 50.5
    assert s["q025"] == pytest.approx(1 + 0.025 * 99, abs=1e-12)
    assert s["q975"] == pytest.approx(1 + 0.975 * 99, abs=1e-12)


def test_summary_ignores_nan_and_rejects_empty():
    x = np.array([1.0, np.nan, 3.0])
    assert summarize(x)["q50"] == 2.0
    with pytest.raises(ValidationError):
        summarize(np.empty(0))


def test_forecast_rows_add_natural_scale():
    ch = make_chain(n=51, meta={"transform_kind": "empirical-logit"})  # odd n: the median is one draw
    fs = predictive_draws(ch, 2)
    assert fs.transform_kind == "empirical-logit"
    rows = forecast_rows(fs)
    assert len(rows) == 2 * 2 * 10
    trans = [r for r in rows if r["scale"] == "transformed"]
    nat = [r for r in rows if r["scale"] == "natural"]
    for a, b in zip(trans, nat):
        assert (a["region_id"], a["time"]) == (b["region_id"], b["time"])
        # quantiles commute with a monotone map; the mean does not
        assert b["q50"] == pytest.approx(special.expit(a["q50"]), rel=1e-12)
        assert 0 < b["q025"] <= b["q50"] <= b["q975"] < 1


def test_identity_transform_has_only_transformed_rows():
    fs = predictive_draws(make_chain(), 2)
    assert {r["scale"] for r in forecast_rows(fs)} == {"transformed"}


def test_forecast_directory_round_trip(tmp_path):
    fs = predictive_draws(make_chain(meta={"transform_kind": "log-rate"}), 3, seed=2)
    save_forecast(fs, tmp_path)
    rows = read_forecast_csv(tmp_path / "forecast.csv")
    assert rows == forecast_rows(fs)
    meta, samples = load_predictive(tmp_path)
    np.testing.assert_array_equal(samples, fs.obs)
    assert meta["horizon_times"] == [9, 10, 11] and meta["transform_kind"] == "log-rate"


def test_truncated_predictive_file(tmp_path):
    fs = predictive_draws(make_chain(), 1)
    save_forecast(fs, tmp_path)
    p = tmp_path / "predictive_draws.bin"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValidationError):
        load_predictive(tmp_path)


def test_forecast_set_properties():
    fs = ForecastSet(["a"], np.arange(1, 4), np.array([4, 5]), np.zeros((3, 1, 5)), np.zeros((3, 1, 5)))
    assert fs.n_draws == 3 and fs.horizon == 2
    np.testing.assert_array_equal(fs.all_times, [1, 2, 3, 4, 5])
