import math

import numpy as np
import pytest

from oracles import covariance_oracle, observation_covariance_oracle, transformed_kernel
from robustfilter.config import ModelConfig
from robustfilter.ou_gaussian import (
    CovarianceTable,
    GramDegeneracyError,
    covariance_table,
    covariance_table_quadrature,
    exp_weighted_mean,
    gram_decompose,
    kernel_linear,
    kernel_one,
    kernel_square,
    lambdas_from_covariances,
    observation_covariances,
    ou_kernel_transform,
    printed_cov34,
    series_expansions,
)
from robustfilter.path_sim import blocks, path_from_increments, simulate_paths

THETAS = (0.5, 1.0, 2.0, 5.0, 10.0, 100.0)


@pytest.fixture(scope="module")
def block():
    return blocks(simulate_paths(ModelConfig(steps_per_block=128), 2.0, 3))[0]


@pytest.mark.parametrize("theta", (0.5, 2.0, 10.0, 100.0))
def test_closed_forms_match_independent_kernel_oracle(theta):
    closed = covariance_table(theta).entries()
    oracle = covariance_oracle(theta)
    for k, v in closed.items():
        assert oracle[k] == pytest.approx(v, rel=1e-9), k


@pytest.mark.parametrize("theta", (0.5, 3.0, 40.0))
def test_kernel_formulas_match_defining_transform(theta):
    s, k1 = transformed_kernel(lambda u: np.ones_like(u), theta, 20001)
    _, k2 = transformed_kernel(lambda u: u, theta, 20001)
    _, k3 = transformed_kernel(lambda u: u * u, theta, 20001)
    assert np.max(np.abs(k1 - kernel_one(theta, s))) < 1e-9
    assert np.max(np.abs(k2 - kernel_linear(theta, s))) < 1e-9
    assert np.max(np.abs(k3 - kernel_square(theta, s))) < 1e-9


def test_linear_transform_is_exact_for_piecewise_linear_g():
    s = np.linspace(0, 1, 41)
    for th in (0.3, 7.0):
        assert np.max(np.abs(ou_kernel_transform(s, s, th) - kernel_linear(th, s))) < 1e-12
        assert np.max(np.abs(ou_kernel_transform(np.ones_like(s), s, th) - kernel_one(th, s))) < 1e-12


def test_transform_rejects_bad_input():
    s = np.linspace(0, 1, 5)
    with pytest.raises(ValueError):
        ou_kernel_transform(np.ones(5), s, 0.0)
    with pytest.raises(ValueError):
        ou_kernel_transform(np.array([1, np.nan, 1, 1, 1.0]), s, 1.0)
    with pytest.raises(ValueError):
        ou_kernel_transform(np.ones(5), s, 1.0, mode="cubic")


@pytest.mark.parametrize("theta", THETAS)
def test_gram_reconstruction(theta):
    t = covariance_table(theta)
    L = gram_decompose(t).lower_triangular()
    assert np.max(np.abs(L @ L.T - t.matrix_gram_order())) <= 1e-10


def test_gram_degeneracy_names_theta():
    bad = CovarianceTable(3.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0)  # G3 identical to G1
    with pytest.raises(GramDegeneracyError, match="theta = 3.0"):
        gram_decompose(bad)


@pytest.mark.parametrize("theta", (0.5, 2.0, 20.0))
def test_observation_covariances_match_oracle(block, theta):
    c = observation_covariances(block, theta)
    o = observation_covariance_oracle(block.y, theta)
    for k in ("cov14", "cov24", "cov34", "var4"):
        assert getattr(c, k) == pytest.approx(o[k], rel=1e-6), k
    # two routes for Cov(G1, G4)
    assert c.cov14_stieltjes == pytest.approx(c.cov14, rel=1e-10, abs=1e-14)


@pytest.mark.parametrize("theta", (0.5, 2.0, 20.0, 200.0))
def test_cov34_proportionality_and_cov24_identity(block, theta):
    c = observation_covariances(block, theta)
    assert printed_cov34(theta, c.cov14) == pytest.approx(c.cov34, rel=1e-9, abs=1e-14)
    ew = exp_weighted_mean(block, theta)
    assert (1 + 1 / theta) * c.cov14 - ew / theta == pytest.approx(c.cov24, rel=1e-9, abs=1e-14)


def test_zero_observation_has_zero_covariances():
    b = path_from_increments(2.0 / 128, 2.0, np.zeros(128))
    c = observation_covariances(b, 2.0)
    assert c.cov14 == c.cov24 == c.cov34 == c.var4 == 0.0


def test_lambdas_reconstruct_observation_covariances(block):
    th = 2.0
    obs = observation_covariances(block, th)
    g = gram_decompose(covariance_table(th), obs)
    assert (g.lambda1, g.lambda2, g.lambda3) == pytest.approx(lambdas_from_covariances(g, obs.cov14, obs.cov24, obs.cov34))
    L = np.zeros((4, 4))
    L[:3, :3] = g.lower_triangular()
    L[3] = [g.lambda1, g.lambda2, g.lambda3, math.sqrt(g.lambda4sq)]
    full = L @ L.T  # order (G1, G3, G2, G4)
    assert full[3, 0] == pytest.approx(obs.cov14, rel=1e-12)
    assert full[3, 1] == pytest.approx(obs.cov34, rel=1e-12)
    assert full[3, 2] == pytest.approx(obs.cov24, rel=1e-12)
    assert full[3, 3] == pytest.approx(obs.var4, rel=1e-12)


def test_large_theta_series():
    th = 1e3
    t = covariance_table(th)
    g = gram_decompose(t)
    from robustfilter.likelihood import theta_structure

    st = theta_structure(1.0, th)
    exact = {
        "alpha": g.alpha, "cov13": t.cov13, "beta": g.beta, "beta2": g.beta ** 2, "var3": t.var3,
        "gamma": g.gamma, "cov12": t.cov12, "sigma1sq": st.sigma1sq, "a": g.a, "var2": t.var2,
        "b": g.b, "c2": g.c ** 2, "sigma2sq": st.sigma2sq,
    }
    ser = series_expansions(th)
    for k, v in exact.items():
        assert ser[k] == pytest.approx(v, rel=1e-5), k
    # the inverted sigma2^2 variant stays near 2 while the exact value grows like theta^2 / 3
    assert abs(ser["sigma2sq_printed"] - st.sigma2sq) / st.sigma2sq > 0.99


def test_quadrature_table_agrees_with_closed_form():
    for th in THETAS:
        a, b = covariance_table(th).entries(), covariance_table_quadrature(th).entries()
        for k in a:
            assert a[k] == pytest.approx(b[k], rel=1e-8)
