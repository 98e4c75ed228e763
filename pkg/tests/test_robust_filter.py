import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import kalman_bucy
from robustfilter.config import ExperimentConfig, ModelConfig, with_model
from robustfilter.experiments import exact_run, prepare, run_truncation_sweep, linear_fit, truncated_run
from robustfilter.likelihood import TransitionSpec, psi_hat_eval, theta_structure
from robustfilter.path_sim import DriftSpec
from robustfilter.robust_filter import (
    TV_HILBERT_FACTOR,
    FilterError,
    GridMeasure,
    distances,
    escape_mass,
    filter_step,
    hilbert_distance,
    log_kernel,
    p_entries,
    propagate_log_ratio,
    ratio_distances,
    transition_log_matrix,
    truncated_log_kernel,
    truncated_step,
    tv_distance,
    validate_hypotheses,
)


def test_two_bin_hand_values():
    g = np.array([0.0, 1.0])
    mu = GridMeasure.from_weights(g, [0.7, 0.3])
    nu = GridMeasure.from_weights(g, [0.3, 0.7])
    tv, hb = distances(mu, nu)
    assert tv == pytest.approx(0.4, abs=1e-15)
    assert hb == pytest.approx(math.log((7 / 3) / (3 / 7)), rel=1e-14)
    assert distances(mu, mu) == (0.0, 0.0)


def test_distance_errors_and_support():
    g = np.linspace(0, 1, 3)
    mu = GridMeasure.from_weights(g, [1, 1, 0])
    nu = GridMeasure.from_weights(g, [1, 1, 1])
    assert hilbert_distance(mu, nu) == math.inf
    with pytest.raises(ValueError, match="grids"):
        tv_distance(mu, GridMeasure.from_weights(g + 1, [1, 1, 1]))
    with pytest.raises(ValueError):
        GridMeasure(np.array([0.0, 0.0]), np.zeros(2))
    with pytest.raises(FilterError):
        GridMeasure.from_weights(g, [0, 0, 0]).normalized()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-6, 1e3), st.floats(1e-6, 1e3)), min_size=2, max_size=30))
def test_tv_bounded_by_hilbert(pairs):
    g = np.arange(len(pairs), dtype=float)
    mu = GridMeasure.from_weights(g, [a for a, _ in pairs])
    nu = GridMeasure.from_weights(g, [b for _, b in pairs])
    tv, hb = distances(mu, nu)
    assert tv <= TV_HILBERT_FACTOR * hb + 1e-15


@pytest.fixture(scope="module")
def setup():
    return prepare(ExperimentConfig(model=ModelConfig(steps_per_block=256, grid_size=120), blocks=6), 4)


def test_steps_are_normalized(setup):
    for pi in exact_run(setup):
        assert abs(pi.probabilities.sum() - 1) < 1e-12


def test_hilbert_non_increase_under_filter_step(setup):
    rng = np.random.default_rng(0)
    c = setup.coeffs[0]
    g0, g1 = setup.grids[0], setup.grids[1]
    for _ in range(100):
        a = GridMeasure(g0, rng.normal(0, 2, g0.size))
        b = GridMeasure(g0, rng.normal(0, 2, g0.size))
        fa = filter_step(a, c, setup.spec, g1, setup.log_q(1))
        fb = filter_step(b, c, setup.spec, g1, setup.log_q(1))
        assert hilbert_distance(fa, fb) <= hilbert_distance(a, b) + 1e-9


def test_log_ratio_propagation_matches_direct_pair(setup):
    rng = np.random.default_rng(1)
    g0, g1 = setup.grids[0], setup.grids[1]
    a = setup.prior()
    b = GridMeasure(g0, a.logw + rng.normal(0, 0.3, g0.size)).normalized()
    lk = log_kernel(g0, g1, setup.coeffs[0], setup.spec, setup.log_q(1))
    new, delta = propagate_log_ratio(a, lk, b.logw - a.logw, g1)
    fa = filter_step(a, setup.coeffs[0], setup.spec, g1, setup.log_q(1))
    fb = filter_step(b, setup.coeffs[0], setup.spec, g1, setup.log_q(1))
    assert np.allclose(new.logw, fa.logw, atol=1e-12)
    assert np.allclose(delta, fb.logw - fa.logw, atol=1e-10)
    tv, hb = ratio_distances(new, delta)
    assert tv == pytest.approx(tv_distance(fa, fb), abs=1e-12)
    assert hb == pytest.approx(hilbert_distance(fa, fb), abs=1e-9)


def test_matches_kalman_bucy_with_zero_drift():
    cfg = ExperimentConfig(model=ModelConfig(tau=2.0), blocks=5)
    s = prepare(cfg, 3)
    run = exact_run(s)
    means, variances = kalman_bucy(s.path.y, s.path.dt, 1.0, 0.0, 1.0, s.path.steps_per_block)
    for k in range(1, 6):
        pi = run[k]
        mu = pi.mean()
        var = float(np.sum(pi.probabilities * (pi.grid - mu) ** 2))
        assert abs(mu - means[k - 1]) < 0.01
        assert abs(var - variances[k - 1]) < 0.005


def test_grid_refinement_changes_little():
    cfg = ExperimentConfig(blocks=10)
    coarse = exact_run(prepare(cfg, 2))
    fine = exact_run(prepare(with_model(cfg, grid_size=2 * cfg.model.grid_size), 2))
    # compare on the coarse grid through cell-wise interpolation of the fine density
    for a, b in zip(coarse[1:], fine[1:]):
        dens = np.interp(a.grid, b.grid, b.probabilities / np.diff(b.grid)[0])
        p = dens * np.diff(a.grid)[0]
        assert 0.5 * np.sum(np.abs(a.probabilities - p / p.sum())) <= 0.01


def test_truncated_step_support_and_large_delta(setup):
    c = setup.coeffs[0]
    pi = setup.prior()
    geom = setup.geometry(3.0)
    out = truncated_step(pi, geom, 1, c, setup.spec, setup.grids[1], setup.log_q(1))
    assert np.all(out.probabilities[~geom.in_compact(1, out.grid)] == 0.0)
    big = setup.geometry(1e6)
    a = truncated_step(pi, big, 1, c, setup.spec, setup.grids[1], setup.log_q(1))
    b = filter_step(pi, c, setup.spec, setup.grids[1], setup.log_q(1))
    assert np.max(np.abs(a.probabilities - b.probabilities)) < 1e-10
    assert np.all(escape_mass([pi, b], big) == 0.0)


def test_truncated_step_off_compact_uses_flat_branch(setup):
    geom = setup.geometry(0.5)
    g0, g1 = setup.grids[0], setup.grids[1]
    lo, hi = geom.compact(0)
    w = np.where(g0 > hi, 1.0, 0.0)
    pi = GridMeasure.from_weights(g0, w).normalized()
    out = truncated_step(pi, geom, 1, setup.coeffs[0], setup.spec, g1, setup.log_q(1))
    # direct summation of psi(x, x') xi1 over the source atoms
    inside = geom.in_compact(1, g1)
    direct = np.zeros(g1.size)
    for x, p in zip(g0, pi.probabilities):
        if p > 0:
            direct += p * np.exp(psi_hat_eval(setup.coeffs[0], x, g1) + geom.log_xi1(geom.D(1)))
    direct = np.where(inside, direct, 0.0)
    assert np.allclose(out.probabilities, direct / direct.sum(), rtol=1e-10, atol=1e-300)


def test_truncated_kernel_rejects_missing_compact(setup):
    geom = setup.geometry(0.5)
    far = setup.grids[1] + 1e3
    with pytest.raises(FilterError, match="compact"):
        truncated_log_kernel(setup.grids[0], far, geom, 1, setup.coeffs[0], setup.spec)


def test_drift_transition_matches_gaussian_when_drift_vanishes():
    src = np.linspace(-2, 2, 21)
    zero = transition_log_matrix(TransitionSpec(DriftSpec("zero", 0.0), 2.0), src, src)
    tiny = transition_log_matrix(TransitionSpec(DriftSpec("scaled-tanh", 1e-12), 2.0, "mc-bridge"), src, src)
    assert np.max(np.abs(np.exp(zero) - np.exp(tiny))) < 1e-3


def test_kappa_factorization():
    st_ = theta_structure(1.0, 4.0)
    p11, p21 = p_entries(st_.A2, st_.B2, st_.C1)
    P = np.array([[p11, 0.0], [p21, 1.0]])
    kappa = np.array([[st_.A2, -st_.C1 / 2], [-st_.C1 / 2, st_.B2]])
    assert np.allclose(P.T @ np.diag([st_.A2, st_.B2]) @ P, kappa, rtol=1e-13)
    assert p21 > 0
    with pytest.raises(ValueError):
        p_entries(1.0, 1.0, 3.0)


def test_hypotheses_fail_for_short_blocks_and_hold_in_validated_setting():
    s = theta_structure(1.0, 0.5)
    rep = validate_hypotheses(1.0, 0.5, 3.0, 0.75, s.A2, s.B2, s.C1)
    assert not rep.ok and "tau > 1" in rep.failures()
    s = theta_structure(1.0, 4.0)
    assert validate_hypotheses(1.0, 4.0, 3.0, 0.9, s.A2, s.B2, s.C1).ok
    assert "FAIL" not in validate_hypotheses(1.0, 4.0, 3.0, 0.9, s.A2, s.B2, s.C1).render()


@pytest.fixture(scope="module")
def sweep(validated_cfg):
    from dataclasses import replace

    return run_truncation_sweep(replace(validated_cfg, blocks=20, seeds=tuple(range(5))))


def test_escape_mass_decreases_with_delta(sweep):
    assert np.all(np.diff(sweep.mean_escape) < 0)


def test_escape_slope_within_factor_three_of_dominant_rate(sweep, validated_cfg):
    """Regression of log mean escape on Delta^2 against the dominant exponent."""
    slope = linear_fit(sweep.deltas ** 2, np.log(sweep.mean_escape))[0]
    rate = prepare(validated_cfg, 0, n_blocks=1).geom.dominant_exponent_rate()
    assert slope < 0
    assert rate / 3 <= -slope <= 3 * rate, f"slope {slope:.4g} vs rate {rate:.4g}"


def test_truncated_run_underflow_is_reported(setup):
    with pytest.raises(FilterError):
        truncated_run(setup, setup.geometry(1e-9))
