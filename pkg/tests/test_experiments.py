import math

import numpy as np
import pytest

from robustfilter.config import ExperimentConfig, ModelConfig
from robustfilter.experiments import (
    binned_tv,
    fit_loglog_slope,
    linear_fit,
    pair_distances,
    prepare,
    schedule_delta,
)
from robustfilter.robust_filter import GridMeasure


@pytest.fixture(scope="module")
def setup():
    cfg = ExperimentConfig(model=ModelConfig(tau=4.0, steps_per_block=128, grid_size=80), iota=0.9, blocks=5)
    return prepare(cfg, 0)


def test_same_prior_gives_zero_distance(setup):
    _, tv, hb = pair_distances(setup, setup.prior())
    assert np.all(tv == 0.0) and np.all(hb == 0.0)


def test_distinct_priors_contract(setup):
    _, tv, hb = pair_distances(setup, setup.prior(2.0, 1.5))
    assert tv[-1] < tv[0]
    assert np.all(np.diff(hb) <= 1e-9)


def test_incomparable_priors_are_rejected(setup):
    g = setup.grids[0]
    alt = GridMeasure.from_weights(g, np.where(g > 0, 1.0, 0.0))
    with pytest.raises(ValueError, match="comparable"):
        pair_distances(setup, alt)


def test_schedule():
    assert schedule_delta(200, 1.0) == pytest.approx(math.sqrt(math.log(200)))
    assert schedule_delta(1, 2.0) == pytest.approx(math.sqrt(2 * math.log(2)))


def test_fits_recover_exact_power_law():
    t = np.arange(1, 51, dtype=float)
    assert fit_loglog_slope(t, 3 * t ** -1.5, burn_in=5) == pytest.approx(-1.5)
    y = 3 * t ** -1.5
    y[30:] = 0.0  # underflowed entries are dropped
    assert fit_loglog_slope(t, y, burn_in=5) == pytest.approx(-1.5)
    assert math.isnan(fit_loglog_slope(t, np.zeros(50)))
    s, i, r2 = linear_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert (s, i, r2) == pytest.approx((2.0, 1.0, 1.0))


def test_binned_tv_of_exact_sample_is_small():
    g = np.linspace(-3, 3, 61)
    m = GridMeasure.gaussian(g, 0.0, 1.0)
    rng = np.random.default_rng(0)
    assert binned_tv(m, rng.standard_normal(200_000)) < 0.02
    assert binned_tv(m, rng.standard_normal(200_000) + 10) > 0.99
