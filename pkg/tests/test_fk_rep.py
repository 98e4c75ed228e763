import math
from dataclasses import replace

import numpy as np
import pytest

from robustfilter.config import with_model
from robustfilter.experiments import prepare
from robustfilter.fk_rep import (
    GridTooLarge,
    PairModel,
    backward_potentials,
    build_chain,
    direct_truncated,
    dobrushin,
    fk_transform_gap,
    mixing_sandwich_check,
    representation_check,
    s_dobrushin_report,
    separation_bound_check,
    smallest_L,
    two_step_kernel,
    u_chain_contraction,
    u_dobrushin_report,
)


@pytest.fixture(scope="module")
def fast_cfg(validated_cfg):
    return with_model(validated_cfg, steps_per_block=256)


def _model(cfg, seed, size, n_blocks=4, delta=None):
    setup = prepare(cfg, seed, n_blocks=n_blocks)
    geom = setup.geom if delta is None else setup.geometry(delta)
    lo = float(min(setup.geom.centers) - setup.geom.halfwidth - 0.5)
    hi = float(max(setup.geom.centers) + setup.geom.halfwidth + 0.5)
    return PairModel(np.linspace(lo, hi, size), geom, setup.coeffs, setup.spec)


@pytest.fixture(scope="module")
def model(fast_cfg):
    return _model(fast_cfg, 1, 9)


def test_grid_guard(fast_cfg):
    with pytest.raises(GridTooLarge):
        _model(fast_cfg, 0, 26)


def test_large_delta_kernel_is_likelihood_times_two_transitions(fast_cfg):
    m = _model(fast_cfg, 2, 9, delta=1e6)
    n = m.n
    r = two_step_kernel(m, 2).reshape(n, n, n, n)
    expect = m.q()[:, :, None] * (m.psi(2) * m.q())[None, :, :]  # (x2, z1, z2)
    for i in range(n):
        assert np.allclose(r[i], expect, rtol=1e-13, atol=0)


def test_off_compact_row_uses_flat_branch(fast_cfg):
    m = _model(fast_cfg, 3, 9, delta=0.5)
    n, k = m.n, 3
    outside = np.flatnonzero(~m.geom.in_compact(k - 2, m.grid))
    assert outside.size
    r = two_step_kernel(m, k).reshape(n, n, n, n)
    xi1 = math.exp(m.geom.log_xi1(m.geom.D(k - 1))) * m.dx
    ind = m.geom.in_compact(k - 1, m.grid)
    expect = ind[:, None] * xi1 * m.psi(k) * m.q()
    for j in outside:
        assert np.allclose(r[0, j], expect, rtol=1e-13, atol=0)


def test_two_step_kernel_needs_k_two(model):
    with pytest.raises(ValueError):
        two_step_kernel(model, 1)


def test_backward_potentials(model):
    ks = [two_step_kernel(model, 2), two_step_kernel(model, 4)]
    pots = backward_potentials(ks)
    n = model.n
    assert np.all(pots[-1] == 1.0)
    assert np.allclose(pots[1], ks[1].sum(axis=1), rtol=1e-14)
    for p in pots:
        slices = p.reshape(n, n)
        spread = np.max(np.abs(slices - slices[0])) / np.max(np.abs(slices))
        assert spread <= 1e-12


def test_s_kernels_are_markov(model):
    chain = build_chain(model, 4)
    for s in chain.S:
        assert np.max(np.abs(s.sum(axis=1) - 1)) <= 1e-12


def test_dobrushin_coefficients_respect_bounds(model):
    chain = build_chain(model, 4)
    for _, coef, bound in s_dobrushin_report(chain) + u_dobrushin_report(chain):
        assert coef <= bound + 1e-10


def test_dobrushin_of_simple_matrices():
    assert dobrushin(np.full((3, 3), 1 / 3)) == 0.0
    assert dobrushin(np.eye(3)) == 1.0
    p = np.array([[0.5, 0.5], [0.9, 0.1]])
    assert dobrushin(p) == pytest.approx(0.4)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_mixing_sandwich(model, k):
    ok, viol = mixing_sandwich_check(model, k)
    assert ok, viol


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_representation_both_parities(model, n):
    mu = np.exp(-0.5 * model.grid ** 2)
    d = representation_check(model, mu, n)
    assert d <= (1e-12 if n == 1 else 1e-9)


def test_direct_truncated_normalizes(model):
    v = direct_truncated(model, np.ones(model.n), 3)
    assert v.sum() == pytest.approx(1.0, abs=1e-14)


def test_separation_bound_random_and_boundary():
    rng = np.random.default_rng(5)
    for _ in range(10_000):
        B2 = rng.uniform(0.3, 1.0)
        p21 = rng.uniform(0.0, 0.5)
        D, delta = rng.uniform(0, 3), rng.uniform(0.1, 5)
        z = rng.uniform(-5, 5)
        x = z + rng.uniform(-D, D)
        t2 = 2 * B2 * (p21 + 1) * z + rng.uniform(-delta, delta)
        assert separation_bound_check(t2, x, z, D, delta, B2, p21)
    for sx in (-1, 1):
        for st in (-1, 1):
            B2, p21, D, delta, z = 0.5, 0.3, 2.0, 3.0, 0.7
            assert separation_bound_check(2 * B2 * (p21 + 1) * z + st * delta, z + sx * D, z, D, delta, B2, p21)
    assert separation_bound_check(1.0, 0.4, 0.4, 0.0, 3.0, 0.5, 0.3)
    with pytest.raises(ValueError):
        separation_bound_check(0.0, 2.0, 0.0, 1.0, 1.0, 0.5, 0.3)
    with pytest.raises(ValueError):
        separation_bound_check(10.0, 0.0, 0.0, 1.0, 1.0, 0.5, 0.3)


def test_local_error_bound():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(2, 20))
        psi = rng.uniform(0.01, 1, n)
        a, b = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        lhs, rhs = fk_transform_gap(psi, a, b)
        assert lhs <= rhs + 1e-15


def test_contraction_ledger(fast_cfg):
    setup = prepare(fast_cfg, 0, n_blocks=8)
    led = u_chain_contraction(setup.geom)
    assert led.L == pytest.approx(smallest_L(setup.geom))
    assert led.alpha_tilde <= 0.25 + 1e-12
    assert led.rho <= (led.tau_L + 1) / 2
    # rho < 1 and 1 - rho >= (1 - tau(L)) / 2, compared in log space
    assert math.isfinite(led.log_one_minus_rho)
    assert led.log_one_minus_rho >= led.log_one_minus_tau_L - math.log(2)
    eps = np.exp(led.log_eps[1:])
    assert np.all((eps > 0) & (eps <= 1))
    # tau_k in [0, 1) means log(1 - tau_k) is finite and at most 0
    lomt = led.log_one_minus_tau[2:]
    assert np.all(np.isfinite(lomt) & (lomt <= 0))
    assert led.bound_deficit(0) == 0.0 and led.product_deficit([]) == 0.0


def test_contraction_with_fixed_centres_is_geometric(fast_cfg):
    geom = prepare(fast_cfg, 0, n_blocks=8).geom
    flat = replace(geom, centers=np.zeros_like(geom.centers), m0=0.0)
    led = u_chain_contraction(flat)
    lomt = led.log_one_minus_tau[2:]
    assert np.allclose(lomt, lomt[0], rtol=0, atol=0)
    log_tau = math.log1p(-math.exp(lomt[0]))
    for m in (1, 3, 6):
        assert led.product_deficit(range(2, 2 + m)) == pytest.approx(-math.expm1(m * log_tau), rel=1e-12)
